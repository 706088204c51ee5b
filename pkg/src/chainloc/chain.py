"""Device keys, signed transactions, blocks and chain auditing.

Every device owns a deterministic Ed25519 keypair.  Model updates travel as
signed worker transactions, validators sign their vote batches, and each
round one miner's candidate block is appended.  Blocks never embed raw
parameter vectors; they pin them by SHA-256 digest, which keeps the text dump
small and lets an auditor recheck hashes, signatures, linkage and stake
arithmetic offline.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

GENESIS_MINER = -1
ZERO_HASH = "0" * 64

ROLE_WORKER = "worker"
ROLE_VALIDATOR = "validator"
ROLE_MINER = "miner"
ROLES = (ROLE_WORKER, ROLE_VALIDATOR, ROLE_MINER)

_KEY_DOMAIN = b"fingerprint-fl/device-key/v1"


class ChainError(ValueError):
    pass


class DeviceKey:
    """Deterministic per-device signing key."""

    def __init__(self, device_id: int, private: Ed25519PrivateKey) -> None:
        self.device_id = device_id
        self._private = private
        self.public_bytes = private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls, device_id: int, seed: int) -> "DeviceKey":
        material = hashlib.sha256(
            _KEY_DOMAIN + device_id.to_bytes(8, "big", signed=True)
            + int(seed).to_bytes(8, "big")).digest()
        return cls(device_id, Ed25519PrivateKey.from_private_bytes(material))

    def sign(self, payload: bytes) -> bytes:
        return self._private.sign(payload)


def verify(public_bytes: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def corrupt_signature(signature: bytes) -> bytes:
    """Flip the first byte; models a device whose signing path is broken."""
    return bytes([signature[0] ^ 0xFF]) + signature[1:]


# --- transactions ---

@dataclass(frozen=True)
class WorkerTx:
    """A worker's signed local update for one round (vector pinned by digest)."""

    worker_id: int
    round_index: int
    update_digest: str
    train_size: int
    claimed_reward: int
    signature: bytes = b""

    def payload(self) -> bytes:
        return (f"worker:{self.worker_id}:round:{self.round_index}:"
                f"digest:{self.update_digest}:size:{self.train_size}:"
                f"reward:{self.claimed_reward}").encode()


@dataclass(frozen=True)
class ValidatorTx:
    """One validator's signed vote on one worker transaction.

    Each validator emits one of these per worker transaction it processed, so a
    round with |W| surviving workers and |V| validators carries |W| x |V| of
    them.  The inner worker transaction (payload and signature) is covered by
    the validator's own signature.
    """

    validator_id: int
    round_index: int
    worker: WorkerTx
    vote: int  # +1 accept, -1 reject
    reward: int  # validator's per-evaluation reward claim
    signature: bytes = b""

    def __post_init__(self) -> None:
        if self.vote not in (1, -1):
            raise ChainError("vote must be +1 or -1")

    def payload(self) -> bytes:
        inner = self.worker.payload().decode() + ":" + self.worker.signature.hex()
        return (f"validator:{self.validator_id}:round:{self.round_index}:"
                f"vote:{self.vote}:reward:{self.reward}:inner:{inner}").encode()


def sign_worker_tx(tx: WorkerTx, key: DeviceKey) -> WorkerTx:
    return WorkerTx(tx.worker_id, tx.round_index, tx.update_digest, tx.train_size,
                    tx.claimed_reward, key.sign(tx.payload()))


def sign_validator_tx(tx: ValidatorTx, key: DeviceKey) -> ValidatorTx:
    return ValidatorTx(tx.validator_id, tx.round_index, tx.worker, tx.vote,
                       tx.reward, key.sign(tx.payload()))


# --- blocks ---

@dataclass(frozen=True)
class UpdateRecord:
    """Per-worker tally a block commits to: digest plus the vote counts."""

    worker_id: int
    update_digest: str
    train_size: int
    pos_votes: int
    neg_votes: int


@dataclass(frozen=True)
class Reward:
    device_id: int
    role: str
    amount: int

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ChainError(f"unknown role {self.role!r}")
        if self.amount < 0:
            raise ChainError("rewards cannot be negative")


@dataclass(frozen=True)
class Block:
    round_index: int
    prev_hash: str
    miner_id: int
    model_digest: str
    updates: tuple[UpdateRecord, ...] = ()
    rewards: tuple[Reward, ...] = ()
    signature: bytes | None = None  # None only on the genesis block

    def content_lines(self) -> list[str]:
        lines = [f"round:{self.round_index}", f"prev:{self.prev_hash}",
                 f"miner:{self.miner_id}", f"model:{self.model_digest}"]
        lines += [f"update:{u.worker_id}:{u.update_digest}:{u.train_size}:"
                  f"{u.pos_votes}:{u.neg_votes}" for u in self.updates]
        lines += [f"reward:{r.device_id}:{r.role}:{r.amount}" for r in self.rewards]
        return lines

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.content_lines()).encode()).hexdigest()


def make_genesis(model_digest: str) -> Block:
    return Block(0, ZERO_HASH, GENESIS_MINER, model_digest)


def mine_block(key: DeviceKey, round_index: int, prev_hash: str, model_digest: str,
               updates: Iterable[UpdateRecord], rewards: Iterable[Reward]) -> Block:
    """Assemble and sign a candidate block for one round."""
    draft = Block(round_index, prev_hash, key.device_id, model_digest,
                  tuple(updates), tuple(rewards))
    sig = key.sign(bytes.fromhex(draft.content_hash()))
    return Block(draft.round_index, draft.prev_hash, draft.miner_id,
                 draft.model_digest, draft.updates, draft.rewards, sig)


def block_signature_valid(block: Block, pubkeys: dict[int, bytes]) -> bool:
    if block.signature is None or block.miner_id not in pubkeys:
        return False
    return verify(pubkeys[block.miner_id], bytes.fromhex(block.content_hash()),
                  block.signature)


def select_legitimate(candidates: list[Block], stakes: dict[int, int]) -> Block:
    """Proof-of-stake choice: highest miner stake, ties to the lowest device id."""
    if not candidates:
        raise ChainError("no candidate blocks")
    return max(candidates, key=lambda b: (stakes.get(b.miner_id, 0), -b.miner_id))


class Chain:
    """An append-only block list starting at a genesis block."""

    def __init__(self, genesis: Block) -> None:
        if genesis.round_index != 0 or genesis.prev_hash != ZERO_HASH:
            raise ChainError("genesis must have round 0 and an all-zero parent")
        if genesis.miner_id != GENESIS_MINER or genesis.signature is not None:
            raise ChainError("genesis is unsigned and carries the reserved miner id")
        self.blocks: list[Block] = [genesis]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    def append(self, block: Block, pubkeys: dict[int, bytes]) -> None:
        if block.prev_hash != self.tip.content_hash():
            raise ChainError("parent hash does not match the chain tip")
        if block.round_index <= self.tip.round_index:
            raise ChainError("round index must increase")
        if not block_signature_valid(block, pubkeys):
            raise ChainError("bad miner signature")
        self.blocks.append(block)


def stake_table(blocks: Iterable[Block]) -> dict[int, int]:
    """Replay all rewards into per-device balances."""
    stakes: dict[int, int] = {}
    for b in blocks:
        for r in b.rewards:
            stakes[r.device_id] = stakes.get(r.device_id, 0) + r.amount
    return stakes


class StakeLedger:
    """Running per-device stake balances; credits only, never debits."""

    def __init__(self) -> None:
        self.balances: dict[int, int] = {}

    def credit_block(self, block: Block) -> None:
        for r in block.rewards:
            self.balances[r.device_id] = self.balances.get(r.device_id, 0) + r.amount

    def get(self, device_id: int) -> int:
        return self.balances.get(device_id, 0)

    def as_dict(self) -> dict[int, int]:
        return dict(self.balances)


def append_block(chain: Chain, block: Block, stakes: StakeLedger,
                 pubkeys: dict[int, bytes]) -> None:
    """Append a verified block and credit its rewards in one step."""
    chain.append(block, pubkeys)
    stakes.credit_block(block)


# --- text dump and offline audit ---

def dump_section(out: TextIO, kind: str, pubkeys: dict[int, bytes],
                 blocks: Iterable[Block], stakes: dict[int, int]) -> None:
    """Write one self-contained auditable chain section.

    The trailing `end checksum=` line pins every byte of the section,
    including header, pubkey and stake lines that no block hash covers.
    """
    pub_ids = sorted(pubkeys)
    lines = [f"chain kind={kind} devices={len(pub_ids)}"]
    for d in pub_ids:
        lines.append(f"pubkey device={d} key={pubkeys[d].hex()}")
    for b in blocks:
        sig = "-" if b.signature is None else b.signature.hex()
        lines.append(f"block round={b.round_index} prev={b.prev_hash} miner={b.miner_id} "
                     f"model={b.model_digest} hash={b.content_hash()} sig={sig}")
        for u in b.updates:
            lines.append(f"update worker={u.worker_id} digest={u.update_digest} "
                         f"size={u.train_size} pos={u.pos_votes} neg={u.neg_votes}")
        for r in b.rewards:
            lines.append(f"reward device={r.device_id} role={r.role} amount={r.amount}")
    for d in sorted(set(pub_ids) | set(stakes)):
        lines.append(f"stake device={d} balance={stakes.get(d, 0)}")
    h = hashlib.sha256()
    for line in lines:
        h.update((line + "\n").encode())
    lines.append(f"end checksum={h.hexdigest()}")
    out.write("\n".join(lines) + "\n")


@dataclass
class AuditReport:
    ok: bool
    sections: int
    blocks: int
    errors: list[str] = field(default_factory=list)


_RE_CHAIN = re.compile(r"^chain kind=(\S+) devices=(\d+)$")
_RE_PUBKEY = re.compile(r"^pubkey device=(-?\d+) key=([0-9a-f]{64})$")
_RE_BLOCK = re.compile(r"^block round=(\d+) prev=([0-9a-f]{64}) miner=(-?\d+) "
                       r"model=([0-9a-f]{64}) hash=([0-9a-f]{64}) sig=(-|[0-9a-f]{128})$")
_RE_UPDATE = re.compile(r"^update worker=(\d+) digest=([0-9a-f]{64}) size=(\d+) "
                        r"pos=(\d+) neg=(\d+)$")
_RE_REWARD = re.compile(r"^reward device=(-?\d+) role=(\w+) amount=(\d+)$")
_RE_STAKE = re.compile(r"^stake device=(-?\d+) balance=(\d+)$")
_RE_END = re.compile(r"^end checksum=([0-9a-f]{64})$")


class _Section:
    def __init__(self, kind: str) -> None:
        self.kind = kind
        self.pubkeys: dict[int, bytes] = {}
        self.blocks: list[tuple[Block, str]] = []  # (reconstructed block, recorded hash)
        self.stakes: dict[int, int] = {}


def _audit_section(sec: _Section, errors: list[str]) -> None:
    tag = f"chain[{sec.kind}]"
    if not sec.blocks:
        errors.append(f"{tag}: no blocks")
        return
    genesis, g_hash = sec.blocks[0]
    if (genesis.round_index != 0 or genesis.prev_hash != ZERO_HASH
            or genesis.miner_id != GENESIS_MINER or genesis.signature is not None
            or genesis.updates or genesis.rewards):
        errors.append(f"{tag}: malformed genesis block")
    prev_recorded = None
    prev_round = -1
    for block, recorded in sec.blocks:
        where = f"{tag} block {block.round_index}"
        if block.content_hash() != recorded:
            errors.append(f"{where}: content does not match its recorded hash")
        if block.round_index <= prev_round:
            errors.append(f"{where}: round index does not increase")
        if prev_recorded is not None and block.prev_hash != prev_recorded:
            errors.append(f"{where}: parent hash mismatch")
        if block.miner_id != GENESIS_MINER:
            if block.signature is None:
                errors.append(f"{where}: missing miner signature")
            elif block.miner_id not in sec.pubkeys:
                errors.append(f"{where}: unknown miner")
            elif not verify(sec.pubkeys[block.miner_id], bytes.fromhex(recorded),
                            block.signature):
                errors.append(f"{where}: miner signature invalid")
        prev_recorded, prev_round = recorded, block.round_index
    replayed = stake_table(b for b, _ in sec.blocks)
    for d in sorted(set(replayed) | set(sec.stakes) | set(sec.pubkeys)):
        if replayed.get(d, 0) != sec.stakes.get(d, 0):
            errors.append(f"{tag}: stake of device {d} is {sec.stakes.get(d, 0)}, "
                          f"rewards replay to {replayed.get(d, 0)}")


def audit_chain_text(text: str) -> AuditReport:
    """Recheck checksums, hashes, signatures, linkage, rounds and stakes.

    Lines are split strictly on newline bytes and every section line feeds the
    section checksum, so any byte-level tampering is detected even in fields
    that no block hash covers.
    """
    errors: list[str] = []
    sections: list[_Section] = []
    sec: _Section | None = None
    sec_closed = True
    hasher = None
    cur: dict | None = None

    def flush_block() -> None:
        nonlocal cur
        if cur is not None:
            block = Block(cur["round"], cur["prev"], cur["miner"], cur["model"],
                          tuple(cur["updates"]), tuple(cur["rewards"]), cur["sig"])
            sec.blocks.append((block, cur["hash"]))
            cur = None

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for ln, line in enumerate(lines, start=1):
        if m := _RE_CHAIN.match(line):
            if sec is not None and not sec_closed:
                errors.append(f"line {ln}: previous section has no checksum line")
                break
            flush_block()
            sec = _Section(m.group(1))
            sec_closed = False
            sections.append(sec)
            hasher = hashlib.sha256()
            hasher.update((line + "\n").encode())
            continue
        if sec is None:
            errors.append(f"line {ln}: content before any chain header")
            break
        if sec_closed:
            errors.append(f"line {ln}: content after a section checksum")
            break
        if m := _RE_END.match(line):
            flush_block()
            if m.group(1) != hasher.hexdigest():
                errors.append(f"line {ln}: section checksum mismatch")
                break
            sec_closed = True
            continue
        hasher.update((line + "\n").encode())
        if m := _RE_PUBKEY.match(line):
            sec.pubkeys[int(m.group(1))] = bytes.fromhex(m.group(2))
        elif m := _RE_BLOCK.match(line):
            flush_block()
            cur = {"round": int(m.group(1)), "prev": m.group(2),
                   "miner": int(m.group(3)), "model": m.group(4),
                   "hash": m.group(5),
                   "sig": None if m.group(6) == "-" else bytes.fromhex(m.group(6)),
                   "updates": [], "rewards": []}
        elif m := _RE_UPDATE.match(line):
            if cur is None:
                errors.append(f"line {ln}: update outside a block")
                break
            cur["updates"].append(UpdateRecord(int(m.group(1)), m.group(2),
                                               int(m.group(3)), int(m.group(4)),
                                               int(m.group(5))))
        elif m := _RE_REWARD.match(line):
            if cur is None:
                errors.append(f"line {ln}: reward outside a block")
                break
            try:
                cur["rewards"].append(Reward(int(m.group(1)), m.group(2), int(m.group(3))))
            except ChainError as e:
                errors.append(f"line {ln}: {e}")
                break
        elif m := _RE_STAKE.match(line):
            flush_block()
            sec.stakes[int(m.group(1))] = int(m.group(2))
        else:
            errors.append(f"line {ln}: unrecognized line {line[:60]!r}")
            break
    flush_block()

    if not errors and sec is not None and not sec_closed:
        errors.append("final section has no checksum line")
    if not sections and not errors:
        errors.append("no chain sections found")
    if not errors:
        for s in sections:
            _audit_section(s, errors)
    n_blocks = sum(len(s.blocks) for s in sections)
    return AuditReport(ok=not errors, sections=len(sections), blocks=n_blocks,
                       errors=errors)


def audit_chain_file(path: str) -> AuditReport:
    with open(path, "r", encoding="utf-8") as fh:
        return audit_chain_text(fh.read())
