"""Decentralized training rounds: roles, voting, mining and aggregation.

Each round a fixed device population is randomly split into workers,
validators and miners.  Workers sign locally trained updates, validators
score each update against a one-epoch proxy model on their private test
data and vote, miners tally the votes into a candidate block, and the
highest-stake miner's block decides which updates enter the new global
model.  Faulty devices participate with corrupted signatures and are
thereby excluded from every tally.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import chain
from . import model
from .data import ClientShard, CoordBounds

ROLE_NAMES = ("workers", "validators", "miners")


@dataclass(frozen=True)
class FaultSchedule:
    """Per-round crash faults: how many devices fail and in which phase."""

    count: int = 0
    phase: str = "training"  # training | inference | both

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("fault count must be nonnegative")
        if self.phase not in ("training", "inference", "both"):
            raise ValueError(f"unknown fault phase {self.phase!r}")

    @property
    def in_training(self) -> bool:
        return self.count > 0 and self.phase in ("training", "both")

    @property
    def in_inference(self) -> bool:
        return self.count > 0 and self.phase in ("inference", "both")


@dataclass(frozen=True)
class RoleAssignment:
    round_index: int
    workers: tuple[int, ...]
    validators: tuple[int, ...]
    miners: tuple[int, ...]


def assign_roles(round_index: int, participants: list[int],
                 counts: tuple[int, int, int], rng: np.random.Generator) -> RoleAssignment:
    """Uniform random partition of the devices into the three roles."""
    if sum(counts) != len(participants):
        raise ValueError(f"role counts {counts} must sum to {len(participants)} devices")
    order = [participants[i] for i in rng.permutation(len(participants))]
    w, v, _ = counts
    return RoleAssignment(round_index,
                          tuple(sorted(order[:w])),
                          tuple(sorted(order[w:w + v])),
                          tuple(sorted(order[w + v:])))


def validation_vote(kind: str, proxy_metric: float, worker_metric: float,
                    threshold: float) -> tuple[float, int]:
    """Score one worker update against the validator's proxy model.

    Classifier: metric is the accuracy shortfall proxy - worker, accepted when
    it does not exceed the threshold.  Regressor: metric is the error ratio
    proxy / worker (both mean distances, lower is better), accepted when the
    worker's error is not much worse than the proxy's; a zero worker error
    counts as an infinite ratio and is accepted.
    """
    if kind == "bfc":
        metric = proxy_metric - worker_metric
        return metric, (1 if metric <= threshold else -1)
    if kind == "llr":
        metric = math.inf if worker_metric == 0 else proxy_metric / worker_metric
        return metric, (1 if metric >= threshold else -1)
    raise ValueError(f"unknown task kind {kind!r}")


def filter_valid_votes(validator_txs: list[chain.ValidatorTx],
                       pubkeys: dict[int, bytes],
                       round_index: int) -> list[chain.ValidatorTx]:
    """Drop every transaction a miner must not count.

    Both the validator signature and the embedded worker signature must
    verify and both round indices must match.  A validator's duplicate vote
    on the same worker is dropped after the first occurrence.
    """
    kept: list[chain.ValidatorTx] = []
    seen: set[tuple[int, int]] = set()
    for tx in validator_txs:
        if tx.round_index != round_index or tx.worker.round_index != round_index:
            continue
        vk = pubkeys.get(tx.validator_id)
        if vk is None or not chain.verify(vk, tx.payload(), tx.signature):
            continue
        wk = pubkeys.get(tx.worker.worker_id)
        if wk is None or not chain.verify(wk, tx.worker.payload(), tx.worker.signature):
            continue
        pair = (tx.validator_id, tx.worker.worker_id)
        if pair in seen:
            continue
        seen.add(pair)
        kept.append(tx)
    return kept


def tally_votes(valid_txs: list[chain.ValidatorTx]
                ) -> list[tuple[chain.WorkerTx, int, int]]:
    """Per-worker (tx, positive, negative) counts, ascending by worker id.

    Expects the output of filter_valid_votes; unfiltered transactions must
    never reach a tally.
    """
    per_worker: dict[int, list] = {}
    for tx in valid_txs:
        entry = per_worker.setdefault(tx.worker.worker_id, [tx.worker, 0, 0])
        if tx.vote > 0:
            entry[1] += 1
        else:
            entry[2] += 1
    return [tuple(per_worker[w]) for w in sorted(per_worker)]


def validator_reward_totals(valid_txs: list[chain.ValidatorTx]) -> dict[int, int]:
    """Summed per-validator reward claims over their surviving votes."""
    totals: dict[int, int] = {}
    for tx in valid_txs:
        totals[tx.validator_id] = totals.get(tx.validator_id, 0) + tx.reward
    return totals


def summarize_block(tallies: list[tuple[chain.WorkerTx, int, int]],
                    validator_totals: dict[int, int],
                    role_counts: tuple[int, int, int], unit_reward: int,
                    miner_id: int) -> tuple[tuple[chain.UpdateRecord, ...],
                                            tuple[chain.Reward, ...]]:
    """Build the update records and the canonical reward list for one block.

    Rewards are ordered workers ascending, validators ascending, then the
    miner's own nominal claim of |workers| x |validators| x unit_reward.
    A worker outvoted negatively keeps a zero-amount record.
    """
    updates = tuple(chain.UpdateRecord(tx.worker_id, tx.update_digest, tx.train_size,
                                       pos, neg)
                    for tx, pos, neg in tallies)
    rewards = [chain.Reward(tx.worker_id, chain.ROLE_WORKER,
                            0 if neg > pos else tx.claimed_reward)
               for tx, pos, neg in tallies]
    rewards.extend(chain.Reward(v, chain.ROLE_VALIDATOR, validator_totals[v])
                   for v in sorted(validator_totals))
    rewards.append(chain.Reward(miner_id, chain.ROLE_MINER,
                                role_counts[0] * role_counts[1] * unit_reward))
    return updates, tuple(rewards)


def aggregate_included(tallies: list[tuple[chain.WorkerTx, int, int]],
                       pool: dict[str, model.ParamVector],
                       previous: model.ParamVector,
                       aggregation: str) -> model.ParamVector:
    """Average exactly the updates whose positive votes are not outnumbered.

    An empty surviving set carries the previous global model forward.
    """
    included = [(tx, pos, neg) for tx, pos, neg in tallies if pos >= neg]
    if not included:
        return previous
    vectors = [pool[tx.update_digest] for tx, _, _ in included]
    weights = ([float(tx.train_size) for tx, _, _ in included]
               if aggregation == "weighted" else None)
    return model.fedavg(vectors, weights)


@dataclass(frozen=True)
class DflParams:
    """Protocol-level knobs for one decentralized training run."""

    kind: str
    spec: model.ModelSpec
    train: model.TrainConfig
    threshold: float
    role_counts: tuple[int, int, int] = (12, 5, 3)
    unit_reward: int = 1
    aggregation: str = "weighted"  # weighted | uniform
    sigma: float = 0.0
    malicious: frozenset = frozenset()
    faults: FaultSchedule = FaultSchedule()
    key_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("bfc", "llr"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if min(self.role_counts) < 0 or self.role_counts[2] == 0:
            raise ValueError("role counts need a nonnegative split with >=1 miner")
        if self.aggregation not in ("weighted", "uniform"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


class DflRun:
    """One decentralized training run over a fixed device population.

    Every mutation of global state happens in ascending device-id order from
    named per-device RNG streams, so a run is a pure function of its inputs.
    """

    def __init__(self, shards: list[ClientShard], bounds: CoordBounds,
                 params: DflParams, seed_seq: np.random.SeedSequence,
                 init: model.ParamVector | None = None) -> None:
        if sum(params.role_counts) != len(shards):
            raise ValueError(f"role counts {params.role_counts} must sum to "
                             f"{len(shards)} devices")
        if params.faults.count > len(shards):
            raise ValueError("fault count exceeds the device population")
        self.params = params
        self.bounds = bounds
        self.shards = {s.client_id: s for s in shards}
        self.device_ids = sorted(self.shards)
        children = seed_seq.spawn(2 + len(shards))
        self.orch_rng = np.random.default_rng(children[0])
        self.dev_rng = {d: np.random.default_rng(children[2 + i])
                        for i, d in enumerate(self.device_ids)}
        if init is None:
            init = model.init_params(params.spec, np.random.default_rng(children[1]))
        if init.spec.fingerprint != params.spec.fingerprint:
            raise ValueError("initial parameters were built for a different spec")
        self.global_params = init
        self.keys = {d: chain.DeviceKey.generate(d, params.key_seed)
                     for d in self.device_ids}
        self.pubkeys = {d: k.public_bytes for d, k in self.keys.items()}
        self.chain = chain.Chain(chain.make_genesis(init.digest()))
        self.stakes = chain.StakeLedger()
        self.events: list[dict] = []
        self.round_index = 0
        self._train_xy = {}
        for d in self.device_ids:
            shard = self.shards[d]
            if len(shard.test) == 0:
                raise ValueError(f"device {d} has an empty local test set")
            X = model.features(shard.train)
            Y = (model.classification_targets(shard.train) if params.kind == "bfc"
                 else model.regression_targets(shard.train, bounds))
            self._train_xy[d] = (X, Y)

    def _local_metric(self, device_id: int, params: model.ParamVector) -> float:
        """Accuracy (classifier) or mean error distance in meters (regressor)
        on the device's own test shard."""
        shard_test = self.shards[device_id].test
        if self.params.kind == "bfc":
            return model.accuracy(self.params.spec, params, shard_test)
        return model.position_error(self.params.spec, params, shard_test, self.bounds)

    def run_round(self) -> None:
        p = self.params
        self.round_index += 1
        r = self.round_index
        faulty: frozenset = frozenset()
        if p.faults.in_training:
            pick = self.orch_rng.choice(len(self.device_ids), size=p.faults.count,
                                        replace=False)
            faulty = frozenset(self.device_ids[i] for i in pick)
        roles = assign_roles(r, self.device_ids, p.role_counts, self.orch_rng)
        self.events.append({"event": "roles", "round": r,
                            "workers": list(roles.workers),
                            "validators": list(roles.validators),
                            "miners": list(roles.miners),
                            "faulty": sorted(faulty)})

        pool: dict[str, model.ParamVector] = {}
        worker_txs: list[chain.WorkerTx] = []
        for w in roles.workers:
            rng = self.dev_rng[w]
            X, Y = self._train_xy[w]
            update = model.train_local(self.global_params, X, Y, p.train, rng)
            if w in p.malicious:
                update = model.inject_gaussian_noise(update, p.sigma, rng)
            n_train = len(self.shards[w].train)
            claimed = p.train.epochs * n_train * p.unit_reward
            tx = chain.sign_worker_tx(
                chain.WorkerTx(w, r, update.digest(), n_train, claimed), self.keys[w])
            if w in faulty:
                tx = dataclasses.replace(
                    tx, signature=chain.corrupt_signature(tx.signature))
            pool[update.digest()] = update
            worker_txs.append(tx)

        surviving = [tx for tx in worker_txs
                     if chain.verify(self.pubkeys[tx.worker_id], tx.payload(),
                                     tx.signature)]
        validator_txs: list[chain.ValidatorTx] = []
        proxy_cfg = dataclasses.replace(p.train, epochs=1)
        for v in roles.validators:
            rng = self.dev_rng[v]
            X, Y = self._train_xy[v]
            proxy = model.train_local(self.global_params, X, Y, proxy_cfg, rng)
            proxy_metric = self._local_metric(v, proxy)
            per_tx_reward = len(self.shards[v].train) * p.unit_reward
            for tx in surviving:
                worker_metric = self._local_metric(v, pool[tx.update_digest])
                metric, vote = validation_vote(p.kind, proxy_metric, worker_metric,
                                               p.threshold)
                self.events.append({"event": "verdict", "round": r, "validator": v,
                                    "worker": tx.worker_id, "metric": metric,
                                    "threshold": p.threshold, "vote": vote,
                                    "worker_malicious": tx.worker_id in p.malicious})
                vtx = chain.sign_validator_tx(
                    chain.ValidatorTx(v, r, tx, vote, per_tx_reward), self.keys[v])
                if v in faulty:
                    vtx = dataclasses.replace(
                        vtx, signature=chain.corrupt_signature(vtx.signature))
                validator_txs.append(vtx)

        # every miner verifies the same broadcast set; the shared result of one
        # pass is what each would compute alone
        valid_txs = filter_valid_votes(validator_txs, self.pubkeys, r)
        tallies = tally_votes(valid_txs)
        totals = validator_reward_totals(valid_txs)
        new_global = aggregate_included(tallies, pool, self.global_params,
                                        p.aggregation)
        prev_hash = self.chain.tip.content_hash()
        candidates: list[chain.Block] = []
        for m in roles.miners:
            updates, rewards = summarize_block(tallies, totals, p.role_counts,
                                               p.unit_reward, m)
            block = chain.mine_block(self.keys[m], r, prev_hash, new_global.digest(),
                                     updates, rewards)
            if m in faulty:
                block = dataclasses.replace(
                    block, signature=chain.corrupt_signature(block.signature))
            candidates.append(block)

        valid_blocks = [b for b in candidates
                        if chain.block_signature_valid(b, self.pubkeys)]
        if not valid_blocks:
            self.events.append({"event": "aborted", "round": r,
                                "reason": "no signature-valid candidate block"})
            return
        legitimate = chain.select_legitimate(valid_blocks, self.stakes.balances)
        chain.append_block(self.chain, legitimate, self.stakes, self.pubkeys)
        self.global_params = new_global
        self.events.append({"event": "block", "round": r, "miner": legitimate.miner_id,
                            "updates": [(u.worker_id, u.pos_votes, u.neg_votes)
                                        for u in legitimate.updates],
                            "included": [u.worker_id for u in legitimate.updates
                                         if u.pos_votes >= u.neg_votes]})

    def run(self, rounds: int) -> None:
        for _ in range(rounds):
            self.run_round()

    def dump_chain(self, out) -> None:
        chain.dump_section(out, self.params.kind, self.pubkeys, self.chain.blocks,
                           self.stakes.as_dict())


def infer_dfl(spec: model.ModelSpec, params: model.ParamVector, X: np.ndarray,
              n_devices: int, faulty_count: int,
              rng: np.random.Generator) -> np.ndarray:
    """Median-aggregated device inference with per-sample faulty draws.

    Every healthy device reports the shared global model's output; each
    faulty device reports a uniform random vector in the normalized output
    range [0, 1].  The result is the coordinatewise median across devices
    (for an even count, the mean of the two middle values), taken over raw
    probabilities or normalized coordinates before any decoding.
    """
    pred = model.predict(spec, params, X)
    if faulty_count <= 0:
        return pred
    if faulty_count > n_devices:
        raise ValueError("more faulty devices than devices")
    n, k = pred.shape
    stacked = np.repeat(pred[:, None, :], n_devices, axis=1)
    for i in range(n):
        ids = rng.choice(n_devices, size=faulty_count, replace=False)
        stacked[i, ids, :] = rng.uniform(0.0, 1.0, size=(faulty_count, k))
    return np.median(stacked, axis=1)
