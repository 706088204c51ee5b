import dataclasses
import hashlib
import io

import numpy as np
import pytest

from chainloc import chain
from chainloc import model
from chainloc.chain import (
    DeviceKey,
    ValidatorTx,
    WorkerTx,
    audit_chain_text,
    corrupt_signature,
    sign_validator_tx,
    sign_worker_tx,
    stake_table,
)
from chainloc.data import generate_synthetic, partition_clients
from chainloc.protocol import (
    DflParams,
    DflRun,
    FaultSchedule,
    RoleAssignment,
    aggregate_included,
    assign_roles,
    filter_valid_votes,
    infer_dfl,
    summarize_block,
    tally_votes,
    validation_vote,
    validator_reward_totals,
)


def _digest(s: str) -> str:
    return hashlib.sha256(s.encode()).hexdigest()


# --- role assignment ---

def test_assign_roles_partition_sizes():
    ids = list(range(20))
    roles = assign_roles(1, ids, (12, 5, 3), np.random.default_rng(0))
    assert len(roles.workers) == 12
    assert len(roles.validators) == 5
    assert len(roles.miners) == 3
    combined = set(roles.workers) | set(roles.validators) | set(roles.miners)
    assert combined == set(ids)
    assert roles.workers == tuple(sorted(roles.workers))


def test_assign_roles_deterministic():
    ids = list(range(20))
    a = assign_roles(1, ids, (12, 5, 3), np.random.default_rng(42))
    b = assign_roles(1, ids, (12, 5, 3), np.random.default_rng(42))
    assert a == b
    c = assign_roles(1, ids, (12, 5, 3), np.random.default_rng(43))
    assert c != a


def test_assign_roles_count_mismatch():
    with pytest.raises(ValueError, match="sum"):
        assign_roles(1, list(range(20)), (12, 5, 4), np.random.default_rng(0))


def test_assign_roles_degenerate_all_workers():
    roles = assign_roles(1, list(range(4)), (4, 0, 0), np.random.default_rng(0))
    assert len(roles.workers) == 4
    assert roles.validators == () and roles.miners == ()


# --- vote rule ---

def test_validation_vote_bfc_rule():
    metric, vote = validation_vote("bfc", 0.95, 0.93, 0.1)
    assert metric == pytest.approx(0.02)
    assert vote == 1
    metric, vote = validation_vote("bfc", 0.95, 0.60, 0.1)
    assert metric == pytest.approx(0.35)
    assert vote == -1
    # the rule is not-greater-than, so an exact hit passes
    _, vote = validation_vote("bfc", 0.875, 0.75, 0.125)
    assert vote == 1


def test_validation_vote_llr_rule():
    metric, vote = validation_vote("llr", 6.0, 5.0, 0.9)
    assert metric == pytest.approx(1.2)
    assert vote == 1
    metric, vote = validation_vote("llr", 6.0, 60.0, 0.9)
    assert metric == pytest.approx(0.1)
    assert vote == -1
    # a perfect worker yields an infinite ratio and always passes
    metric, vote = validation_vote("llr", 6.0, 0.0, 0.9)
    assert metric == np.inf and vote == 1
    _, vote = validation_vote("llr", 0.9, 1.0, 0.9)
    assert vote == 1  # exact threshold hit passes


def test_validation_vote_unknown_kind():
    with pytest.raises(ValueError):
        validation_vote("xyz", 1.0, 1.0, 0.5)


# --- vote filtering and tallying over crafted transactions ---

def _vtx(vkey: DeviceKey, wkey: DeviceKey, v_id: int, w_id: int, r: int, vote: int,
         reward: int = 10) -> ValidatorTx:
    wtx = sign_worker_tx(WorkerTx(w_id, r, _digest(f"u{w_id}r{r}"), 8, 80), wkey)
    return sign_validator_tx(ValidatorTx(v_id, r, wtx, vote, reward), vkey)


@pytest.fixture()
def crafted():
    keys = {d: DeviceKey.generate(d, seed=3) for d in range(6)}
    pub = {d: k.public_bytes for d, k in keys.items()}
    return keys, pub


def test_filter_drops_invalid_and_foreign(crafted):
    keys, pub = crafted
    good = _vtx(keys[4], keys[0], 4, 0, 1, 1)
    bad_vsig = dataclasses.replace(_vtx(keys[4], keys[1], 4, 1, 1, 1),
                                   signature=corrupt_signature(b"\0" * 64))
    wtx_bad = dataclasses.replace(
        sign_worker_tx(WorkerTx(2, 1, _digest("x"), 8, 80), keys[2]),
        signature=corrupt_signature(
            sign_worker_tx(WorkerTx(2, 1, _digest("x"), 8, 80), keys[2]).signature))
    bad_inner = sign_validator_tx(ValidatorTx(4, 1, wtx_bad, 1, 10), keys[4])
    wrong_round = _vtx(keys[4], keys[3], 4, 3, 2, 1)
    kept = filter_valid_votes([good, bad_vsig, bad_inner, wrong_round], pub, 1)
    assert kept == [good]


def test_filter_drops_unknown_validator(crafted):
    keys, pub = crafted
    stranger = DeviceKey.generate(99, seed=3)
    tx = _vtx(stranger, keys[0], 99, 0, 1, 1)
    assert filter_valid_votes([tx], pub, 1) == []


def test_filter_dedupes_repeat_votes(crafted):
    keys, pub = crafted
    first = _vtx(keys[4], keys[0], 4, 0, 1, 1)
    second = _vtx(keys[4], keys[0], 4, 0, 1, -1)
    kept = filter_valid_votes([first, second], pub, 1)
    assert kept == [first]


def test_tally_counts_and_order(crafted):
    keys, pub = crafted
    txs = [
        _vtx(keys[4], keys[1], 4, 1, 1, 1),
        _vtx(keys[5], keys[1], 5, 1, 1, -1),
        _vtx(keys[4], keys[0], 4, 0, 1, 1),
        _vtx(keys[5], keys[0], 5, 0, 1, 1),
    ]
    tallies = tally_votes(filter_valid_votes(txs, pub, 1))
    assert [(t[0].worker_id, t[1], t[2]) for t in tallies] == [(0, 2, 0), (1, 1, 1)]


def test_validator_reward_totals(crafted):
    keys, pub = crafted
    txs = [
        _vtx(keys[4], keys[0], 4, 0, 1, 1, reward=7),
        _vtx(keys[4], keys[1], 4, 1, 1, -1, reward=7),
        _vtx(keys[5], keys[0], 5, 0, 1, 1, reward=9),
    ]
    totals = validator_reward_totals(filter_valid_votes(txs, pub, 1))
    assert totals == {4: 14, 5: 9}


def test_summarize_block_reward_rules(crafted):
    keys, pub = crafted
    txs = []
    # worker 0: 2 pos / 1 neg; worker 1: 1 pos / 1 neg (tie); worker 2: 1 pos / 2 neg
    votes = {0: [1, 1, -1], 1: [1, -1], 2: [1, -1, -1]}
    validators = [3, 4, 5]
    for w, vs in votes.items():
        for v, vote in zip(validators, vs):
            txs.append(_vtx(keys[v], keys[w], v, w, 1, vote, reward=5))
    valid = filter_valid_votes(txs, pub, 1)
    tallies = tally_votes(valid)
    totals = validator_reward_totals(valid)
    updates, rewards = summarize_block(tallies, totals, (12, 5, 3), 1, miner_id=5)

    assert [(u.worker_id, u.pos_votes, u.neg_votes) for u in updates] == [
        (0, 2, 1), (1, 1, 1), (2, 1, 2)]
    roles = [(rw.device_id, rw.role, rw.amount) for rw in rewards]
    # workers ascending (tie keeps its claim, outvoted goes to zero),
    # validators ascending, miner last with the nominal |W| x |V| x r claim
    assert roles == [
        (0, "worker", 80), (1, "worker", 80), (2, "worker", 0),
        (3, "validator", 15), (4, "validator", 15), (5, "validator", 10),
        (5, "miner", 60)]


def test_aggregate_included_tie_and_rejection():
    spec = model.ModelSpec("llr", in_dim=4, extractor_width=3, hidden_width=2)
    rng = np.random.default_rng(0)
    vecs = [model.init_params(spec, rng) for _ in range(3)]
    pool = {v.digest(): v for v in vecs}
    keys = [DeviceKey.generate(d, seed=1) for d in range(3)]
    txs = [sign_worker_tx(WorkerTx(d, 1, vecs[d].digest(), 10 * (d + 1), 100), keys[d])
           for d in range(3)]
    prev = model.init_params(spec, rng)

    tallies = [(txs[0], 2, 1), (txs[1], 1, 1), (txs[2], 0, 3)]
    out = aggregate_included(tallies, pool, prev, "uniform")
    expected = model.fedavg([vecs[0], vecs[1]])
    np.testing.assert_allclose(out.values, expected.values, rtol=1e-12)

    out_w = aggregate_included(tallies, pool, prev, "weighted")
    expected_w = model.fedavg([vecs[0], vecs[1]], [10.0, 20.0])
    np.testing.assert_allclose(out_w.values, expected_w.values, rtol=1e-12)

    none = aggregate_included([(txs[2], 0, 3)], pool, prev, "weighted")
    assert none is prev


# --- integration over a small population ---

def _small_params(kind="llr", **over):
    spec = (model.ModelSpec("bfc", extractor_width=16) if kind == "bfc"
            else model.ModelSpec("llr", extractor_width=16, hidden_width=8))
    base = dict(kind=kind, spec=spec,
                train=model.TrainConfig(lr=0.01, batch_size=100, epochs=2),
                threshold=0.1 if kind == "bfc" else 0.9,
                role_counts=(2, 2, 1), unit_reward=1)
    base.update(over)
    return DflParams(**base)


def _small_run(kind="llr", seed=7, data_seed=0, **over) -> DflRun:
    ds = generate_synthetic(200, n_buildings=3, n_floors=2, n_aps=60, seed=data_seed)
    shards = partition_clients(ds, 5, 0.2, np.random.default_rng(data_seed + 1))
    return DflRun(shards, ds.coord_bounds(), _small_params(kind, **over),
                  np.random.SeedSequence(seed))


def test_run_round_grows_chain_and_pins_model():
    run = _small_run()
    for expected in (2, 3, 4):
        run.run_round()
        assert len(run.chain.blocks) == expected
        assert run.chain.tip.model_digest == run.global_params.digest()
        assert len(run.chain.tip.updates) == 2


def test_stake_conservation_and_ledger_replay():
    run = _small_run()
    run.run(3)
    assert run.stakes.as_dict() == stake_table(run.chain.blocks)
    balance = {}
    for block in run.chain.blocks:
        for rw in block.rewards:
            balance[rw.device_id] = balance.get(rw.device_id, 0) + rw.amount
    assert balance == run.stakes.as_dict()


def test_reward_formulas_recomputed():
    run = _small_run()
    run.run(3)
    epochs = run.params.train.epochs
    sizes = {d: len(run.shards[d].train) for d in run.device_ids}
    roles_by_round = {e["round"]: e for e in run.events if e["event"] == "roles"}
    for block in run.chain.blocks[1:]:
        roles = roles_by_round[block.round_index]
        n_workers = len(block.updates)
        for u in block.updates:
            assert u.train_size == sizes[u.worker_id]
        for rw in block.rewards:
            if rw.role == "worker":
                u = next(x for x in block.updates if x.worker_id == rw.device_id)
                expect = 0 if u.neg_votes > u.pos_votes else epochs * sizes[rw.device_id]
                assert rw.amount == expect
            elif rw.role == "validator":
                assert rw.device_id in roles["validators"]
                assert rw.amount == n_workers * sizes[rw.device_id]
            else:
                assert rw.device_id == block.miner_id
                assert rw.amount == 2 * 2 * 1


def test_legitimate_block_is_max_stake_miner():
    run = _small_run()
    stakes_before = []
    for _ in range(6):
        stakes_before.append(dict(run.stakes.as_dict()))
        run.run_round()
    for snap, block in zip(stakes_before, run.chain.blocks[1:]):
        roles = next(e for e in run.events
                     if e["event"] == "roles" and e["round"] == block.round_index)
        candidates = [m for m in roles["miners"] if m not in roles["faulty"]]
        best = max(candidates, key=lambda m: (snap.get(m, 0), -m))
        assert block.miner_id == best


def test_run_determinism():
    a = _small_run(seed=11)
    b = _small_run(seed=11)
    a.run(3)
    b.run(3)
    assert a.chain.tip.content_hash() == b.chain.tip.content_hash()
    assert a.global_params.digest() == b.global_params.digest()
    assert a.events == b.events
    c = _small_run(seed=12)
    c.run(3)
    assert c.chain.tip.content_hash() != a.chain.tip.content_hash()


def test_malicious_with_zero_sigma_equals_honest():
    honest = _small_run(seed=5)
    noop = _small_run(seed=5, malicious=frozenset({0, 1}), sigma=0.0)
    honest.run(2)
    noop.run(2)
    assert honest.chain.tip.content_hash() == noop.chain.tip.content_hash()
    assert honest.global_params.digest() == noop.global_params.digest()


def test_malicious_noise_changes_outcome():
    run = _small_run(seed=5, malicious=frozenset({0}), sigma=3.0)
    honest = _small_run(seed=5)
    run.run(2)
    honest.run(2)
    assert run.chain.tip.content_hash() != honest.chain.tip.content_hash()


def test_faulty_devices_never_reach_tallies():
    run = _small_run(seed=3, faults=FaultSchedule(count=1, phase="training"))
    digests = []
    for _ in range(12):
        before = run.global_params.digest()
        run.run_round()
        digests.append((before, run.global_params.digest()))
    saw_faulty_worker = saw_faulty_validator = saw_abort = False
    blocks = {b.round_index: b for b in run.chain.blocks[1:]}
    for e in [e for e in run.events if e["event"] == "roles"]:
        r = e["round"]
        faulty = set(e["faulty"])
        aborted = any(a["event"] == "aborted" and a["round"] == r for a in run.events)
        if faulty & set(e["miners"]):
            # the single miner failing is the only abort cause at these counts
            saw_abort = True
            assert aborted
            assert r not in blocks
            assert digests[r - 1][0] == digests[r - 1][1]
            continue
        assert not aborted
        block = blocks[r]
        workers_in_block = {u.worker_id for u in block.updates}
        if faulty & set(e["workers"]):
            saw_faulty_worker = True
            assert not (faulty & workers_in_block)
            for v in run.events:
                if v["event"] == "verdict" and v["round"] == r:
                    assert v["worker"] not in faulty
        if faulty & set(e["validators"]):
            saw_faulty_validator = True
            n_honest_validators = len(set(e["validators"]) - faulty)
            for u in block.updates:
                assert u.pos_votes + u.neg_votes == n_honest_validators
            for rw in block.rewards:
                if rw.role == "validator":
                    assert rw.device_id not in faulty
    assert saw_faulty_worker and saw_faulty_validator and saw_abort


def test_all_devices_faulty_aborts_every_round():
    run = _small_run(seed=4, faults=FaultSchedule(count=5, phase="training"))
    start = run.global_params.digest()
    run.run(3)
    assert len(run.chain.blocks) == 1
    assert run.global_params.digest() == start
    aborts = [e for e in run.events if e["event"] == "aborted"]
    assert [e["round"] for e in aborts] == [1, 2, 3]


def test_inference_phase_faults_do_not_hit_training():
    a = _small_run(seed=9, faults=FaultSchedule(count=3, phase="inference"))
    b = _small_run(seed=9)
    a.run(2)
    b.run(2)
    assert a.chain.tip.content_hash() == b.chain.tip.content_hash()


def test_chain_dump_audits_clean():
    run = _small_run(seed=6)
    run.run(3)
    buf = io.StringIO()
    run.dump_chain(buf)
    report = audit_chain_text(buf.getvalue())
    assert report.ok, report.errors
    assert report.blocks == 4


def test_verdict_events_follow_rule():
    run = _small_run(seed=8, kind="bfc")
    run.run(2)
    verdicts = [e for e in run.events if e["event"] == "verdict"]
    assert verdicts
    for v in verdicts:
        expect = 1 if v["metric"] <= v["threshold"] else -1
        assert v["vote"] == expect


# --- median inference ---

def test_infer_dfl_no_faults_is_plain_prediction():
    spec = model.ModelSpec("llr", in_dim=6, extractor_width=4, hidden_width=3)
    params = model.init_params(spec, np.random.default_rng(0))
    X = np.random.default_rng(1).uniform(0, 1, size=(10, 6))
    out = infer_dfl(spec, params, X, 20, 0, np.random.default_rng(2))
    np.testing.assert_array_equal(out, model.predict(spec, params, X))


@pytest.mark.parametrize("n_devices", [4, 5, 20])
def test_infer_dfl_median_immune_to_minority(n_devices):
    spec = model.ModelSpec("bfc", in_dim=6, extractor_width=4)
    params = model.init_params(spec, np.random.default_rng(0))
    X = np.random.default_rng(1).uniform(0, 1, size=(8, 6))
    clean = model.predict(spec, params, X)
    k = (n_devices - 1) // 2
    out = infer_dfl(spec, params, X, n_devices, k, np.random.default_rng(7))
    np.testing.assert_array_equal(out, clean)


def test_infer_dfl_majority_faults_can_move_output():
    spec = model.ModelSpec("llr", in_dim=6, extractor_width=4, hidden_width=3)
    params = model.init_params(spec, np.random.default_rng(0))
    X = np.random.default_rng(1).uniform(0, 1, size=(30, 6))
    clean = model.predict(spec, params, X)
    out = infer_dfl(spec, params, X, 4, 2, np.random.default_rng(3))
    assert not np.array_equal(out, clean)


def test_infer_dfl_too_many_faulty():
    spec = model.ModelSpec("llr", in_dim=6, extractor_width=4, hidden_width=3)
    params = model.init_params(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        infer_dfl(spec, params, np.zeros((2, 6)), 4, 5, np.random.default_rng(0))
