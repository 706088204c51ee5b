"""Experiment harness: data preparation, run orchestration, file outputs.

One experiment = one (system, kind) training run evaluated on a held-out
global test set after every round.  `run_experiment` is pure compute (no
IO) so tests can inspect results directly; `write_outputs` serializes a
result into metrics.csv, summary.csv, chain.txt and manifest.txt with a
fixed column schema and fixed float formatting, so equal-seed runs produce
byte-identical metric files.

Seed layout: SeedSequence(master).spawn(3) yields the data, protocol and
inference roots.  The protocol root spawns one child per task kind (bfc
first, so a combined 3d run trains both heads from independent streams)
plus one child that draws which devices are malicious.  Explicit
seeds.data / seeds.protocol values replace the corresponding root.
"""

from __future__ import annotations

import copy
import io
import os
import time
from dataclasses import dataclass

import numpy as np
import yaml

from . import baseline, data, model, protocol
from .config import ExperimentConfig, to_mapping

METRIC_COLUMNS = ("round_index", "system", "kind", "malicious_count",
                  "faulty_count", "accuracy", "error_distance_m", "error_3d_m")

INFER_COLUMNS = ("system", "kind", "faulty_count", "phase", "accuracy",
                 "error_distance_m")


@dataclass(frozen=True)
class PreparedData:
    shards: tuple[data.ClientShard, ...]
    global_test: data.Dataset
    bounds: data.CoordBounds


def prepare_data(cfg: ExperimentConfig,
                 data_seed: np.random.SeedSequence) -> PreparedData:
    """Load or generate the corpus, carve the global test set, deal shards.

    Coordinate bounds come from the full corpus before any split so every
    party (and the evaluator) shares one normalization frame.
    """
    gen_child, split_child = data_seed.spawn(2)
    if cfg.dataset.source == "csv":
        ds = data.load_fingerprint_csv(cfg.dataset.path)
    else:
        s = cfg.dataset.synthetic
        ds = data.generate_synthetic(
            s.n_samples, n_buildings=s.n_buildings, n_floors=s.n_floors,
            n_aps=s.n_aps, noise_scale=s.noise_scale,
            seed=int(gen_child.generate_state(1)[0]))
    bounds = ds.coord_bounds()
    rng = np.random.default_rng(split_child)
    train, global_test = data.split_train_test(ds, cfg.dataset.test_fraction, rng)
    shards = data.partition_clients(train, cfg.device_count,
                                    cfg.dataset.local_test_fraction, rng)
    return PreparedData(tuple(shards), global_test, bounds)


def model_spec(cfg: ExperimentConfig, kind: str) -> model.ModelSpec:
    if kind == "bfc":
        b = cfg.bfc
        return model.ModelSpec(kind="bfc", extractor_width=b.extractor_width,
                               use_conv=b.use_conv, conv_channels=b.conv_channels,
                               conv_kernel=b.conv_kernel)
    r = cfg.llr
    return model.ModelSpec(kind="llr", extractor_width=r.extractor_width,
                           hidden_width=r.hidden_width)


def train_config(cfg: ExperimentConfig, kind: str) -> model.TrainConfig:
    section = cfg.bfc if kind == "bfc" else cfg.llr
    return model.TrainConfig(lr=section.learning_rate,
                             batch_size=section.batch_size,
                             epochs=section.local_epochs)


def draw_malicious(cfg: ExperimentConfig,
                   seed: np.random.SeedSequence) -> frozenset:
    """Pick the attacker set once per experiment so both systems can face
    the same adversaries under the same protocol seed."""
    if cfg.attack.malicious_count == 0:
        return frozenset()
    rng = np.random.default_rng(seed)
    ids = rng.choice(cfg.device_count, size=cfg.attack.malicious_count,
                     replace=False)
    return frozenset(int(i) for i in ids)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    summary: dict
    runs: dict
    prepared: PreparedData
    malicious: frozenset
    per_sample: dict | None  # 3d only: err2d, err3d, pred/true floor arrays
    wall_time_s: float


def _blank_row(cfg: ExperimentConfig, round_index: int) -> dict:
    return {"round_index": round_index, "system": cfg.system, "kind": cfg.kind,
            "malicious_count": cfg.attack.malicious_count,
            "faulty_count": cfg.faults.count,
            "accuracy": "", "error_distance_m": "", "error_3d_m": ""}


def _per_sample_3d(runs: dict, prepared: PreparedData) -> dict:
    test = prepared.global_test
    llr_run, bfc_run = runs["llr"], runs["bfc"]
    err2d = model.position_errors(llr_run.params.spec, llr_run.global_params,
                                  test, prepared.bounds)
    probs = model.predict(bfc_run.params.spec, bfc_run.global_params,
                          model.features(test))
    _, pred_floor = data.decode_building_floor(probs)
    err3d = model.error_3d(pred_floor, test.floor, err2d)
    return {"err2d": err2d, "err3d": err3d,
            "pred_floor": pred_floor, "true_floor": test.floor.copy()}


def _metric_row(cfg: ExperimentConfig, runs: dict, prepared: PreparedData,
                round_index: int) -> dict:
    row = _blank_row(cfg, round_index)
    test = prepared.global_test
    if cfg.kind == "bfc":
        run = runs["bfc"]
        row["accuracy"] = model.accuracy(run.params.spec, run.global_params, test)
    elif cfg.kind == "llr":
        run = runs["llr"]
        row["error_distance_m"] = model.position_error(
            run.params.spec, run.global_params, test, prepared.bounds)
    else:
        ps = _per_sample_3d(runs, prepared)
        row["error_distance_m"] = float(np.mean(ps["err2d"]))
        row["error_3d_m"] = float(np.mean(ps["err3d"]))
    return row


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train one configured system to completion, scoring every round.

    A 3d experiment trains the classifier and the regressor side by side,
    one round of each per step (the one with fewer configured rounds
    freezes once finished), and reports planar plus height-aware error.
    """
    t0 = time.perf_counter()
    cfg.validate()
    root = np.random.SeedSequence(cfg.seeds.master)
    data_seed, proto_seed, _infer_seed = root.spawn(3)
    if cfg.seeds.data is not None:
        data_seed = np.random.SeedSequence(cfg.seeds.data)
    if cfg.seeds.protocol is not None:
        proto_seed = np.random.SeedSequence(cfg.seeds.protocol)
    prepared = prepare_data(cfg, data_seed)

    kinds = ("bfc", "llr") if cfg.kind == "3d" else (cfg.kind,)
    bfc_seed, llr_seed, attack_seed = proto_seed.spawn(3)
    kind_seed = {"bfc": bfc_seed, "llr": llr_seed}
    malicious = draw_malicious(cfg, attack_seed)
    faults = protocol.FaultSchedule(cfg.faults.count, cfg.faults.phase)

    runs: dict = {}
    for kind in kinds:
        spec = model_spec(cfg, kind)
        train = train_config(cfg, kind)
        shards = list(prepared.shards)
        if cfg.system == "dfl":
            threshold = cfg.bfc.threshold if kind == "bfc" else cfg.llr.threshold
            params = protocol.DflParams(
                kind=kind, spec=spec, train=train, threshold=threshold,
                role_counts=cfg.role_counts, unit_reward=cfg.unit_reward,
                aggregation=cfg.aggregation, sigma=cfg.attack.sigma,
                malicious=malicious, faults=faults, key_seed=cfg.seeds.master)
            runs[kind] = protocol.DflRun(shards, prepared.bounds, params,
                                         kind_seed[kind])
        else:
            params = baseline.CflParams(
                kind=kind, spec=spec, train=train, aggregation=cfg.aggregation,
                sigma=cfg.attack.sigma, malicious=malicious, faults=faults)
            runs[kind] = baseline.CflRun(shards, prepared.bounds, params,
                                         kind_seed[kind])

    round_budget = {"bfc": cfg.bfc.rounds, "llr": cfg.llr.rounds}
    total = max(round_budget[k] for k in kinds)
    rows: list[dict] = []
    for r in range(1, total + 1):
        for kind in kinds:
            if r <= round_budget[kind]:
                runs[kind].run_round()
        rows.append(_metric_row(cfg, runs, prepared, r))
    summary = dict(rows[-1]) if rows else _metric_row(cfg, runs, prepared, 0)
    per_sample = _per_sample_3d(runs, prepared) if cfg.kind == "3d" else None
    return ExperimentResult(cfg, rows, summary, runs, prepared, malicious,
                            per_sample, time.perf_counter() - t0)


def _fmt(value) -> str:
    if value == "" or value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path: str, columns: tuple, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c, "")) for c in columns) + "\n")


def chain_text(result: ExperimentResult) -> str | None:
    """Auditable dump of every chain the experiment produced (ledgered
    systems only).  A 3d run emits one section per task kind."""
    if result.config.system != "dfl":
        return None
    buf = io.StringIO()
    for kind in ("bfc", "llr"):
        if kind in result.runs:
            result.runs[kind].dump_chain(buf)
    return buf.getvalue()


def _manifest_text(result: ExperimentResult, extra: dict | None = None) -> str:
    lines = ["experiment manifest"]
    info = {"wall_time_s": f"{result.wall_time_s:.3f}",
            "malicious_devices": sorted(result.malicious),
            "rows": len(result.rows)}
    if result.config.system == "dfl":
        for kind, run in sorted(result.runs.items()):
            info[f"chain_blocks_{kind}"] = len(run.chain.blocks)
            info[f"chain_head_{kind}"] = run.chain.tip.content_hash()
    for kind, run in sorted(result.runs.items()):
        info[f"model_digest_{kind}"] = run.global_params.digest()
    if extra:
        info.update(extra)
    for key in sorted(info):
        lines.append(f"{key}: {info[key]}")
    lines.append("config:")
    cfg_yaml = yaml.safe_dump(to_mapping(result.config), sort_keys=True)
    lines.extend("  " + ln for ln in cfg_yaml.rstrip("\n").split("\n"))
    return "\n".join(lines) + "\n"


def write_outputs(result: ExperimentResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "metrics.csv"), METRIC_COLUMNS, result.rows)
    write_csv(os.path.join(out_dir, "summary.csv"), METRIC_COLUMNS,
              [result.summary])
    text = chain_text(result)
    if text is not None:
        with open(os.path.join(out_dir, "chain.txt"), "w",
                  encoding="utf-8", newline="") as fh:
            fh.write(text)
    with open(os.path.join(out_dir, "manifest.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(_manifest_text(result))


SWEEP_COLUMNS = METRIC_COLUMNS + ("row_type",)
SWEEP_AXES = ("malicious", "faults")


def sweep_variant(base: ExperimentConfig, system: str, axis: str,
                  value: int) -> ExperimentConfig:
    cfg = copy.deepcopy(base)
    cfg.system = system
    if axis == "malicious":
        cfg.attack.malicious_count = value
    elif axis == "faults":
        cfg.faults.count = value
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; "
                         f"expected one of {SWEEP_AXES}")
    return cfg.validate()


def run_sweep(base: ExperimentConfig, axis: str, values: list[int],
              out_dir: str) -> list[dict]:
    """Run both systems across an attack or fault intensity axis.

    Each point gets its own subdirectory of full outputs; sweep.csv merges
    every per-round row plus each run's summary row, tagged by row_type.
    """
    os.makedirs(out_dir, exist_ok=True)
    merged: list[dict] = []
    for system in ("dfl", "cfl"):
        for value in values:
            cfg = sweep_variant(base, system, axis, value)
            result = run_experiment(cfg)
            write_outputs(result, os.path.join(out_dir, f"{system}_{axis}{value}"))
            for row in result.rows:
                merged.append(dict(row, row_type="round"))
            merged.append(dict(result.summary, row_type="summary"))
    write_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, merged)
    return merged


def _metric_from_outputs(kind: str, outputs: np.ndarray, test: data.Dataset,
                         bounds: data.CoordBounds) -> float:
    if kind == "bfc":
        b, f = data.decode_building_floor(outputs)
        return float(np.mean((b == test.building) & (f == test.floor)))
    coords = bounds.denormalize(outputs)
    delta = coords - test.coords
    return float(np.mean(np.hypot(delta[:, 0], delta[:, 1])))


def inference_metric(run, system: str, kind: str, test: data.Dataset,
                     bounds: data.CoordBounds, faulty_count: int, trials: int,
                     seed_seq: np.random.SeedSequence) -> float:
    """Score a trained model under device failures at query time, averaged
    over independent trials.

    The decentralized path replicates each query to every device and takes
    the coordinatewise median of the replies; the centralized path dies with
    its server, so a failed-server draw turns that reply into noise.
    """
    spec = run.params.spec
    X = model.features(test)
    children = seed_seq.spawn(trials)
    vals = []
    for child in children:
        rng = np.random.default_rng(child)
        if system == "dfl":
            out = protocol.infer_dfl(spec, run.global_params, X,
                                     n_devices=len(run.device_ids),
                                     faulty_count=faulty_count, rng=rng)
        else:
            out = baseline.infer_cfl(spec, run.global_params, X,
                                     n_clients=len(run.client_ids),
                                     faulty_count=faulty_count, rng=rng)
        vals.append(_metric_from_outputs(kind, out, test, bounds))
    return float(np.mean(vals))


def evaluate_inference_phase(base: ExperimentConfig,
                             counts: list[int]) -> list[dict]:
    """Train under each fault count (phase=both) and report the task metric
    with and without query-time failures layered on top."""
    if base.kind == "3d":
        raise ValueError("inference evaluation expects kind bfc or llr")
    rows: list[dict] = []
    for count in counts:
        cfg = copy.deepcopy(base)
        cfg.faults.count = count
        cfg.faults.phase = "both"
        cfg.validate()
        result = run_experiment(cfg)
        run = result.runs[cfg.kind]
        test = result.prepared.global_test
        train_metric = (result.summary["accuracy"] if cfg.kind == "bfc"
                        else result.summary["error_distance_m"])
        root = np.random.SeedSequence(cfg.seeds.master)
        _, _, infer_seed = root.spawn(3)
        full_metric = inference_metric(run, cfg.system, cfg.kind, test,
                                       result.prepared.bounds, count,
                                       cfg.inference_trials, infer_seed)
        for phase, val in (("training", train_metric),
                           ("training+inference", full_metric)):
            rows.append({"system": cfg.system, "kind": cfg.kind,
                         "faulty_count": count, "phase": phase,
                         "accuracy": val if cfg.kind == "bfc" else "",
                         "error_distance_m": "" if cfg.kind == "bfc" else val})
    return rows


def write_inference_csv(rows: list[dict], out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "infer_eval.csv"), INFER_COLUMNS, rows)
