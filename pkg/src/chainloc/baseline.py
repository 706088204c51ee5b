"""Centralized federated learning reference: one server, no filtering.

Every round all clients train locally and the server averages every upload
as-is.  The server itself sits in the per-round fault draw next to its
clients: when it is drawn the whole round halts, and at inference time a
faulty server answers with a uniform random output in the data range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .data import ClientShard, CoordBounds
from .protocol import FaultSchedule


@dataclass(frozen=True)
class CflParams:
    """Baseline-level knobs for one centralized training run."""

    kind: str
    spec: model.ModelSpec
    train: model.TrainConfig
    aggregation: str = "weighted"  # weighted | uniform
    sigma: float = 0.0
    malicious: frozenset = frozenset()
    faults: FaultSchedule = FaultSchedule()

    def __post_init__(self) -> None:
        if self.kind not in ("bfc", "llr"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.aggregation not in ("weighted", "uniform"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


class CflRun:
    """One centralized training run over a fixed client population.

    The fault draw covers clients plus the server, so the population for a
    run with n clients has n + 1 fault slots; the server is slot n.
    """

    def __init__(self, shards: list[ClientShard], bounds: CoordBounds,
                 params: CflParams, seed_seq: np.random.SeedSequence,
                 init: model.ParamVector | None = None) -> None:
        if params.faults.count > len(shards):
            raise ValueError("fault count exceeds the device population")
        self.params = params
        self.bounds = bounds
        self.shards = {s.client_id: s for s in shards}
        self.client_ids = sorted(self.shards)
        self.server_slot = len(shards)
        children = seed_seq.spawn(2 + len(shards))
        self.orch_rng = np.random.default_rng(children[0])
        self.dev_rng = {c: np.random.default_rng(children[2 + i])
                        for i, c in enumerate(self.client_ids)}
        if init is None:
            init = model.init_params(params.spec, np.random.default_rng(children[1]))
        if init.spec.fingerprint != params.spec.fingerprint:
            raise ValueError("initial parameters were built for a different spec")
        self.global_params = init
        self.events: list[dict] = []
        self.round_index = 0
        self._train_xy = {}
        for c in self.client_ids:
            shard = self.shards[c]
            X = model.features(shard.train)
            Y = (model.classification_targets(shard.train) if params.kind == "bfc"
                 else model.regression_targets(shard.train, bounds))
            self._train_xy[c] = (X, Y)

    def run_round(self) -> None:
        p = self.params
        self.round_index += 1
        r = self.round_index
        faulty: frozenset = frozenset()
        if p.faults.in_training:
            pick = self.orch_rng.choice(self.server_slot + 1, size=p.faults.count,
                                        replace=False)
            faulty = frozenset(int(x) for x in pick)
        if self.server_slot in faulty:
            self.events.append({"event": "cfl_round", "round": r, "halted": True,
                                "faulty": sorted(faulty), "uploads": 0})
            return
        uploads: list[model.ParamVector] = []
        weights: list[float] = []
        for c in self.client_ids:
            rng = self.dev_rng[c]
            if c in faulty:
                # a crashed client uploads junk: a fresh draw from the
                # weight-initialization distribution
                up = model.init_params(p.spec, rng)
            else:
                X, Y = self._train_xy[c]
                up = model.train_local(self.global_params, X, Y, p.train, rng)
                if c in p.malicious:
                    up = model.inject_gaussian_noise(up, p.sigma, rng)
            uploads.append(up)
            weights.append(float(len(self.shards[c].train)))
        self.global_params = model.fedavg(
            uploads, weights if p.aggregation == "weighted" else None)
        self.events.append({"event": "cfl_round", "round": r, "halted": False,
                            "faulty": sorted(faulty), "uploads": len(uploads)})

    def run(self, rounds: int) -> None:
        for _ in range(rounds):
            self.run_round()


def infer_cfl(spec: model.ModelSpec, params: model.ParamVector, X: np.ndarray,
              n_clients: int, faulty_count: int,
              rng: np.random.Generator) -> np.ndarray:
    """Server predictions with per-sample fault draws over clients + server.

    For each test sample the fault draw covers the n_clients + 1 population;
    whenever the server lands in it, that sample's answer is a uniform random
    vector in the normalized output range [0, 1] (random probabilities for
    the classifier, random coordinates for the regressor).
    """
    pred = model.predict(spec, params, X)
    if faulty_count <= 0:
        return pred
    population = n_clients + 1
    if faulty_count > population:
        raise ValueError("more faulty devices than the population")
    server = population - 1
    n, k = pred.shape
    out = pred.copy()
    for i in range(n):
        ids = rng.choice(population, size=faulty_count, replace=False)
        if server in ids:
            out[i] = rng.uniform(0.0, 1.0, size=k)
    return out
