"""Small neural models with hand-rolled gradients, Adam, and federated averaging.

Two tasks share one parameter-vector representation:

* ``bfc`` -- building/floor classification.  Dense extractor with ReLU, an
  optional single 1-d convolution stage, and a sigmoid output over the 8
  stacked one-hot label bits, trained with binary cross entropy.
* ``llr`` -- longitude/latitude regression.  Two ReLU layers into a linear
  2-d output on [0, 1]-scaled coordinates, trained with mean absolute error.

Parameters live in one flat float64 vector so that signing, hashing,
averaging and noise injection never need to know the layer structure.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    FLOOR_HEIGHT_M,
    LABEL_BITS,
    CoordBounds,
    Dataset,
    decode_building_floor,
    encode_building_floor,
    normalize_rss,
)

CLAMP_EPS = 1e-7

KINDS = ("bfc", "llr")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; fully determines the parameter layout."""

    kind: str
    in_dim: int = 520
    extractor_width: int = 128
    use_conv: bool = False
    conv_channels: int = 4
    conv_kernel: int = 5
    hidden_width: int = 64

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.use_conv and self.kind != "bfc":
            raise ValueError("the conv stage is only defined for the classifier")
        if self.use_conv and self.conv_kernel > self.extractor_width:
            raise ValueError("conv kernel longer than the extractor output")

    @property
    def out_dim(self) -> int:
        return LABEL_BITS if self.kind == "bfc" else 2

    @property
    def conv_out_len(self) -> int:
        return self.extractor_width - self.conv_kernel + 1

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        ew = self.extractor_width
        shapes: list[tuple[str, tuple[int, ...]]] = [("w1", (self.in_dim, ew)), ("b1", (ew,))]
        if self.kind == "bfc":
            if self.use_conv:
                shapes += [("k", (self.conv_channels, self.conv_kernel)),
                           ("kb", (self.conv_channels,)),
                           ("w2", (self.conv_channels * self.conv_out_len, self.out_dim)),
                           ("b2", (self.out_dim,))]
            else:
                shapes += [("w2", (ew, self.out_dim)), ("b2", (self.out_dim,))]
        else:
            shapes += [("w2", (ew, self.hidden_width)), ("b2", (self.hidden_width,)),
                       ("w3", (self.hidden_width, self.out_dim)), ("b3", (self.out_dim,))]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())

    @property
    def fingerprint(self) -> str:
        canon = (self.kind, self.in_dim, self.extractor_width, self.use_conv,
                 self.conv_channels, self.conv_kernel, self.hidden_width)
        return hashlib.sha256(repr(canon).encode()).hexdigest()


@dataclass
class ParamVector:
    """A model's parameters as one flat vector, tied to its architecture."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got {self.values.shape}")

    def digest(self) -> str:
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())


def _unpack(spec: ModelSpec, values: np.ndarray) -> dict[str, np.ndarray]:
    parts: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in spec.layer_shapes():
        size = int(np.prod(shape))
        parts[name] = values[off:off + size].reshape(shape)
        off += size
    return parts


def _pack(spec: ModelSpec, parts: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([parts[name].ravel() for name, _ in spec.layer_shapes()])


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    parts: dict[str, np.ndarray] = {}
    for name, shape in spec.layer_shapes():
        if len(shape) == 1:
            parts[name] = np.zeros(shape)
        else:
            fan_in = shape[1] if name == "k" else shape[0]  # conv: 1 ch x kernel taps
            bound = 1.0 / np.sqrt(fan_in)
            parts[name] = rng.uniform(-bound, bound, size=shape)
    return ParamVector(spec, _pack(spec, parts))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(probs: np.ndarray, targets: np.ndarray, eps: float = CLAMP_EPS) -> float:
    """Mean binary cross entropy over every entry, with probability clamping."""
    p = np.clip(probs, eps, 1.0 - eps)
    t = np.asarray(targets, dtype=np.float64)
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def l1_loss(pred: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - np.asarray(targets, dtype=np.float64))))


def _forward(spec: ModelSpec, parts: dict[str, np.ndarray], X: np.ndarray
             ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns (outputs, cache).  Outputs are probabilities for bfc, raw for llr."""
    cache: dict[str, np.ndarray] = {"x": X}
    a1 = X @ parts["w1"] + parts["b1"]
    h1 = np.maximum(a1, 0.0)
    cache["a1"], cache["h1"] = a1, h1
    if spec.kind == "bfc":
        if spec.use_conv:
            win = np.lib.stride_tricks.sliding_window_view(h1, spec.conv_kernel, axis=1)
            c = np.einsum("nik,ck->nci", win, parts["k"]) + parts["kb"][None, :, None]
            hc = np.maximum(c, 0.0)
            flat = hc.reshape(X.shape[0], -1)
            cache["win"], cache["c"], cache["hc"] = win, c, hc
        else:
            flat = h1
        z = flat @ parts["w2"] + parts["b2"]
        cache["flat"], cache["z"] = flat, z
        return _sigmoid(z), cache
    a2 = h1 @ parts["w2"] + parts["b2"]
    h2 = np.maximum(a2, 0.0)
    y = h2 @ parts["w3"] + parts["b3"]
    cache["a2"], cache["h2"] = a2, h2
    return y, cache


def predict(spec: ModelSpec, params: ParamVector, X: np.ndarray) -> np.ndarray:
    """Model outputs: (n, 8) bit probabilities for bfc, (n, 2) unit coords for llr."""
    if params.spec.fingerprint != spec.fingerprint:
        raise ValueError("parameter vector does not match the model spec")
    out, _ = _forward(spec, _unpack(spec, params.values), np.asarray(X, dtype=np.float64))
    return out


def loss_and_grad(spec: ModelSpec, values: np.ndarray, X: np.ndarray, Y: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient w.r.t. the flat parameter vector.

    The classifier loss is mean BCE with clamping at CLAMP_EPS; entries pinned
    by the clamp contribute zero gradient, matching the clamped loss exactly.
    """
    parts = _unpack(spec, values)
    out, cache = _forward(spec, parts, X)
    n_terms = out.size
    grads: dict[str, np.ndarray] = {}

    if spec.kind == "bfc":
        p = np.clip(out, CLAMP_EPS, 1.0 - CLAMP_EPS)
        t = Y
        loss = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
        clamped = (out < CLAMP_EPS) | (out > 1.0 - CLAMP_EPS)
        dz = np.where(clamped, 0.0, (out - t) / n_terms)
        flat = cache["flat"]
        grads["w2"] = flat.T @ dz
        grads["b2"] = dz.sum(axis=0)
        dflat = dz @ parts["w2"].T
        if spec.use_conv:
            dhc = dflat.reshape(cache["hc"].shape)
            dc = dhc * (cache["c"] > 0.0)
            grads["k"] = np.einsum("nci,nik->ck", dc, cache["win"])
            grads["kb"] = dc.sum(axis=(0, 2))
            dh1 = np.zeros_like(cache["h1"])
            L = spec.conv_out_len
            for j in range(spec.conv_kernel):
                dh1[:, j:j + L] += np.tensordot(dc, parts["k"][:, j], axes=([1], [0]))
        else:
            dh1 = dflat
    else:
        resid = out - Y
        loss = float(np.mean(np.abs(resid)))
        dy = np.sign(resid) / n_terms
        grads["w3"] = cache["h2"].T @ dy
        grads["b3"] = dy.sum(axis=0)
        dh2 = dy @ parts["w3"].T
        da2 = dh2 * (cache["a2"] > 0.0)
        grads["w2"] = cache["h1"].T @ da2
        grads["b2"] = da2.sum(axis=0)
        dh1 = da2 @ parts["w2"].T

    da1 = dh1 * (cache["a1"] > 0.0)
    grads["w1"] = cache["x"].T @ da1
    grads["b1"] = da1.sum(axis=0)
    return loss, _pack(spec, grads)


class Adam:
    """Adam with bias correction; state is created fresh for each local fit."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    batch_size: int = 100
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


def train_local(params: ParamVector, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
                rng: np.random.Generator) -> ParamVector:
    """Mini-batch Adam from the given starting point; inputs are left untouched."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty set")
    spec = params.spec
    values = params.values.copy()
    opt = Adam(spec.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            _, grad = loss_and_grad(spec, values, X[idx], Y[idx])
            values = opt.step(values, grad)
    return ParamVector(spec, values)


def fedavg(updates: Sequence[ParamVector], weights: Sequence[float] | None = None
           ) -> ParamVector:
    """Weighted average of parameter vectors (uniform when weights is None)."""
    if not updates:
        raise ValueError("nothing to aggregate")
    fp = updates[0].spec.fingerprint
    if any(u.spec.fingerprint != fp for u in updates):
        raise ValueError("cannot aggregate across different architectures")
    if any(not np.all(np.isfinite(u.values)) for u in updates):
        raise ValueError("non-finite parameter vector offered for aggregation")
    if weights is None:
        w = np.full(len(updates), 1.0 / len(updates))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(updates),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        w = w / w.sum()
    stacked = np.stack([u.values for u in updates])
    return ParamVector(updates[0].spec, w @ stacked)


def inject_gaussian_noise(params: ParamVector, sigma: float, rng: np.random.Generator
                          ) -> ParamVector:
    """Model poisoning: add i.i.d. Normal(0, sigma^2) to every parameter."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return params.copy()
    return ParamVector(params.spec,
                       params.values + rng.normal(0.0, sigma, size=params.values.shape))


# --- task plumbing: datasets -> feature/target arrays and headline metrics ---

def features(ds: Dataset) -> np.ndarray:
    return normalize_rss(ds.rss)


def classification_targets(ds: Dataset) -> np.ndarray:
    return encode_building_floor(ds.building, ds.floor)


def regression_targets(ds: Dataset, bounds: CoordBounds) -> np.ndarray:
    return bounds.normalize(ds.coords)


def accuracy(spec: ModelSpec, params: ParamVector, ds: Dataset) -> float:
    """Fraction of samples with both building and floor decoded correctly."""
    probs = predict(spec, params, features(ds))
    b, f = decode_building_floor(probs)
    return float(np.mean((b == ds.building) & (f == ds.floor)))


def position_errors(spec: ModelSpec, params: ParamVector, ds: Dataset,
                    bounds: CoordBounds) -> np.ndarray:
    """Per-sample planar error in meters."""
    pred = bounds.denormalize(predict(spec, params, features(ds)))
    return np.linalg.norm(pred - ds.coords, axis=1)


def position_error(spec: ModelSpec, params: ParamVector, ds: Dataset,
                   bounds: CoordBounds) -> float:
    return float(np.mean(position_errors(spec, params, ds, bounds)))


def error_3d(pred_floor: np.ndarray, true_floor: np.ndarray,
             planar_errors: np.ndarray) -> np.ndarray:
    """Per-sample 3-d error: planar distance plus a 6 m-per-floor height term.

    Building mismatches enter only through the planar coordinates.
    """
    dh = FLOOR_HEIGHT_M * (np.asarray(pred_floor, dtype=np.float64)
                           - np.asarray(true_floor, dtype=np.float64))
    return np.sqrt(np.asarray(planar_errors, dtype=np.float64) ** 2 + dh ** 2)
