"""Fingerprint datasets: loading, synthesis, partitioning and label codecs.

A fingerprint sample is a vector of received signal strengths (RSS, in dBm)
from a fixed set of access points, plus ground truth: longitude/latitude in
meters, floor index and building index.  Access points that were not heard
carry a sentinel value instead of a dBm reading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

RSS_DIM = 520
NOT_DETECTED = 100.0
RSS_FLOOR_DBM = -104.0

# label head: 3 one-hot building positions followed by 5 one-hot floor positions
BUILDING_BITS = 3
FLOOR_BITS = 5
LABEL_BITS = BUILDING_BITS + FLOOR_BITS

FLOOR_HEIGHT_M = 6.0


@dataclass(frozen=True)
class CoordBounds:
    """Axis-aligned bounding box of planar coordinates, used for target scaling."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    @property
    def lon_span(self) -> float:
        return self.lon_max - self.lon_min

    @property
    def lat_span(self) -> float:
        return self.lat_max - self.lat_min

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.lon_span, self.lat_span))

    def normalize(self, coords: np.ndarray) -> np.ndarray:
        """Map (n, 2) lon/lat in meters to [0, 1]^2 (degenerate spans map to 0)."""
        spans = np.array([max(self.lon_span, 1e-12), max(self.lat_span, 1e-12)])
        lo = np.array([self.lon_min, self.lat_min])
        return (np.asarray(coords, dtype=np.float64) - lo) / spans

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        spans = np.array([max(self.lon_span, 1e-12), max(self.lat_span, 1e-12)])
        lo = np.array([self.lon_min, self.lat_min])
        return np.asarray(unit, dtype=np.float64) * spans + lo


@dataclass(frozen=True)
class FingerprintSample:
    """One labeled fingerprint with its RSS already normalized to [0, 1]."""

    rss: np.ndarray
    longitude: float
    latitude: float
    floor: int
    building: int


class Dataset:
    """Column-array fingerprint dataset.

    Attributes
    ----------
    rss : (n, RSS_DIM) float64, raw dBm with NOT_DETECTED sentinel
    coords : (n, 2) float64, longitude/latitude in meters
    floor : (n,) int64
    building : (n,) int64
    """

    def __init__(self, rss: np.ndarray, coords: np.ndarray, floor: np.ndarray,
                 building: np.ndarray) -> None:
        rss = np.asarray(rss, dtype=np.float64)
        coords = np.asarray(coords, dtype=np.float64)
        floor = np.asarray(floor, dtype=np.int64)
        building = np.asarray(building, dtype=np.int64)
        n = rss.shape[0]
        if rss.ndim != 2 or rss.shape[1] != RSS_DIM:
            raise ValueError(f"rss must be (n, {RSS_DIM}), got {rss.shape}")
        if coords.shape != (n, 2):
            raise ValueError(f"coords must be ({n}, 2), got {coords.shape}")
        if floor.shape != (n,) or building.shape != (n,):
            raise ValueError("floor/building must be 1-d arrays matching rss rows")
        if n and (floor.min() < 0 or floor.max() >= FLOOR_BITS):
            raise ValueError(f"floor indices must lie in [0, {FLOOR_BITS})")
        if n and (building.min() < 0 or building.max() >= BUILDING_BITS):
            raise ValueError(f"building indices must lie in [0, {BUILDING_BITS})")
        self.rss = rss
        self.coords = coords
        self.floor = floor
        self.building = building

    def __len__(self) -> int:
        return self.rss.shape[0]

    def sample(self, i: int) -> FingerprintSample:
        return FingerprintSample(normalize_rss(self.rss[i:i + 1])[0],
                                 float(self.coords[i, 0]), float(self.coords[i, 1]),
                                 int(self.floor[i]), int(self.building[i]))

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.rss[idx], self.coords[idx], self.floor[idx], self.building[idx])

    def coord_bounds(self) -> CoordBounds:
        if len(self) == 0:
            raise ValueError("cannot take bounds of an empty dataset")
        return CoordBounds(
            lon_min=float(self.coords[:, 0].min()),
            lon_max=float(self.coords[:, 0].max()),
            lat_min=float(self.coords[:, 1].min()),
            lat_max=float(self.coords[:, 1].max()),
        )


def normalize_rss(rss: np.ndarray) -> np.ndarray:
    """Map raw RSS to [0, 1] features: sentinel -> 0, else linear from the dBm floor.

    Values at or below RSS_FLOOR_DBM clamp to 0 and values above 0 dBm clamp to 1,
    so corrupted inputs cannot push features outside the unit interval.
    """
    rss = np.asarray(rss, dtype=np.float64)
    out = (rss - RSS_FLOOR_DBM) / (-RSS_FLOOR_DBM)
    out = np.clip(out, 0.0, 1.0)
    out[rss == NOT_DETECTED] = 0.0
    return out


def encode_building_floor(building: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Two stacked one-hot groups: 3 building bits then 5 floor bits, shape (n, 8)."""
    building = np.asarray(building, dtype=np.int64)
    floor = np.asarray(floor, dtype=np.int64)
    n = building.shape[0]
    out = np.zeros((n, LABEL_BITS), dtype=np.float64)
    out[np.arange(n), building] = 1.0
    out[np.arange(n), BUILDING_BITS + floor] = 1.0
    return out


def decode_building_floor(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax within each one-hot group of an (n, 8) probability array."""
    probs = np.asarray(probs, dtype=np.float64)
    building = probs[:, :BUILDING_BITS].argmax(axis=1)
    floor = probs[:, BUILDING_BITS:].argmax(axis=1)
    return building.astype(np.int64), floor.astype(np.int64)


def load_fingerprint_csv(path: str) -> Dataset:
    """Load a fingerprint CSV with WAP001..WAP520, LONGITUDE, LATITUDE, FLOOR, BUILDINGID.

    Extra columns (timestamps, user/phone ids, space ids) are ignored.
    """
    df = pd.read_csv(path)
    wap_cols = [f"WAP{i:03d}" for i in range(1, RSS_DIM + 1)]
    missing = [c for c in wap_cols + ["LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID"]
               if c not in df.columns]
    if missing:
        raise ValueError(f"missing columns: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if len(df) == 0:
        raise ValueError("no samples in file")
    try:
        rss = df[wap_cols].to_numpy(dtype=np.float64)
        coords = df[["LONGITUDE", "LATITUDE"]].to_numpy(dtype=np.float64)
        floor = df["FLOOR"].to_numpy(dtype=np.int64)
        building = df["BUILDINGID"].to_numpy(dtype=np.int64)
    except (TypeError, ValueError) as e:
        raise ValueError(f"non-numeric cell in {path}: {e}") from None
    return Dataset(rss, coords, floor, building)


def split_train_test(ds: Dataset, test_fraction: float, rng: np.random.Generator
                     ) -> tuple[Dataset, Dataset]:
    """Random carve-out of round(test_fraction * n) samples for evaluation."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be strictly inside (0, 1)")
    n = len(ds)
    n_test = int(round(test_fraction * n))
    if n_test == 0 or n_test == n:
        raise ValueError("split would leave an empty side")
    perm = rng.permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


@dataclass(frozen=True)
class ClientShard:
    """One device's local data: a training part and a private local test part."""

    client_id: int
    train: Dataset
    test: Dataset


def partition_clients(ds: Dataset, n_clients: int, local_test_fraction: float,
                      rng: np.random.Generator) -> list[ClientShard]:
    """Shuffle-and-deal IID partition (first n % k shards get one extra sample),
    then carve each client's private test set off its own shard."""
    n = len(ds)
    if n_clients <= 0:
        raise ValueError("n_clients must be positive")
    if n < n_clients:
        raise ValueError(f"cannot deal {n} samples to {n_clients} clients")
    perm = rng.permutation(n)
    base, extra = divmod(n, n_clients)
    shards: list[ClientShard] = []
    start = 0
    for k in range(n_clients):
        size = base + (1 if k < extra else 0)
        piece = ds.subset(np.sort(perm[start:start + size]))
        train, test = split_train_test(piece, local_test_fraction, rng)
        shards.append(ClientShard(k, train, test))
        start += size
    return shards


def generate_synthetic(n_samples: int, n_buildings: int = 3, n_floors: int = 4,
                       n_aps: int = 180, noise_scale: float = 2.0,
                       seed: int = 0) -> Dataset:
    """Synthetic campus: path-loss fingerprints over a grid of known AP positions.

    Buildings are 50 x 30 m footprints spaced 70 m apart along the x axis, floors
    are FLOOR_HEIGHT_M apart.  Access points are dealt round-robin over the
    (building, floor) cells and placed uniformly inside their cell.  The RSS for
    an AP at 3-d distance d is -30 - 30*log10(max(d, 1)) dBm, minus 14 dB per
    concrete slab and 30 dB per building boundary on the path, plus clipped
    Gaussian noise; readings below the dBm floor become the not-detected sentinel.
    """
    if not 1 <= n_buildings <= BUILDING_BITS:
        raise ValueError("n_buildings out of range")
    if not 1 <= n_floors <= FLOOR_BITS:
        raise ValueError("n_floors out of range")
    if n_aps > RSS_DIM:
        raise ValueError(f"at most {RSS_DIM} access points")
    rng = np.random.default_rng(seed)
    width, depth, spacing = 50.0, 30.0, 70.0
    slab_db, wall_db = 14.0, 30.0

    cells = [(b, f) for b in range(n_buildings) for f in range(n_floors)]
    ap_pos = np.zeros((n_aps, 3))
    ap_cell = np.zeros((n_aps, 2), dtype=np.int64)
    for a in range(n_aps):
        b, f = cells[a % len(cells)]
        ap_cell[a] = (b, f)
        ap_pos[a] = (b * spacing + rng.uniform(0, width),
                     rng.uniform(0, depth),
                     f * FLOOR_HEIGHT_M + 2.0)

    building = rng.integers(0, n_buildings, size=n_samples)
    floor = rng.integers(0, n_floors, size=n_samples)
    x = building * spacing + rng.uniform(0, width, size=n_samples)
    y = rng.uniform(0, depth, size=n_samples)
    z = floor * FLOOR_HEIGHT_M + 1.2

    pts = np.stack([x, y, z], axis=1)
    d = np.linalg.norm(pts[:, None, :] - ap_pos[None, :, :], axis=2)
    rss = -30.0 - 30.0 * np.log10(np.maximum(d, 1.0))
    rss -= slab_db * np.abs(floor[:, None] - ap_cell[None, :, 1])
    rss -= wall_db * np.abs(building[:, None] - ap_cell[None, :, 0])
    if noise_scale > 0:
        noise = rng.normal(0.0, noise_scale, size=rss.shape)
        rss += np.clip(noise, -3.0 * noise_scale, 3.0 * noise_scale)
    rss[rss < RSS_FLOOR_DBM] = NOT_DETECTED

    full = np.full((n_samples, RSS_DIM), NOT_DETECTED)
    full[:, :n_aps] = rss
    return Dataset(full, np.stack([x, y], axis=1), floor, building)
