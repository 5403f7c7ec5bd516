"""Dataset container, standardization, condition-space splits, CSV import and
the deterministic synthetic field generator used for desk-scale verification."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (ConfigError, ContractError, CorruptionError,
                     DegenerateDataError, FormatError)
from .rng import make_rng

FFD1_MAGIC = b"FFD1"
FFD1_VERSION = 1

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass
class FieldSample:
    c: np.ndarray                 # condition vector [K], physical units
    x: np.ndarray                 # field [C, N]
    coords: np.ndarray | None = None  # [N, D]


@dataclass
class Stats:
    mean: np.ndarray
    std: np.ndarray

    def to_lists(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_lists(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64))


@dataclass
class FieldDataset:
    conditions: np.ndarray                 # [M, K] float32
    fields: np.ndarray                     # [M, C, N] float32
    coords: np.ndarray | None = None       # [N, D] float32
    split: np.ndarray | None = None        # [M] in {TRAIN, VAL, TEST}
    channel_stats: Stats | None = None     # per-channel, from the train split
    condition_stats: Stats | None = None   # per-entry, from the train split
    raw_conditions: np.ndarray | None = None  # physical-unit conditions kept after standardization

    @property
    def num_samples(self) -> int:
        return self.conditions.shape[0]

    @property
    def num_points(self) -> int:
        return self.fields.shape[2]

    @property
    def num_channels(self) -> int:
        return self.fields.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.conditions.shape[1]

    def __getitem__(self, i: int) -> FieldSample:
        return FieldSample(c=self.conditions[i], x=self.fields[i], coords=self.coords)

    def indices(self, split_name: str) -> np.ndarray:
        if self.split is None:
            raise ContractError("dataset has no split assignment")
        if split_name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split '{split_name}'")
        return np.flatnonzero(self.split == SPLIT_NAMES[split_name])


# -- FFD1 container ---------------------------------------------------------------

def save_dataset(ds: FieldDataset, path) -> None:
    m, c, n = ds.fields.shape
    k = ds.conditions.shape[1]
    has_coords = ds.coords is not None
    d = ds.coords.shape[1] if has_coords else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIIBI", FFD1_MAGIC, FFD1_VERSION, m, n, c, k,
                             1 if has_coords else 0, d))
        fh.write(np.ascontiguousarray(ds.conditions, dtype=np.float32).tobytes())
        fh.write(np.ascontiguousarray(ds.fields, dtype=np.float32).tobytes())
        if has_coords:
            fh.write(np.ascontiguousarray(ds.coords, dtype=np.float32).tobytes())


def load_dataset(path) -> FieldDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_size = struct.calcsize("<4sIIIIIBI")
    if len(raw) < header_size:
        raise FormatError(f"file too short for an FFD1 header ({len(raw)} bytes)")
    magic, version, m, n, c, k, has_coords, d = struct.unpack("<4sIIIIIBI", raw[:header_size])
    if magic != FFD1_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FFD1_MAGIC!r}")
    if version != FFD1_VERSION:
        raise FormatError(f"unsupported FFD1 version {version}")
    offset = header_size

    def read_array(count, shape, what):
        nonlocal offset
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise CorruptionError(
                f"truncated payload: {what} needs {nbytes} bytes at offset {offset}, "
                f"file has {len(raw) - offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
        return arr

    conditions = read_array(m * k, (m, k), "conditions")
    fields = read_array(m * c * n, (m, c, n), "fields")
    coords = read_array(n * d, (n, d), "coords") if has_coords else None
    if offset != len(raw):
        raise CorruptionError(f"{len(raw) - offset} trailing bytes after payload at offset {offset}")
    return FieldDataset(conditions=conditions, fields=fields, coords=coords)


# -- CSV import --------------------------------------------------------------------

def import_csv(path) -> FieldDataset:
    """Rows of (condition fields..., point, channel values...). The column
    named 'point' separates conditions (before) from field channels (after).
    Header row required."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file") from None
        if "point" not in header:
            raise FormatError("CSV header must contain a 'point' column")
        p_idx = header.index("point")
        k = p_idx
        n_channels = len(header) - p_idx - 1
        if k < 1 or n_channels < 1:
            raise FormatError("CSV needs at least one condition column and one value column")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise FormatError("CSV contains no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    conds = arr[:, :k]
    points = arr[:, p_idx].astype(int)
    values = arr[:, p_idx + 1:]
    uniq, inverse = np.unique(conds, axis=0, return_inverse=True)
    m = uniq.shape[0]
    n = int(points.max()) + 1
    fields = np.full((m, n_channels, n), np.nan, dtype=np.float32)
    for row_i in range(arr.shape[0]):
        fields[inverse[row_i], :, points[row_i]] = values[row_i]
    if np.isnan(fields).any():
        raise CorruptionError("CSV does not cover every (condition, point) pair")
    return FieldDataset(conditions=uniq.astype(np.float32), fields=fields)


# -- splits and standardization -------------------------------------------------------

def split_conditions(ds: FieldDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> FieldDataset:
    """Deterministic condition-level split; floor allocation for val/test with
    the remainder going to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or f > 1 for f in fractions):
        raise ConfigError(f"fractions must be three values in [0, 1], got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    m = ds.num_samples
    n_val = int(np.floor(fractions[1] * m))
    n_test = int(np.floor(fractions[2] * m))
    n_train = m - n_val - n_test
    perm = make_rng(seed, stream=7).permutation(m)
    split = np.empty(m, dtype=np.int64)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_val]] = VAL
    split[perm[n_train + n_val:]] = TEST
    return replace(ds, split=split)


def standardize(ds: FieldDataset) -> FieldDataset:
    """Per-channel field and per-entry condition standardization using
    train-split statistics. Raw conditions are retained for metric weighting."""
    if ds.split is None:
        raise ContractError("standardize requires a split assignment")
    train_idx = np.flatnonzero(ds.split == TRAIN)
    if train_idx.size == 0:
        raise ContractError("training split is empty")
    xf = ds.fields[train_idx].astype(np.float64)
    ch_mean = xf.mean(axis=(0, 2))
    ch_std = xf.std(axis=(0, 2))
    if np.any(ch_std == 0):
        bad = np.flatnonzero(ch_std == 0).tolist()
        raise DegenerateDataError(f"constant field channel(s) {bad}: zero std")
    cf = ds.conditions[train_idx].astype(np.float64)
    c_mean = cf.mean(axis=0)
    c_std = cf.std(axis=0)
    if np.any(c_std == 0):
        bad = np.flatnonzero(c_std == 0).tolist()
        raise DegenerateDataError(f"constant condition entry(ies) {bad}: zero std")
    fields = ((ds.fields.astype(np.float64) - ch_mean[None, :, None])
              / ch_std[None, :, None]).astype(np.float32)
    conditions = ((ds.conditions.astype(np.float64) - c_mean) / c_std).astype(np.float32)
    return replace(ds, fields=fields, conditions=conditions,
                   channel_stats=Stats(ch_mean, ch_std),
                   condition_stats=Stats(c_mean, c_std),
                   raw_conditions=ds.conditions.copy())


def destandardize_fields(x: np.ndarray, stats: Stats) -> np.ndarray:
    """Exact inverse of the per-channel field standardization. x: [..., C, N]."""
    return (np.asarray(x, dtype=np.float64) * stats.std[..., :, None]
            + stats.mean[..., :, None])


def standardize_conditions(c: np.ndarray, stats: Stats) -> np.ndarray:
    return ((np.asarray(c, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32)


def destandardize_conditions(c: np.ndarray, stats: Stats) -> np.ndarray:
    return np.asarray(c, dtype=np.float64) * stats.std + stats.mean


# -- synthetic generator ----------------------------------------------------------------

@dataclass
class SynthSpec:
    points: int = 64
    grid_c1: int = 20   # steps over c1 in [0, 1]
    grid_c2: int = 10   # steps over c2 in [-1, 1]
    seed: int = 0

    def validate(self):
        if self.points < 2:
            raise ConfigError("need at least 2 points")
        if self.grid_c1 < 4 or self.grid_c2 < 4:
            raise ConfigError("condition grid needs >= 4 steps per axis for meaningful splits")
        return self


def synth_field(s: np.ndarray, c1: float, c2: float) -> np.ndarray:
    """Smooth 1D family with a condition-dependent sharp front: a stand-in for
    shock-like pressure-coefficient curves."""
    return (-(1.5 + c1) * np.sin(np.pi * s) * np.exp(-2.0 * s)
            + 0.8 * c2 * np.tanh(20.0 * (s - 0.3 - 0.2 * c1))
            + 0.1 * np.sin(6.0 * np.pi * s) * c1 * c2)


def synth_generate(spec: SynthSpec) -> FieldDataset:
    """Deterministic synthetic dataset on a regular condition grid; no noise."""
    spec.validate()
    n = spec.points
    s = np.arange(n, dtype=np.float64) / (n - 1)
    c1s = np.linspace(0.0, 1.0, spec.grid_c1)
    c2s = np.linspace(-1.0, 1.0, spec.grid_c2)
    conditions = []
    fields = []
    for c1 in c1s:
        for c2 in c2s:
            conditions.append((c1, c2))
            fields.append(synth_field(s, c1, c2))
    conditions = np.asarray(conditions, dtype=np.float32)
    fields = np.asarray(fields, dtype=np.float32)[:, None, :]  # [M, 1, N]
    coords = s.astype(np.float32)[:, None]
    return FieldDataset(conditions=conditions, fields=fields, coords=coords)
