"""Traffic state matrices, the cell transmission simulator and corpus I/O.

A corridor of ``m`` cells is bracketed by ``m + 1`` detectors. Over ``n``
time steps the flow matrix ``F`` is ``n x (m+1)`` (veh/h, one column per
detector) and the density matrix ``K`` is ``n x m`` (veh/km, one column per
cell). The network feature layout is row ``t = [F[t, :], K[t, :]]``.

Flows at row ``t`` are the average boundary flows over ``[t, t+1)`` and
densities are sampled at the start of the step, so

    K[t+1, s] = K[t, s] + dt / dx_s * (F[t, s] - F[t, s+1])

holds for every simulated record.
"""
import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError

log = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-12
PLACEHOLDER = 0.5


class ConfigError(ValueError):
    pass


class MatrixFormatError(ValueError):
    pass


@dataclass
class Geometry:
    dt: float
    cell_lengths: np.ndarray

    def __post_init__(self):
        self.cell_lengths = np.asarray(self.cell_lengths, dtype=DTYPE).ravel()
        if not self.dt > 0:
            raise ValueError("time step dt must be positive")
        if self.cell_lengths.size == 0 or np.any(self.cell_lengths <= 0):
            raise ValueError("cell lengths must be positive")

    @property
    def m(self):
        return self.cell_lengths.size


@dataclass
class TrafficStateMatrix:
    flow: np.ndarray
    density: np.ndarray
    dt: float
    cell_lengths: np.ndarray

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=DTYPE)
        self.density = np.asarray(self.density, dtype=DTYPE)
        self.cell_lengths = np.asarray(self.cell_lengths, dtype=DTYPE).ravel()
        n, m = self.density.shape
        if self.flow.shape != (n, m + 1):
            raise ShapeError(f"flow must be {n}x{m + 1} for a {n}x{m} density matrix, got {self.flow.shape}")
        if self.cell_lengths.size != m:
            raise ShapeError(f"expected {m} cell lengths, got {self.cell_lengths.size}")
        if n < 2 or m < 1:
            raise ShapeError("need n >= 2 time steps and m >= 1 cells")

    @property
    def n(self):
        return self.density.shape[0]

    @property
    def m(self):
        return self.density.shape[1]

    @property
    def geometry(self):
        return Geometry(self.dt, self.cell_lengths)

    def physical_features(self):
        return np.hstack([self.flow, self.density])


# --------------------------------------------------------------------------- conservation

def conservation_residual(flow, density, dt, cell_lengths):
    """K[t+1] - K[t] - dt/dx * (F[t, s] - F[t, s+1]) for t = 0..n-2; shape (n-1, m)."""
    ratio = dt / np.asarray(cell_lengths, dtype=DTYPE)
    return density[1:] - density[:-1] - ratio * (flow[:-1, :-1] - flow[:-1, 1:])


def conservation_relative_residual(ts):
    r = conservation_residual(ts.flow, ts.density, ts.dt, ts.cell_lengths)
    ratio = ts.dt / ts.cell_lengths
    scale = np.maximum.reduce([
        np.abs(ts.density[1:]), np.abs(ts.density[:-1]),
        ratio * (np.abs(ts.flow[:-1, :-1]) + np.abs(ts.flow[:-1, 1:])),
        np.ones_like(r),
    ])
    return np.abs(r) / scale


# --------------------------------------------------------------------------- simulator

@dataclass
class CtmConfig:
    m: int = 5
    n: int = 12
    dt: float = 1.0 / 12.0
    cell_lengths: list = None
    free_flow_speed: float = 100.0
    backward_wave_speed: float = 20.0
    jam_density: float = 150.0
    capacity: float = 2000.0
    demand_profile: list = None
    downstream_supply_profile: list = None
    initial_density: list = None
    seed: int = 0
    noise_std: float = 0.0
    substeps: int = 20

    def __post_init__(self):
        if self.cell_lengths is None:
            self.cell_lengths = [0.5] * self.m
        if self.demand_profile is None:
            self.demand_profile = [0.5 * self.capacity] * self.n
        if self.downstream_supply_profile is None:
            self.downstream_supply_profile = [self.capacity] * self.n
        if self.initial_density is None:
            self.initial_density = [0.0] * self.m

    def validate(self):
        if self.m < 1 or self.n < 2:
            raise ConfigError("ctm needs m >= 1 cells and n >= 2 steps")
        if int(self.substeps) < 1:
            raise ConfigError("ctm.substeps must be >= 1")
        for name in ("dt", "free_flow_speed", "backward_wave_speed", "jam_density", "capacity"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"ctm.{name} must be > 0")
        if self.noise_std < 0:
            raise ConfigError("ctm.noise_std must be >= 0")
        if self.backward_wave_speed > self.free_flow_speed:
            raise ConfigError("ctm.backward_wave_speed must not exceed free_flow_speed")
        lengths = np.asarray(self.cell_lengths, dtype=DTYPE)
        if lengths.size != self.m or np.any(lengths <= 0):
            raise ConfigError(f"ctm.cell_lengths must hold {self.m} positive lengths")
        for name, size in (("demand_profile", self.n), ("downstream_supply_profile", self.n),
                           ("initial_density", self.m)):
            arr = np.asarray(getattr(self, name), dtype=DTYPE)
            if arr.size != size:
                raise ConfigError(f"ctm.{name} must have {size} entries, got {arr.size}")
            if np.any(arr < 0):
                raise ConfigError(f"ctm.{name} must be nonnegative")
        if np.any(np.asarray(self.initial_density) > self.jam_density):
            raise ConfigError("ctm.initial_density exceeds jam_density")
        sub_dt = self.dt / self.substeps
        if self.free_flow_speed * sub_dt > lengths.min() * (1 + 1e-12):
            raise ConfigError(
                f"CFL condition violated: free_flow_speed * dt / substeps = "
                f"{self.free_flow_speed * sub_dt:.4g} km exceeds the shortest cell ({lengths.min():.4g} km)"
            )


def _truncated_normal(rng, std, size, bound=2.0):
    z = rng.standard_normal(size)
    bad = np.abs(z) > bound
    while np.any(bad):
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return std * z


def ctm_simulate(config):
    """Simulate the corridor; returns step-averaged flows and step-start densities."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, n, S = config.m, config.n, int(config.substeps)
    lengths = np.asarray(config.cell_lengths, dtype=DTYPE)
    vf, w = config.free_flow_speed, config.backward_wave_speed
    kj, qmax = config.jam_density, config.capacity
    demand = np.asarray(config.demand_profile, dtype=DTYPE)
    supply = np.asarray(config.downstream_supply_profile, dtype=DTYPE)
    sub_dt = config.dt / S
    ratio = sub_dt / lengths

    k = np.asarray(config.initial_density, dtype=DTYPE).copy()
    K = np.empty((n, m))
    F = np.empty((n, m + 1))
    for t in range(n):
        K[t] = k
        acc = np.zeros(m + 1)
        for _ in range(S):
            send = np.minimum(vf * k, qmax)
            recv = np.minimum(w * (kj - k), qmax)
            bound = np.empty(m + 1)
            bound[0] = min(demand[t], recv[0])
            bound[1:m] = np.minimum(send[:-1], recv[1:])
            bound[m] = min(send[-1], supply[t])
            bound = np.maximum(bound, 0.0)
            if config.noise_std > 0:
                q = np.clip(bound + _truncated_normal(rng, config.noise_std, m + 1), 0.0, bound)
            else:
                q = bound
            k = k + ratio * (q[:-1] - q[1:])
            acc += q
        F[t] = acc / S
    return TrafficStateMatrix(flow=F, density=K, dt=config.dt, cell_lengths=lengths)


PRESETS = {
    # detector spacing follows the two study corridors: 6 and 4 loop detectors
    "i5": {"m": 5, "cell_lengths": [0.5] * 5},
    "ca52": {"m": 3, "cell_lengths": [0.5] * 3},
}


@dataclass
class CorpusConfig:
    count: int = 2000
    seed: int = 0
    preset: str = "i5"
    n: int = 12
    dt: float = 1.0 / 12.0
    train_fraction: float = 2.0 / 3.0
    incident_probability: float = 0.2
    bottleneck_min: float = 0.7
    noise_std: float = 20.0
    substeps: int = 20
    free_flow_speed: float = 100.0
    backward_wave_speed: float = 20.0
    jam_density: float = 150.0
    capacity: float = 2000.0

    def validate(self):
        if self.count < 1:
            raise ConfigError("corpus.count must be >= 1")
        if self.preset not in PRESETS:
            raise ConfigError(f"corpus.preset must be one of {sorted(PRESETS)}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("corpus.train_fraction must lie in (0, 1)")
        if not 0 <= self.incident_probability <= 1:
            raise ConfigError("corpus.incident_probability must lie in [0, 1]")
        if not 0 < self.bottleneck_min <= 1:
            raise ConfigError("corpus.bottleneck_min must lie in (0, 1]")

    @property
    def m(self):
        return PRESETS[self.preset]["m"]

    def corpus_id(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return f"{self.preset}-{hashlib.sha256(blob).hexdigest()[:12]}"


def record_ctm_config(cc, rng, seed):
    """Draw one record's boundary conditions: sinusoidal demand plus optional incident."""
    n, qmax = cc.n, cc.capacity
    t = np.arange(n) * cc.dt
    base = rng.uniform(0.3, 0.95) * qmax
    amp = rng.uniform(0.0, 0.25) * qmax
    period = rng.uniform(0.75, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    demand = np.clip(base + amp * np.sin(2 * np.pi * t / period + phase), 0.0, qmax)
    supply = np.full(n, rng.uniform(cc.bottleneck_min, 1.0) * qmax)
    if rng.random() < cc.incident_probability:
        start = int(rng.integers(0, n - 2))
        stop = int(rng.integers(start + 2, n + 1))
        supply[start:stop] = rng.uniform(0.15, 0.6) * qmax
    m = cc.m
    free = demand[0] / cc.free_flow_speed
    init = np.clip(free * rng.uniform(0.6, 1.4, size=m), 0.0, cc.jam_density)
    return CtmConfig(
        m=m, n=n, dt=cc.dt, cell_lengths=list(PRESETS[cc.preset]["cell_lengths"]),
        free_flow_speed=cc.free_flow_speed, backward_wave_speed=cc.backward_wave_speed,
        jam_density=cc.jam_density, capacity=qmax,
        demand_profile=demand.tolist(), downstream_supply_profile=supply.tolist(),
        initial_density=init.tolist(), seed=seed, noise_std=cc.noise_std, substeps=cc.substeps,
    )


@dataclass
class Corpus:
    records: list
    split: list
    config: CorpusConfig
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"record_{i:05d}" for i in range(len(self.records))]

    def subset(self, which):
        return [r for r, s in zip(self.records, self.split) if s == which]

    @property
    def geometry(self):
        return self.records[0].geometry


def generate_corpus(cc):
    """Simulate `cc.count` one-hour records and assign a seeded train/validation split."""
    cc.validate()
    rng = np.random.default_rng(cc.seed)
    seeds = rng.integers(0, 2**31 - 1, size=cc.count)
    records = []
    for i in range(cc.count):
        rec_rng = np.random.default_rng(int(seeds[i]))
        records.append(ctm_simulate(record_ctm_config(cc, rec_rng, int(seeds[i]))))
    n_train = int(round(cc.train_fraction * cc.count))
    order = rng.permutation(cc.count)
    split = ["validation"] * cc.count
    for i in order[:n_train]:
        split[i] = "train"
    return Corpus(records=records, split=split, config=cc)


# --------------------------------------------------------------------------- features

@dataclass
class Scaler:
    """Per-column min/max in physical units."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=DTYPE)
        self.hi = np.asarray(self.hi, dtype=DTYPE)

    @classmethod
    def fit(cls, physical):
        x = np.asarray(physical, dtype=DTYPE)
        x = x.reshape(-1, x.shape[-1])
        return cls(lo=x.min(axis=0), hi=x.max(axis=0))

    @property
    def n_columns(self):
        return self.lo.size

    @property
    def span(self):
        return self.hi - self.lo

    @property
    def degenerate(self):
        return self.span < DEGENERATE_RANGE

    def scale(self):
        """d(physical)/d(normalized) per column; zero for degenerate columns."""
        return np.where(self.degenerate, 0.0, self.span)

    def transform(self, physical):
        x = np.asarray(physical, dtype=DTYPE)
        safe = np.where(self.degenerate, 1.0, self.span)
        return np.where(self.degenerate, PLACEHOLDER, (x - self.lo) / safe)

    def inverse(self, normalized):
        v = np.asarray(normalized, dtype=DTYPE)
        return self.lo + v * self.scale()

    def to_dict(self):
        return {"lo": [repr(float(v)) for v in self.lo], "hi": [repr(float(v)) for v in self.hi]}

    @classmethod
    def from_dict(cls, d):
        return cls(lo=[float(v) for v in d["lo"]], hi=[float(v) for v in d["hi"]])


@dataclass
class FeatureSequence:
    features: np.ndarray
    scaler: Scaler
    clipped: int = 0


def to_features(ts, scaler=None):
    """Flatten a record to rows [flows, densities], min-max normalized to [0, 1]."""
    phys = ts.physical_features()
    if scaler is None:
        scaler = Scaler.fit(phys)
    elif scaler.n_columns != phys.shape[1]:
        raise ShapeError(f"scaler has {scaler.n_columns} columns, record has {phys.shape[1]}")
    raw = scaler.transform(phys)
    feats = np.clip(raw, 0.0, 1.0)
    return FeatureSequence(features=feats, scaler=scaler, clipped=int(np.sum(feats != raw)))


def features_to_physical(features, scaler):
    return scaler.inverse(features)


def from_features(fs, geometry):
    """Inverse of to_features; negative physical values are clamped to zero."""
    m = geometry.m
    feats = np.asarray(fs.features, dtype=DTYPE)
    if feats.ndim != 2 or feats.shape[1] != 2 * m + 1 or fs.scaler.n_columns != 2 * m + 1:
        raise ShapeError(f"features of shape {feats.shape} do not match {m} cells")
    phys = fs.scaler.inverse(feats)
    neg = phys < 0
    if np.any(neg):
        log.warning("clamped %d negative de-normalized values to zero", int(neg.sum()))
        phys = np.where(neg, 0.0, phys)
    return TrafficStateMatrix(flow=phys[:, : m + 1], density=phys[:, m + 1:],
                              dt=geometry.dt, cell_lengths=geometry.cell_lengths)


def corpus_features(records, scaler):
    return np.stack([to_features(r, scaler).features for r in records])


# --------------------------------------------------------------------------- corruption

@dataclass
class CorruptionSpec:
    """Which entries go missing.

    pattern is ``random_entries`` (uses `rate`), ``detector_outage`` (uses
    `columns`, feature-column indices) or ``future_block`` (masks rows
    ``start_row..n-1``, zero-based).
    """
    pattern: str = "random_entries"
    rate: float = 0.3
    columns: list = field(default_factory=list)
    start_row: int = 6
    seed: int = 0

    def validate(self, shape=None):
        if self.pattern not in ("random_entries", "detector_outage", "future_block"):
            raise ConfigError(f"unknown corruption pattern {self.pattern!r}")
        if not 0 <= self.rate < 1:
            raise ConfigError("corruption.rate must lie in [0, 1)")
        if shape is not None:
            n, d = shape
            if any(not 0 <= c < d for c in self.columns):
                raise ConfigError(f"corruption.columns must index 0..{d - 1}")
            if self.pattern == "future_block" and not 0 <= self.start_row < n:
                raise ConfigError(f"corruption.start_row must index 0..{n - 1}")


def make_mask(shape, spec, rng=None):
    spec.validate(shape)
    n, d = shape
    mask = np.ones(shape, dtype=DTYPE)
    if spec.pattern == "random_entries":
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        count = int(math.floor(spec.rate * n * d + 0.5))
        idx = rng.choice(n * d, size=count, replace=False)
        mask.ravel()[idx] = 0.0
    elif spec.pattern == "detector_outage":
        mask[:, list(spec.columns)] = 0.0
    else:
        mask[spec.start_row:, :] = 0.0
    return mask


def corrupt(fs, spec, rng=None):
    """Return (y, mask); missing entries of y hold a 0.5 placeholder."""
    feats = fs.features if isinstance(fs, FeatureSequence) else np.asarray(fs, dtype=DTYPE)
    mask = make_mask(feats.shape, spec, rng)
    y = np.where(mask == 1.0, feats, PLACEHOLDER)
    return y, mask


# --------------------------------------------------------------------------- CSV I/O

def _fmt(v):
    return repr(float(v))


def matrix_csv_text(ts):
    buf = io.StringIO()
    buf.write(f"{ts.n},{ts.m},{_fmt(ts.dt)}\n")
    buf.write(",".join(_fmt(v) for v in ts.cell_lengths) + "\n")
    for t in range(ts.n):
        buf.write(",".join(_fmt(v) for v in np.concatenate([ts.flow[t], ts.density[t]])) + "\n")
    return buf.getvalue()


def save_matrix_csv(ts, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(matrix_csv_text(ts))


def _floats(cells, lineno, path):
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise MatrixFormatError(f"{path}:{lineno}: non-numeric value ({exc})") from exc


def load_matrix_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh)]
    if len(rows) < 2:
        raise MatrixFormatError(f"{path}:1: missing header lines")
    head = rows[0]
    if len(head) != 3:
        raise MatrixFormatError(f"{path}:1: header must be 'n,m,dt_hours'")
    try:
        n, m, dt = int(head[0]), int(head[1]), float(head[2])
    except ValueError as exc:
        raise MatrixFormatError(f"{path}:1: malformed header ({exc})") from exc
    if n < 2 or m < 1 or not dt > 0:
        raise MatrixFormatError(f"{path}:1: header needs n >= 2, m >= 1, dt > 0")
    lengths = _floats(rows[1], 2, path)
    if len(lengths) != m or any(v <= 0 for v in lengths):
        raise MatrixFormatError(f"{path}:2: expected {m} positive cell lengths")
    data = rows[2:]
    if len(data) != n:
        raise MatrixFormatError(f"{path}:{len(rows) + 1}: expected {n} data rows, found {len(data)}")
    out = np.empty((n, 2 * m + 1))
    for t, row in enumerate(data):
        lineno = t + 3
        if len(row) != 2 * m + 1:
            raise MatrixFormatError(f"{path}:{lineno}: expected {2 * m + 1} values, found {len(row)}")
        vals = _floats(row, lineno, path)
        if any(not math.isfinite(v) for v in vals):
            raise MatrixFormatError(f"{path}:{lineno}: non-finite value")
        if any(v < 0 for v in vals):
            raise MatrixFormatError(f"{path}:{lineno}: negative flow or density")
        out[t] = vals
    return TrafficStateMatrix(flow=out[:, : m + 1], density=out[:, m + 1:], dt=dt, cell_lengths=lengths)


def save_corpus(corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rid, rec, split in zip(corpus.ids, corpus.records, corpus.split):
        fname = f"{rid}.csv"
        save_matrix_csv(rec, os.path.join(out_dir, fname))
        entries.append({"id": rid, "file": fname, "split": split})
    manifest = {
        "corpus_id": corpus.config.corpus_id(),
        "seed": corpus.config.seed,
        "config": asdict(corpus.config),
        "records": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_corpus(corpus_dir):
    path = os.path.join(corpus_dir, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json in {corpus_dir}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cc = CorpusConfig(**manifest["config"])
    records, split, ids = [], [], []
    for e in manifest["records"]:
        records.append(load_matrix_csv(os.path.join(corpus_dir, e["file"])))
        split.append(e["split"])
        ids.append(e["id"])
    return Corpus(records=records, split=split, config=cc, ids=ids)
