"""Demand tensors: trip ingestion, O-D graphs, splits, windows, synthetic data."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import (
    EmptyGraph,
    InsufficientZones,
    MalformedRow,
    TooShort,
    UnknownZone,
)
from .tweedie import EPS, MU_FLOOR, sample_array

logger = logging.getLogger(__name__)

RESOLUTIONS = (5, 15, 60)
SPLIT = (0.6, 0.1, 0.3)


@dataclass
class DemandTensor:
    """Trip counts per O-D pair (rows) and time window (columns)."""

    counts: np.ndarray
    resolution_minutes: int
    start_time: int  # UTC epoch seconds of window 0
    pair_index: list[tuple[str, str]]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.pair_index = [tuple(p) for p in self.pair_index]
        if self.counts.ndim != 2 or self.counts.shape[0] != len(self.pair_index):
            raise ValueError(
                f"counts shape {self.counts.shape} does not match {len(self.pair_index)} pairs"
            )
        if self.resolution_minutes not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def num_pairs(self) -> int:
        return self.counts.shape[0]

    @property
    def num_windows(self) -> int:
        return self.counts.shape[1]

    def window_start(self, t: int) -> int:
        return self.start_time + 60 * self.resolution_minutes * t

    def slice_time(self, start: int, stop: int) -> "DemandTensor":
        return DemandTensor(
            self.counts[:, start:stop].copy(),
            self.resolution_minutes,
            self.window_start(start),
            list(self.pair_index),
        )

    def save(self, path) -> None:
        """Write ``<path>.json`` (metadata) and ``<path>.bin`` (little-endian int64, row-major)."""
        path = Path(path)
        meta = {
            "shape": list(self.counts.shape),
            "resolution_minutes": self.resolution_minutes,
            "start_time": self.start_time,
            "pair_index": [list(p) for p in self.pair_index],
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        path.with_suffix(".bin").write_bytes(self.counts.astype("<i8").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "DemandTensor":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        counts = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<i8")
        return cls(
            counts.reshape(meta["shape"]).astype(np.int64),
            meta["resolution_minutes"],
            meta["start_time"],
            [tuple(p) for p in meta["pair_index"]],
        )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def parse_timestamp(text: str) -> int:
    """Epoch seconds from an integer string or an ISO-8601 timestamp (UTC assumed)."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def ingest_trips(
    records_path,
    zones,
    resolution_minutes: int,
    period: tuple,
    dest_zones=None,
) -> DemandTensor:
    """Count trips per O-D pair and window.

    Args:
        records_path: CSV with header ``origin_zone,dest_zone,timestamp``.
        zones: declared origin zones (also the destinations unless
            ``dest_zones`` is given).
        resolution_minutes: window length, one of 5, 15, 60.
        period: ``(start, end)`` of the study period, epoch seconds or ISO
            strings. Windows are half-open and aligned to ``start``.
        dest_zones: optional separate destination zone list.

    Raises:
        UnknownZone: a record names an undeclared zone.
        MalformedRow: a row cannot be parsed (message carries the line number).
    """
    origins = list(zones)
    dests = list(dest_zones) if dest_zones is not None else origins
    start, end = (parse_timestamp(str(p)) for p in period)
    step = 60 * resolution_minutes
    n_windows = -(-(end - start) // step)
    pairs = [(o, d) for o in origins for d in dests]
    row_of = {p: i for i, p in enumerate(pairs)}
    o_set, d_set = set(origins), set(dests)
    counts = np.zeros((len(pairs), n_windows), dtype=np.int64)
    skipped = 0
    with open(records_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return DemandTensor(counts, resolution_minutes, start, pairs)
        header = [h.strip() for h in header]
        try:
            cols = [header.index(c) for c in ("origin_zone", "dest_zone", "timestamp")]
        except ValueError:
            raise MalformedRow(f"line 1: header must contain origin_zone,dest_zone,timestamp; got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                o, d, ts = (row[c].strip() for c in cols)
                ts = parse_timestamp(ts)
            except (IndexError, ValueError) as exc:
                raise MalformedRow(f"line {lineno}: {row!r} ({exc})") from None
            if o not in o_set:
                raise UnknownZone(f"line {lineno}: origin zone {o!r} not declared")
            if d not in d_set:
                raise UnknownZone(f"line {lineno}: destination zone {d!r} not declared")
            if not start <= ts < end:
                skipped += 1
                continue
            counts[row_of[(o, d)], (ts - start) // step] += 1
    if skipped:
        logger.info("dropped %d records outside the study period", skipped)
    return DemandTensor(counts, resolution_minutes, start, pairs)


def sample_od_grid(tensor: DemandTensor, m: int, u: int, seed: int) -> DemandTensor:
    """Keep the pairs between m random origins and u random destinations.

    Selected zones keep their original order, so selecting every zone
    returns the tensor unchanged.
    """
    origins = list(dict.fromkeys(o for o, _ in tensor.pair_index))
    dests = list(dict.fromkeys(d for _, d in tensor.pair_index))
    if m > len(origins) or u > len(dests) or m < 1 or u < 1:
        raise InsufficientZones(
            f"asked for {m}x{u} zones, have {len(origins)} origins and {len(dests)} destinations"
        )
    rng = np.random.default_rng(seed)
    o_pick = np.sort(rng.choice(len(origins), size=m, replace=False))
    d_pick = np.sort(rng.choice(len(dests), size=u, replace=False))
    row_of = {p: i for i, p in enumerate(tensor.pair_index)}
    pairs, rows = [], []
    for oi in o_pick:
        for di in d_pick:
            p = (origins[oi], dests[di])
            if p in row_of:
                pairs.append(p)
                rows.append(row_of[p])
    return DemandTensor(
        tensor.counts[rows].copy(), tensor.resolution_minutes, tensor.start_time, pairs
    )


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


def _row_normalize(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=1, keepdims=True)
    return np.divide(a, s, out=np.zeros_like(a), where=s > 0)


@dataclass
class ODGraph:
    """Adjacency between O-D pairs and its forward/backward random-walk transitions."""

    adjacency: np.ndarray
    forward_transition: np.ndarray = field(init=False)
    backward_transition: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64).copy()
        np.fill_diagonal(a, 0.0)
        self.adjacency = a
        self.forward_transition = _row_normalize(a)
        self.backward_transition = _row_normalize(a.T)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def permuted(self, perm) -> "ODGraph":
        perm = np.asarray(perm)
        return ODGraph(self.adjacency[np.ix_(perm, perm)])


def build_adjacency(
    pair_index,
    mode: str = "shared_endpoint",
    counts: np.ndarray | None = None,
    threshold: float = 0.5,
) -> ODGraph:
    """Adjacency between O-D pairs.

    ``shared_endpoint`` links two distinct pairs that share an origin or a
    destination. ``demand_correlation`` links pairs whose demand series
    (``counts``, normally the training split) have Pearson correlation
    strictly above ``threshold``.
    """
    pairs = [tuple(p) for p in pair_index]
    n = len(pairs)
    if mode == "shared_endpoint":
        o = np.array([p[0] for p in pairs], dtype=object)
        d = np.array([p[1] for p in pairs], dtype=object)
        a = ((o[:, None] == o[None, :]) | (d[:, None] == d[None, :])).astype(float)
    elif mode == "demand_correlation":
        if counts is None:
            raise ValueError("demand_correlation needs the training counts")
        x = np.asarray(counts, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.corrcoef(x) if n > 1 else np.zeros((1, 1))
        r = np.nan_to_num(np.atleast_2d(r), nan=0.0)
        a = (r > threshold).astype(float)
    else:
        raise ValueError(f"unknown adjacency mode {mode!r}")
    np.fill_diagonal(a, 0.0)
    if not a.any():
        raise EmptyGraph(f"{mode} adjacency over {n} pairs has no edges")
    return ODGraph(a)


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------


def split_lengths(T: int, ratios=SPLIT) -> tuple[int, int, int]:
    if T < 10:
        raise TooShort(f"need at least 10 windows to split, got {T}")
    n_train = int(np.floor(T * ratios[0] + 1e-9))
    n_val = int(np.floor(T * ratios[1] + 1e-9))
    return n_train, n_val, T - n_train - n_val


def split_chronological(tensor: DemandTensor, ratios=SPLIT):
    """Contiguous train/validation/test segments in time order."""
    n_train, n_val, _ = split_lengths(tensor.num_windows, ratios)
    return (
        tensor.slice_time(0, n_train),
        tensor.slice_time(n_train, n_train + n_val),
        tensor.slice_time(n_train + n_val, tensor.num_windows),
    )


@dataclass
class Windows:
    """Supervised (input, target) windows cut from one segment.

    ``inputs`` has shape (n, V, t), ``targets`` (n, V, k); ``target_start``
    holds the segment-relative index of each window's first target step.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_start: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, i):
        return self.inputs[i], self.targets[i]

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def make_windows(segment, input_len: int = 8, horizon: int = 1, stride: int = 1) -> Windows:
    """Sliding (X[t-input_len:t], X[t:t+horizon]) pairs inside one segment."""
    counts = segment.counts if isinstance(segment, DemandTensor) else np.asarray(segment)
    T = counts.shape[1]
    if input_len + horizon > T:
        raise TooShort(f"segment of {T} windows cannot fit input {input_len} + horizon {horizon}")
    starts = np.arange(0, T - input_len - horizon + 1, stride)
    idx_in = starts[:, None] + np.arange(input_len)[None, :]
    idx_out = starts[:, None] + input_len + np.arange(horizon)[None, :]
    x = counts[:, idx_in].transpose(1, 0, 2).astype(np.float64)
    y = counts[:, idx_out].transpose(1, 0, 2).astype(np.float64)
    return Windows(x, y, starts + input_len)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Ground truth for a synthetic O-D demand tensor.

    Nodes are the ``origins x dests`` pairs of a synthetic zone grid. ``mu``,
    ``phi`` and ``rho`` are scalars or per-node arrays; with a nonzero
    ``daily_amplitude`` the mean follows ``mu * (1 + A sin(2 pi t / day))``.
    """

    origins: int
    dests: int
    horizon: int
    mu: object = 1.0
    phi: object = 1.0
    rho: object = 1.5
    daily_amplitude: float = 0.0
    resolution_minutes: int = 15
    start_time: int = 0
    seed: int = 0

    @property
    def num_nodes(self) -> int:
        return self.origins * self.dests

    def fields(self) -> dict[str, np.ndarray]:
        """Per-node, per-window true parameters, each of shape (V, T)."""
        v, T = self.num_nodes, self.horizon
        mu = np.broadcast_to(np.asarray(self.mu, float), (v,))[:, None]
        phi = np.broadcast_to(np.asarray(self.phi, float), (v,))[:, None]
        rho = np.broadcast_to(np.asarray(self.rho, float), (v,))[:, None]
        per_day = 1440 // self.resolution_minutes
        t = np.arange(T)[None, :]
        profile = 1.0 + self.daily_amplitude * np.sin(2.0 * np.pi * t / per_day)
        out = {
            "mu": np.maximum(mu * profile, MU_FLOOR),
            "phi": np.broadcast_to(phi, (v, T)).copy(),
            "rho": np.broadcast_to(rho, (v, T)).copy(),
        }
        if np.any(out["phi"] < EPS) or np.any((out["rho"] <= 1.0) | (out["rho"] >= 2.0)):
            raise ValueError("synthetic parameters violate the Tweedie ranges")
        return out

    def pair_index(self) -> list[tuple[str, str]]:
        return [(f"o{i}", f"d{j}") for i in range(self.origins) for j in range(self.dests)]


def synth_generate(spec: SyntheticSpec):
    """Draw counts from the true fields; continuous draws are rounded half-to-even.

    Returns:
        (DemandTensor, dict of true ``mu``/``phi``/``rho`` arrays of shape (V, T)).
    """
    truth = spec.fields()
    rng = np.random.default_rng(spec.seed)
    draws = sample_array(truth["mu"], truth["phi"], truth["rho"], rng)
    counts = np.rint(draws).astype(np.int64)
    tensor = DemandTensor(counts, spec.resolution_minutes, spec.start_time, spec.pair_index())
    return tensor, truth
