"""Open-loop Poisson arrival streams and trace replay."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InvalidMix, UnknownClass

CONSTANT = "constant"
DIURNAL = "diurnal"
BURST = "burst"
SKEWED = "skewed"
PATTERN_KINDS = (CONSTANT, DIURNAL, BURST, SKEWED)


@dataclass(frozen=True)
class LoadPattern:
    """Shape of an arrival process.

    ``burst`` multiplies the rate by ``1 + burst_magnitude`` inside
    ``[burst_start_s, burst_end_s)``.  ``diurnal`` ramps linearly from
    ``base_rps`` to ``diurnal_peak * base_rps`` at mid-run and back down.
    ``skewed`` scales per-class weights by ``skew`` from ``skew_at_s`` on
    (0 means from the start).
    """

    kind: str
    base_rps: float
    mix: Mapping[str, float]
    burst_magnitude: float = 0.5
    burst_start_s: float = 0.0
    burst_end_s: float = 0.0
    diurnal_peak: float = 2.0
    skew: Mapping[str, float] = field(default_factory=dict)
    skew_at_s: float = 0.0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ConfigError(f"unknown load pattern {self.kind!r}")
        if self.base_rps < 0:
            raise ConfigError("base_rps must be non-negative")
        if not self.mix:
            raise InvalidMix("mix is empty")
        for c, w in self.mix.items():
            if not w > 0:
                raise InvalidMix(f"class {c!r} has non-positive weight {w}")
        for c, m in self.skew.items():
            if c not in self.mix:
                raise InvalidMix(f"skew names class {c!r} missing from the mix")
            if not m > 0:
                raise InvalidMix(f"skew multiplier for {c!r} must be positive")
        if self.kind == BURST:
            if not 0.5 <= self.burst_magnitude <= 1.25:
                raise ConfigError("burst_magnitude must lie in [0.5, 1.25]")
            if self.burst_end_s < self.burst_start_s:
                raise ConfigError("burst window ends before it starts")
        if self.kind == DIURNAL and self.diurnal_peak < 1:
            raise ConfigError("diurnal_peak must be >= 1")

    def weights_at(self, t: np.ndarray) -> np.ndarray:
        """Per-class weights (rows: times, columns: classes in mix order)."""
        w = np.array(list(self.mix.values()), dtype=float)
        out = np.broadcast_to(w, (len(t), len(w))).copy()
        if self.kind == SKEWED and self.skew:
            m = np.array([self.skew.get(c, 1.0) for c in self.mix], dtype=float)
            after = t >= self.skew_at_s
            out[after] *= m
        return out

    def rate_at(self, t: np.ndarray, duration_s: float) -> np.ndarray:
        """Total arrival rate (rps) at times ``t``."""
        t = np.asarray(t, dtype=float)
        rate = np.full(t.shape, float(self.base_rps))
        if self.kind == BURST:
            inside = (t >= self.burst_start_s) & (t < self.burst_end_s)
            rate[inside] *= 1.0 + self.burst_magnitude
        elif self.kind == DIURNAL and duration_s > 0:
            half = duration_s / 2.0
            frac = 1.0 - np.abs(t - half) / half
            rate *= 1.0 + (self.diurnal_peak - 1.0) * np.clip(frac, 0.0, 1.0)
        elif self.kind == SKEWED and self.skew:
            w = np.array(list(self.mix.values()), dtype=float)
            m = np.array([self.skew.get(c, 1.0) for c in self.mix], dtype=float)
            # skewing raises the favoured classes' absolute rates, others keep theirs
            rate[t >= self.skew_at_s] *= float((w * m).sum() / w.sum())
        return rate

    def peak_rate(self, duration_s: float) -> float:
        if self.kind == BURST:
            return self.base_rps * (1.0 + self.burst_magnitude)
        if self.kind == DIURNAL:
            return self.base_rps * self.diurnal_peak
        if self.kind == SKEWED and self.skew:
            w = np.array(list(self.mix.values()), dtype=float)
            m = np.array([self.skew.get(c, 1.0) for c in self.mix], dtype=float)
            return self.base_rps * max(1.0, float((w * m).sum() / w.sum()))
        return self.base_rps

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "base_rps": self.base_rps, "mix": dict(self.mix)}
        if self.kind == BURST:
            d.update(burst_magnitude=self.burst_magnitude, burst_start_s=self.burst_start_s,
                     burst_end_s=self.burst_end_s)
        if self.kind == DIURNAL:
            d["diurnal_peak"] = self.diurnal_peak
        if self.kind == SKEWED:
            d.update(skew=dict(self.skew), skew_at_s=self.skew_at_s)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LoadPattern":
        return cls(**{k: v for k, v in d.items()})


class ArrivalStream:
    """Arrival timestamps (seconds, non-decreasing) with their class ids."""

    def __init__(self, times: Sequence[float], class_ids: Sequence[str], duration_s: float,
                 descriptor: Optional[Mapping] = None):
        self.times = np.asarray(times, dtype=float)
        self.class_ids: List[str] = list(class_ids)
        if self.times.shape[0] != len(self.class_ids):
            raise ConfigError("times and class ids differ in length")
        if self.times.size and np.any(np.diff(self.times) < 0):
            raise ConfigError("arrival timestamps must be non-decreasing")
        self.duration_s = float(duration_s)
        self.descriptor = dict(descriptor or {})

    def __len__(self) -> int:
        return len(self.class_ids)

    def __iter__(self):
        return zip(self.times.tolist(), self.class_ids)

    def counts(self) -> dict:
        ids, n = np.unique(np.asarray(self.class_ids, dtype=object), return_counts=True)
        return dict(zip(ids.tolist(), n.tolist()))

    def check_classes(self, known: Iterable[str]) -> None:
        known = set(known)
        for c in set(self.class_ids):
            if c not in known:
                raise UnknownClass(c)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp_s", "class_id"])
            for t, c in self:
                w.writerow([repr(t), c])


def make_stream(pattern: LoadPattern, duration_s: float, seed: int) -> ArrivalStream:
    """Poisson arrivals with rate ``pattern.rate_at(t)``, classes drawn i.i.d. from the mix.

    Non-constant rates are produced by thinning a homogeneous process at the
    peak rate.
    """
    if duration_s < 0:
        raise ConfigError("duration must be non-negative")
    rng = np.random.default_rng(seed)
    desc = {"pattern": pattern.to_dict(), "seed": seed}
    classes = list(pattern.mix)
    lam = pattern.peak_rate(duration_s)
    if duration_s == 0 or lam <= 0:
        return ArrivalStream([], [], duration_s, desc)
    parts = []
    t = 0.0
    chunk = max(1024, int(lam * duration_s * 1.1) + 64)
    while t < duration_s:
        gaps = rng.exponential(1.0 / lam, chunk)
        times = t + np.cumsum(gaps)
        parts.append(times)
        t = float(times[-1])
    times = np.concatenate(parts)
    times = times[times < duration_s]
    if pattern.kind != CONSTANT:
        keep = rng.random(times.size) * lam < pattern.rate_at(times, duration_s)
        times = times[keep]
    w = pattern.weights_at(times)
    cdf = np.cumsum(w, axis=1)
    u = rng.random(times.size) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return ArrivalStream(times, [classes[i] for i in idx], duration_s, desc)


def replay_trace(records: Iterable[Tuple[float, str]], known_classes: Optional[Iterable[str]] = None,
                 duration_s: Optional[float] = None) -> ArrivalStream:
    """Stream reproducing ``records``; unsorted input is sorted stably by time."""
    recs = list(records)
    times = np.array([float(t) for t, _ in recs], dtype=float)
    ids = [str(c) for _, c in recs]
    if known_classes is not None:
        known = set(known_classes)
        for c in ids:
            if c not in known:
                raise UnknownClass(c)
    order = np.argsort(times, kind="stable")
    times = times[order]
    ids = [ids[i] for i in order]
    if duration_s is None:
        duration_s = float(times[-1]) if times.size else 0.0
    return ArrivalStream(times, ids, duration_s, {"pattern": "trace"})


def read_trace(path, known_classes: Optional[Iterable[str]] = None,
               duration_s: Optional[float] = None) -> ArrivalStream:
    """Load a ``timestamp_s,class_id`` CSV trace."""
    with open(path, newline="") as fh:
        rows = [(float(r["timestamp_s"]), r["class_id"]) for r in csv.DictReader(fh)]
    return replay_trace(rows, known_classes, duration_s)
