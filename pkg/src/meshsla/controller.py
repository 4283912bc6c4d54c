"""Runtime resource controller.

Every bucket the controller compares the per-replica load of each service
with the load-per-replica threshold picked by the optimizer.  A one-sided
Welch test decides whether the live load really exceeds the recorded
threshold load (scale out) or sits below it (scale in, after a few
consecutive confirmations).  The anomaly detector watches the request mix
and the per-class SLA-violation rate.

The steady-state path never calls the optimizer; ``ControllerState.optimizer_calls``
counts the re-solves performed through :meth:`ControllerState.install_plan`.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyWindow, ZeroThreshold, ZeroTotalLoad
from .model import _CEIL_EPS
from .stats import student_t_sf

RECALCULATE = "recalculate"
RE_EXPLORE = "re_explore"
LOAD_ANOMALY = "load_anomaly"
LATENCY_ANOMALY = "latency_anomaly"
AUTO_A = "auto_a"
AUTO_B = "auto_b"


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 0.01
    window_buckets: int = 1
    deviation_threshold: float = 1.5
    deviation_window_buckets: int = 2
    sla_violation_trigger: float = 0.10
    violation_window_buckets: int = 10
    scale_in_confirmations: int = 3
    escalate_after_buckets: int = 3
    min_replicas: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ConfigError("alpha must lie in (0, 0.5)")
        if self.window_buckets < 1 or self.deviation_window_buckets < 1:
            raise ConfigError("windows must span at least one bucket")
        if self.min_replicas < 1:
            raise ConfigError("min_replicas must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ControllerConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class Action:
    bucket: int
    service: str
    from_replicas: int
    to_replicas: int
    reason: str

    def to_dict(self) -> dict:
        return {"bucket": self.bucket, "service": self.service, "from": self.from_replicas,
                "to": self.to_replicas, "reason": self.reason}


@dataclass(frozen=True)
class AnomalyReport:
    kind: str
    action: str
    services: tuple
    classes: tuple
    value: float
    bucket: int = -1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "action": self.action, "services": list(self.services),
                "classes": list(self.classes), "value": self.value, "bucket": self.bucket}


@dataclass
class BucketObservation:
    """What the controller sees at the end of one bucket.

    ``load`` has shape (services, classes, slots): per-second total request
    rates at each service.  ``violated`` maps class id to whether its SLA
    percentile exceeded the target in this bucket (missing: no completions).
    """

    bucket: int
    load: np.ndarray
    violated: Mapping[str, bool] = field(default_factory=dict)


def request_ratio_deviation(loads: Sequence[float], thresholds: Sequence[float]) -> float:
    """``max_i (l_i / t_i) * sum(t) / sum(l)``."""
    l = np.asarray(loads, dtype=float)
    t = np.asarray(thresholds, dtype=float)
    if np.any(t <= 0):
        raise ZeroThreshold("every per-replica threshold must be positive")
    total = l.sum()
    if not total > 0:
        raise ZeroTotalLoad("total load is zero")
    return float(np.max(l / t) * t.sum() / total)


def autoscaler_decision(policy: str, utilization: Sequence[float], upper: Optional[float] = None,
                        lower: Optional[float] = None) -> int:
    """Step-scaling delta from the mean utilization of the window."""
    u = np.asarray(utilization, dtype=float)
    if u.size == 0:
        raise EmptyWindow("utilization window is empty")
    if policy == AUTO_A:
        hi, lo = 0.60, 0.30
    elif policy == AUTO_B:
        hi, lo = 0.40, 0.20
    else:
        raise ConfigError(f"unknown autoscaling policy {policy!r}")
    hi = hi if upper is None else upper
    lo = lo if lower is None else lower
    m = float(u.mean())
    if m > hi:
        return 1
    if m < lo:
        return -1
    return 0


class ControllerState:
    """Per-service thresholds, replica counts and anomaly bookkeeping."""

    def __init__(self, services: Sequence[str], classes: Sequence[str],
                 thresholds: Mapping[str, Mapping[str, float]],
                 threshold_samples: Mapping[str, Mapping[str, Sequence[float]]],
                 replicas: Mapping[str, int], config: ControllerConfig = ControllerConfig(),
                 chains: Optional[Mapping[str, Sequence[str]]] = None):
        self.services = list(services)
        self.classes = list(classes)
        self.config = config
        S, C = len(self.services), len(self.classes)
        self._sidx = {s: i for i, s in enumerate(self.services)}
        self._cidx = {c: i for i, c in enumerate(self.classes)}
        self.replicas = np.array([int(replicas[s]) for s in self.services], dtype=np.int64)
        self.chains = {c: list(v) for c, v in (chains or {}).items()}
        self.thr = np.zeros((S, C))
        self.thr_n = np.zeros((S, C))
        self.thr_mean = np.zeros((S, C))
        self.thr_var = np.zeros((S, C))
        self.optimizer_calls = 0
        self._load_plan(thresholds, threshold_samples)
        self._scale_in_streak = np.zeros(S, dtype=np.int64)
        self._history: deque = deque(maxlen=max(config.window_buckets, config.deviation_window_buckets))
        self._violations = {c: deque(maxlen=config.violation_window_buckets) for c in self.classes}
        self._latency_alarm = {c: False for c in self.classes}
        self._deviating = np.zeros(S, dtype=bool)
        self._recalc_bucket = np.full(S, -1, dtype=np.int64)
        self._escalated = np.zeros(S, dtype=bool)
        self._z = NormalDist().inv_cdf(1 - config.alpha)

    def _load_plan(self, thresholds, threshold_samples) -> None:
        self.thr[:] = 0
        self.thr_n[:] = 0
        self.thr_mean[:] = 0
        self.thr_var[:] = 0
        for s, vec in thresholds.items():
            i = self._sidx[s]
            for c, v in vec.items():
                j = self._cidx[c]
                self.thr[i, j] = float(v)
                x = np.asarray((threshold_samples.get(s) or {}).get(c, []), dtype=float)
                if x.size >= 2:
                    self.thr_n[i, j] = x.size
                    self.thr_mean[i, j] = x.mean()
                    self.thr_var[i, j] = x.var(ddof=1)
                else:
                    # no recorded samples: treat the threshold as a known constant
                    self.thr_n[i, j] = 2
                    self.thr_mean[i, j] = float(v)

    def install_plan(self, thresholds, threshold_samples) -> None:
        """Swap in re-optimized thresholds at a bucket boundary."""
        self.optimizer_calls += 1
        self._load_plan(thresholds, threshold_samples)
        self._scale_in_streak[:] = 0

    def threshold(self, service: str) -> Dict[str, float]:
        i = self._sidx[service]
        return {c: float(self.thr[i, j]) for c, j in self._cidx.items() if self.thr[i, j] > 0}

    # -- scaling -----------------------------------------------------------
    def _window(self) -> np.ndarray:
        if not self._history:
            raise EmptyWindow("no load observed yet")
        w = list(self._history)[-self.config.window_buckets:]
        return np.concatenate(w, axis=2)

    def _welch_t(self, load: np.ndarray, replicas: np.ndarray):
        """t statistics of (threshold mean - actual per-replica mean) for every service and class."""
        per = load / replicas[:, None, None]
        n = per.shape[2]
        if n < 2:
            raise EmptyWindow("load window needs at least two samples")
        m = per.mean(axis=2)
        v = per.var(axis=2, ddof=1)
        sa = np.divide(self.thr_var, self.thr_n, out=np.zeros_like(self.thr_var), where=self.thr_n > 0)
        sb = v / n
        se2 = sa + sb
        diff = self.thr_mean - m
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se2 > 0, diff / np.sqrt(se2), np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
            dof = np.where(
                se2 > 0,
                se2 ** 2 / (np.where(sa > 0, sa ** 2 / np.maximum(self.thr_n - 1, 1), 0)
                            + np.where(sb > 0, sb ** 2 / (n - 1), 0)),
                self.thr_n + n - 2,
            )
        return t, dof, m

    def _significant(self, t: float, dof: float) -> bool:
        """One-sided rejection at ``alpha`` for the lower tail of ``t``."""
        if t >= -self._z + 1e-12 and not math.isinf(t):
            # the normal quantile is a lower bound on every t quantile
            return False
        return student_t_sf(-t, dof) < self.config.alpha

    def _exact(self, mask: np.ndarray, t: np.ndarray, dof: np.ndarray) -> np.ndarray:
        """Exact t-tail check on the entries that survived the normal pre-screen."""
        out = np.zeros(mask.shape, dtype=bool)
        for i, j in zip(*np.nonzero(mask)):
            out[i, j] = student_t_sf(abs(t[i, j]), dof[i, j]) < self.config.alpha
        return out

    def _targets(self, bucket: int):
        cfg = self.config
        load = self._window()
        t, dof, _ = self._welch_t(load, self.replicas)
        mean_total = load.mean(axis=2)
        active = self.thr > 0
        managed = active.any(axis=1)
        cur = self.replicas
        thr = np.where(active, self.thr, 1.0)
        ratio = np.where(active & (mean_total > 0), mean_total / thr, 0.0)
        need = np.ceil(ratio - _CEIL_EPS * np.maximum(1.0, ratio)).max(axis=1)
        target = np.maximum(need, cfg.min_replicas).astype(np.int64)

        # threshold < actual shows up as strongly negative t
        exceeded = self._exact(active & (t < -self._z + 1e-12), t, dof).any(axis=1)
        shrink = managed & ~exceeded & (target < cur)
        rows = shrink[:, None] & active
        below = self._exact(rows & (t > self._z - 1e-12), t, dof) | (mean_total == 0)
        below = shrink & np.all(below | ~active, axis=1)

        streak = self._scale_in_streak
        streak[managed & ~below] = 0
        streak[below] += 1
        confirmed = below & (streak >= cfg.scale_in_confirmations)
        streak[confirmed] = 0
        out: List[Action] = []
        for i in np.nonzero((exceeded & (target > cur)) | confirmed)[0]:
            reason = "scale_out" if exceeded[i] else "scale_in"
            out.append(Action(bucket, self.services[i], int(cur[i]), int(target[i]), reason))
        return out

    # -- anomalies ---------------------------------------------------------
    def _deviation(self) -> tuple:
        """Request-ratio deviation of every service over the deviation window."""
        w = list(self._history)[-self.config.deviation_window_buckets:]
        load = np.concatenate(w, axis=2).mean(axis=2)
        active = self.thr > 0
        l = np.where(active, load, 0.0)
        total = l.sum(axis=1)
        ok = (active.sum(axis=1) >= 2) & (total > 0)
        t = np.where(active, self.thr, 0.0)
        worst = (l / np.where(active, self.thr, 1.0)).max(axis=1)
        dev = np.where(ok, worst * t.sum(axis=1) / np.where(ok, total, 1.0), 0.0)
        return dev, ok

    def _detect(self, obs: BucketObservation) -> List[AnomalyReport]:
        cfg = self.config
        reports: List[AnomalyReport] = []
        dev, ok = self._deviation()
        hot = ok & (dev > cfg.deviation_threshold)
        cool = ok & ~hot
        self._deviating[cool] = False
        self._escalated[cool] = False
        for i in np.nonzero(hot)[0]:
            svc = self.services[i]
            affected = tuple(self.classes[j] for j in np.nonzero(self.thr[i] > 0)[0])
            value = float(dev[i])
            if not self._deviating[i]:
                self._deviating[i] = True
                self._recalc_bucket[i] = obs.bucket
                reports.append(AnomalyReport(LOAD_ANOMALY, RECALCULATE, (svc,), affected, value, obs.bucket))
            elif (not self._escalated[i] and self._recalc_bucket[i] >= 0
                  and obs.bucket - self._recalc_bucket[i] >= cfg.escalate_after_buckets):
                self._escalated[i] = True
                reports.append(AnomalyReport(LOAD_ANOMALY, RE_EXPLORE, (svc,), affected, value, obs.bucket))
        for c, v in obs.violated.items():
            if c not in self._violations:
                continue
            self._violations[c].append(bool(v))
            hist = self._violations[c]
            rate = sum(hist) / len(hist)
            if len(hist) == hist.maxlen and rate > cfg.sla_violation_trigger:
                if not self._latency_alarm[c]:
                    self._latency_alarm[c] = True
                    reports.append(AnomalyReport(LATENCY_ANOMALY, RE_EXPLORE,
                                                 tuple(self.chains.get(c, ())), (c,), rate, obs.bucket))
            else:
                self._latency_alarm[c] = False
        return reports

    def observe(self, obs: BucketObservation) -> None:
        if obs.load.shape[:2] != (len(self.services), len(self.classes)):
            raise ConfigError("observation shape does not match the controller's services and classes")
        self._history.append(np.asarray(obs.load, dtype=float))

    def apply(self, actions: Sequence[Action]) -> None:
        for a in actions:
            self.replicas[self._sidx[a.service]] = a.to_replicas


def scaling_decision(state: ControllerState, service: str) -> int:
    """Replica target for one service from the current load window."""
    streak = state._scale_in_streak.copy()
    try:
        acts = [a for a in state._targets(-1) if a.service == service]
    finally:
        state._scale_in_streak = streak
    return acts[0].to_replicas if acts else int(state.replicas[state._sidx[service]])


def detect_anomalies(state: ControllerState, obs: BucketObservation) -> List[AnomalyReport]:
    return state._detect(obs)


def control_loop_step(state: ControllerState, obs: BucketObservation):
    """Ingest one bucket, decide scaling actions, detect anomalies.

    Returns ``(actions, reports)``; actions are already applied to ``state``.
    """
    state.observe(obs)
    actions = state._targets(obs.bucket)
    state.apply(actions)
    reports = state._detect(obs)
    return actions, reports


def write_action_log(path, actions: Sequence[Action]) -> None:
    with open(path, "w") as fh:
        for a in actions:
            fh.write(json.dumps(a.to_dict()) + "\n")
