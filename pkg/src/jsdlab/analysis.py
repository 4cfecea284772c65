"""Correlation and mode-coverage statistics over trajectory corpora."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .toy_data import GaussianMixture, nearest_mode


class UndefinedCorrelation(ValueError):
    pass


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two equal-length series of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    r = float(da @ db) / (sa * sb)
    return max(-1.0, min(1.0, r))


@dataclass
class RunCorrelation:
    method: str
    start: tuple
    seed: int
    pooled: float
    x: float
    y: float


@dataclass
class CorrelationReport:
    runs: list[RunCorrelation] = field(default_factory=list)
    summary: dict = field(default_factory=dict)  # method -> (mean, std, n)

    def mean(self, method):
        return self.summary[method][0]


def correlation_report(trajectories) -> CorrelationReport:
    """Per-run Pearson r between eps_main and the control variate.

    ``pooled`` flattens both components of every step; ``x``/``y`` are the
    per-component coefficients (NaN when a component is constant).
    """
    report = CorrelationReport()
    by_method = defaultdict(list)
    for rec in trajectories:
        pooled = pearson(rec.eps_main, rec.control_variate)
        comps = []
        for k in range(2):
            try:
                comps.append(pearson(rec.eps_main[:, k], rec.control_variate[:, k]))
            except UndefinedCorrelation:
                comps.append(math.nan)
        report.runs.append(RunCorrelation(rec.method, tuple(rec.start), rec.seed, pooled, *comps))
        by_method[rec.method].append(pooled)
    for method, vals in sorted(by_method.items()):
        v = np.array(vals)
        report.summary[method] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0, len(v))
    return report


@dataclass
class ModeCoverage:
    histogram: np.ndarray
    distinct_mode_count: int
    entropy: float

    @property
    def total(self):
        return int(self.histogram.sum())


def coverage_from_modes(modes, n_modes=8) -> ModeCoverage:
    hist = np.bincount(np.asarray(modes, dtype=np.int64), minlength=n_modes)
    p = hist[hist > 0] / hist.sum()
    h = float(-(p * np.log(p)).sum()) / math.log(n_modes)
    # exact zero for a single occupied mode, and clip float overshoot at uniform
    h = 0.0 if len(p) == 1 else min(h, 1.0)
    return ModeCoverage(hist, int((hist > 0).sum()), h)


def mode_coverage(trajectories, mixture: GaussianMixture | None = None) -> ModeCoverage:
    """Histogram of terminal nearest modes, normalized entropy by ln 8."""
    mixture = mixture or GaussianMixture()
    pts = np.array([rec.terminal if hasattr(rec, "terminal") else rec for rec in trajectories])
    if len(pts) == 0:
        raise ValueError("no trajectories")
    modes, _ = nearest_mode(mixture, pts.reshape(-1, 2))
    return coverage_from_modes(modes, mixture.class_count)
