"""Eight-mode 2D Gaussian mixture and nearest-mode assignment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

_S = 1.0 / math.sqrt(2.0)
CENTERS = np.array(
    [
        (1.0, 0.0),
        (-1.0, 0.0),
        (0.0, 1.0),
        (0.0, -1.0),
        (_S, _S),
        (-_S, _S),
        (_S, -_S),
        (-_S, -_S),
    ]
)
TIE_TOL = 1e-12


@dataclass(frozen=True)
class GaussianMixture:
    centers: np.ndarray = field(default_factory=lambda: CENTERS.copy())
    std: float = 0.1

    def __post_init__(self):
        if self.centers.shape != (8, 2):
            raise ValueError("mixture needs exactly 8 two-dimensional centers")
        if not np.allclose(np.linalg.norm(self.centers, axis=1), 1.0, atol=1e-12):
            raise ValueError("mixture centers must lie on the unit circle")
        if not self.std > 0:
            raise ValueError("std must be positive")
        gap = min_center_gap(self.centers)
        if abs(gap - 2 * math.sin(math.pi / 8)) > 1e-12:
            raise ValueError(f"unexpected minimum center gap {gap}")

    @property
    def class_count(self) -> int:
        return len(self.centers)


def min_center_gap(centers) -> float:
    d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    return float(d[~np.eye(len(centers), dtype=bool)].min())


def sample(mixture: GaussianMixture, n: int, rng: np.random.Generator):
    """Uniform class choice, then isotropic noise around the chosen center.

    Returns ``(points, labels)`` with shapes ``(n, 2)`` and ``(n,)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.integers(0, mixture.class_count, size=n)
    points = mixture.centers[labels] + mixture.std * rng.standard_normal((n, 2))
    return points, labels


def nearest_mode(mixture: GaussianMixture, p):
    """Index of and distance to the closest center; exact ties go to the lowest index.

    Accepts one point or an ``(n, 2)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p[None] if single else p
    d = np.linalg.norm(pts[:, None, :] - mixture.centers[None], axis=-1)
    best = d.min(axis=1, keepdims=True)
    # floating noise in the diagonal centers must not break exact geometric ties
    idx = np.argmax(d <= best + TIE_TOL, axis=1)
    dist = d[np.arange(len(pts)), idx]
    if single:
        return int(idx[0]), float(dist[0])
    return idx, dist


def write_csv(path, points, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(points, labels):
            w.writerow([repr(float(x)), repr(float(y)), int(lab)])
