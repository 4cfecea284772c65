"""Discrete divergences and the GAN optimal-discriminator identity.

Natural log throughout. Terms with p(x) = 0 contribute nothing; KL is +inf
when q(x) = 0 < p(x).
"""

from __future__ import annotations

import math

import numpy as np

EPS_CLAMP = 1e-12
LN2 = math.log(2.0)
LN4 = math.log(4.0)


class DiscreteDist(np.ndarray):
    """A probability vector; construction checks nonnegativity and unit mass."""

    def __new__(cls, probs):
        arr = np.asarray(probs, dtype=np.float64).view(cls)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("distribution must be a nonempty vector")
        if np.any(arr < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(float(arr.sum()) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {float(arr.sum())!r}, not 1")
        return arr


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")
    return p, q


def kl(p, q) -> float:
    p, q = _pair(p, q)
    live = p > 0
    if np.any(q[live] == 0):
        return math.inf
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


def jeffreys(p, q) -> float:
    return kl(p, q) + kl(q, p)


def jsd(p, q) -> float:
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def gjsd(p, q) -> float:
    """JSD with the renormalized geometric mean sqrt(p q) / Z as the mixture."""
    p, q = _pair(p, q)
    g = np.sqrt(p * q)
    z = g.sum()
    if z == 0:
        raise ValueError("geometric mixture has no mass: supports are disjoint")
    g = g / z
    return 0.5 * kl(p, g) + 0.5 * kl(q, g)


def optimal_discriminator(p, q):
    """D* = p / (p + q), clamped to [EPS_CLAMP, 1 - EPS_CLAMP].

    Points where both masses vanish are left as NaN; every consumer here
    weights them by zero mass and skips them.
    """
    p, q = _pair(p, q)
    tot = p + q
    d = np.full_like(p, np.nan)
    live = tot > 0
    d[live] = p[live] / tot[live]
    return np.where(live, np.clip(d, EPS_CLAMP, 1.0 - EPS_CLAMP), np.nan)


def gan_value(p, q, D) -> float:
    """sum p ln D + sum q ln(1 - D), D clamped away from 0 and 1."""
    p, q = _pair(p, q)
    D = np.asarray(D, dtype=np.float64)
    live = (p + q) > 0
    Dc = np.clip(D[live], EPS_CLAMP, 1.0 - EPS_CLAMP)
    return float(np.sum(p[live] * np.log(Dc)) + np.sum(q[live] * np.log1p(-Dc)))


def approx_jsd_objective(p, q) -> float:
    """Non-saturating generator loss E_q[-ln D*] at the optimal discriminator.

    ``p`` is the target (data) side, ``q`` the generator side.
    """
    p, q = _pair(p, q)
    D = optimal_discriminator(p, q)
    live = q > 0
    return float(np.sum(q[live] * -np.log(D[live])))


SWEEP_COLUMNS = ("a", "kl", "jd", "jsd", "gjsd", "approx")


def divergence_sweep(n_points=100):
    """Rows ``(a, kl, jd, jsd, gjsd, approx)`` on p = (a, 1-a), q = (1-a, a).

    At a in {0, 1} the supports are disjoint: kl, jd and gjsd are reported
    as +inf.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    return [sweep_row(a) for a in np.linspace(0.0, 1.0, n_points)]


def sweep_row(a):
    a = float(a)
    p = np.array([a, 1.0 - a])
    q = np.array([1.0 - a, a])
    try:
        g = gjsd(p, q)
    except ValueError:
        g = math.inf
    return (a, kl(p, q), jeffreys(p, q), jsd(p, q), g, approx_jsd_objective(p, q))
