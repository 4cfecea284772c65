"""Particle score distillation: SDS and the minority-sampling JSD estimator.

The particle is a 2D point and rendering is the identity, so the Jacobian
d x0 / d theta drops out and the score difference is the gradient itself.

Both engines are written over a batch of independent particles (one row
per seed). Each seed owns its generator and draws, per step, ``t`` first and
then one 2D standard normal, so SDS and JSD runs with the same seed see the
same ``t`` sequence and the same noise stream.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import cfg_predict, ddim_invert, reverse_denoise
from .nn import AdamState, NonFiniteError, adam_step
from .schedule import WEIGHTINGS, NoiseSchedule, diffuse, weight
from .toy_data import GaussianMixture, nearest_mode

SCHEMA_VERSION = 1
METHODS = ("sds", "jsd")
SEED_CHUNK = 25


@dataclass
class DistillConfig:
    method: str = "jsd"
    steps: int = 10
    lr: float = 0.03
    guidance_scale: float = 1.0
    t_min: int = 20
    t_max: int = 980
    weighting: str = "unit"
    ratio_weight: bool = True  # alpha_t / sigma_t factor on the JSD gradient
    inversion_steps: int = 10
    guided_inversion: bool = True
    label: int | None = None  # None: class nearest the start point
    seed: int = 0

    def validate(self, T: int):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 <= self.t_min < self.t_max < T:
            raise ValueError(f"need 0 <= t_min < t_max < {T}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.method == "jsd" and self.t_min < self.inversion_steps:
            raise ValueError("t_min must be >= inversion_steps for a strictly increasing DDIM grid")
        if self.label is not None and not 0 <= self.label < 8:
            raise ValueError("label must be a class index in [0, 8)")
        return self


@dataclass
class Particle:
    theta: np.ndarray
    adam: AdamState

    @classmethod
    def at(cls, start):
        theta = np.array(start, dtype=np.float64)
        return cls(theta, AdamState.zeros_like([theta]))


class DistillationAborted(NonFiniteError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass
class StepTerms:
    """What one engine step produced for a batch of particles."""

    t: np.ndarray
    eps_main: np.ndarray
    control_variate: np.ndarray
    weight: np.ndarray
    ratio: np.ndarray
    gradient: np.ndarray
    x_hat_t: np.ndarray
    x_bar_0: np.ndarray | None = None
    x_bar_t: np.ndarray | None = None


def combine(eps_main, control_variate, w, ratio):
    """The gradient both engines record: ``w * ratio * (eps_main - control_variate)``."""
    return (np.asarray(w) * np.asarray(ratio))[..., None] * (eps_main - control_variate)


def _inversion_scale(config):
    return config.guidance_scale if config.guided_inversion else None


def sds_terms(theta, t, eps, model, sched, config, label) -> StepTerms:
    x_hat_t = diffuse(theta, t, eps, sched)
    eps_main = cfg_predict(model, x_hat_t, t, label, config.guidance_scale).eps_hat
    w = weight(t, config.weighting, sched)
    ratio = np.ones_like(w)
    return StepTerms(t, eps_main, eps, w, ratio, combine(eps_main, eps, w, ratio), x_hat_t)


@dataclass
class MinoritySample:
    x_hat_t: np.ndarray
    eps_hat: np.ndarray  # guided prediction at (x_hat_t, t)
    x_bar_0: np.ndarray
    x_bar_t: np.ndarray


def minority_sample(model, sched: NoiseSchedule, theta, t, label, config: DistillConfig,
                    rng=None, eps_fresh=None) -> MinoritySample:
    """DDIM-invert theta to t, denoise in one shot, then re-diffuse with fresh noise."""
    if eps_fresh is None:
        eps_fresh = rng.standard_normal(np.shape(theta))
    x_hat_t = ddim_invert(model, sched, theta, t, label, config.inversion_steps, _inversion_scale(config))
    eps_hat = cfg_predict(model, x_hat_t, t, label, config.guidance_scale).eps_hat
    x_bar_0 = reverse_denoise(model, sched, x_hat_t, t, label, eps=eps_hat)
    x_bar_t = diffuse(x_bar_0, t, eps_fresh, sched)
    return MinoritySample(x_hat_t, eps_hat, x_bar_0, x_bar_t)


def jsd_terms(theta, t, eps, model, sched, config, label) -> StepTerms:
    ms = minority_sample(model, sched, theta, t, label, config, eps_fresh=eps)
    cv = cfg_predict(model, ms.x_bar_t, t, label, config.guidance_scale).eps_hat
    w = weight(t, config.weighting, sched)
    if config.ratio_weight:
        ratio = sched.alpha_t[t] / sched.sigma_t[t]
    else:
        ratio = np.ones_like(w)
    return StepTerms(
        t, ms.eps_hat, cv, w, ratio, combine(ms.eps_hat, cv, w, ratio), ms.x_hat_t, ms.x_bar_0, ms.x_bar_t
    )


ENGINES = {"sds": sds_terms, "jsd": jsd_terms}


def _draw(rng, config):
    t = int(rng.integers(config.t_min, config.t_max + 1))
    return t, rng.standard_normal(2)


def _apply(particle: Particle, terms: StepTerms, config):
    if not np.all(np.isfinite(terms.gradient)):
        raise NonFiniteError("non-finite distillation gradient")
    adam_step([particle.theta], [terms.gradient], particle.adam, config.lr)


def sds_step(particle: Particle, model, sched, config: DistillConfig, rng, label=None):
    t, eps = _draw(rng, config)
    terms = sds_terms(particle.theta, t, eps, model, sched, config, _label(config, particle.theta, label))
    _apply(particle, terms, config)
    return terms.gradient, terms


def jsd_step(particle: Particle, model, sched, config: DistillConfig, rng, label=None):
    t, eps = _draw(rng, config)
    terms = jsd_terms(particle.theta, t, eps, model, sched, config, _label(config, particle.theta, label))
    _apply(particle, terms, config)
    return terms.gradient, terms


def _label(config, start, label=None, mixture=None):
    if label is not None:
        return label
    if config.label is not None:
        return config.label
    return nearest_mode(mixture or GaussianMixture(), np.asarray(start, dtype=np.float64))[0]


@dataclass
class TrajectoryRecord:
    method: str
    start: tuple
    seed: int
    label: int
    config: dict
    theta_before: np.ndarray
    theta_after: np.ndarray
    t: np.ndarray
    eps_main: np.ndarray
    control_variate: np.ndarray
    weight: np.ndarray
    ratio: np.ndarray
    gradient: np.ndarray
    x_hat_t: np.ndarray
    x_bar_0: np.ndarray | None = None
    x_bar_t: np.ndarray | None = None
    terminal_mode: int = -1
    terminal_distance: float = float("nan")

    def __len__(self):
        return len(self.t)

    @property
    def terminal(self):
        return self.theta_after[-1]

    @property
    def path(self):
        return np.vstack([self.theta_before[:1], self.theta_after])

    def to_jsonl(self) -> str:
        lines = []
        for k in range(len(self)):
            row = {
                "schema_version": SCHEMA_VERSION,
                "method": self.method,
                "start": list(self.start),
                "seed": self.seed,
                "label": self.label,
                "step": k,
                "t": int(self.t[k]),
                "theta_before": self.theta_before[k].tolist(),
                "theta_after": self.theta_after[k].tolist(),
                "eps_main": self.eps_main[k].tolist(),
                "control_variate": self.control_variate[k].tolist(),
                "weight": float(self.weight[k]),
                "ratio": float(self.ratio[k]),
                "gradient": self.gradient[k].tolist(),
                "x_hat_t": self.x_hat_t[k].tolist(),
                "x_bar_0": None if self.x_bar_0 is None else self.x_bar_0[k].tolist(),
                "x_bar_t": None if self.x_bar_t is None else self.x_bar_t[k].tolist(),
                "terminal_mode": self.terminal_mode,
                "terminal_distance": self.terminal_distance,
                "config": self.config,
            }
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("empty trajectory file")
        for r in rows:
            if r.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"unsupported trajectory schema {r.get('schema_version')}")
        rows.sort(key=lambda r: r["step"])
        first = rows[0]

        def arr(key):
            if first[key] is None:
                return None
            return np.array([r[key] for r in rows], dtype=np.float64)

        return cls(
            method=first["method"], start=tuple(first["start"]), seed=first["seed"],
            label=first["label"], config=first["config"],
            theta_before=arr("theta_before"), theta_after=arr("theta_after"),
            t=np.array([r["t"] for r in rows], dtype=np.int64),
            eps_main=arr("eps_main"), control_variate=arr("control_variate"),
            weight=arr("weight"), ratio=arr("ratio"), gradient=arr("gradient"),
            x_hat_t=arr("x_hat_t"), x_bar_0=arr("x_bar_0"), x_bar_t=arr("x_bar_t"),
            terminal_mode=first["terminal_mode"], terminal_distance=first["terminal_distance"],
        )

    def filename(self):
        sx, sy = (f"{v:g}" for v in self.start)
        return f"{self.method}_start_{sx}_{sy}_seed_{self.seed:05d}.jsonl"


def _simulate(config: DistillConfig, model, sched: NoiseSchedule, start, seeds, mixture=None):
    """Run ``config.steps`` of one engine for every seed as a single batch."""
    mixture = mixture or GaussianMixture()
    config.validate(sched.T)
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    label = int(_label(config, start, mixture=mixture))
    rngs = [np.random.default_rng(s) for s in seeds]
    theta = np.tile(np.asarray(start, dtype=np.float64), (n, 1))
    adam = AdamState.zeros_like([theta])
    engine = ENGINES[config.method]
    hist = []
    for k in range(config.steps):
        draws = [_draw(r, config) for r in rngs]
        t = np.array([d[0] for d in draws], dtype=np.int64)
        eps = np.array([d[1] for d in draws])
        terms = engine(theta, t, eps, model, sched, config, label)
        before = theta.copy()
        bad = ~np.all(np.isfinite(terms.gradient), axis=1)
        if np.any(bad):
            partial = _records(config, start, seeds, label, hist, mixture)
            raise DistillationAborted(
                f"non-finite gradient at step {k} for seeds {[seeds[i] for i in np.flatnonzero(bad)]}",
                partial,
            )
        adam_step([theta], [terms.gradient], adam, config.lr)
        hist.append((before, theta.copy(), terms))
    return _records(config, start, seeds, label, hist, mixture)


def _records(config, start, seeds, label, hist, mixture):
    if not hist:
        return []
    cfg = asdict(config)

    def stack(get):
        vals = [get(h) for h in hist]
        return None if vals[0] is None else np.stack(vals, axis=1)

    before = stack(lambda h: h[0])
    after = stack(lambda h: h[1])
    fields_ = {
        name: stack(lambda h, name=name: getattr(h[2], name))
        for name in ("t", "eps_main", "control_variate", "weight", "ratio", "gradient",
                     "x_hat_t", "x_bar_0", "x_bar_t")
    }
    modes, dists = nearest_mode(mixture, after[:, -1])
    out = []
    for i, seed in enumerate(seeds):
        out.append(TrajectoryRecord(
            method=config.method, start=tuple(float(v) for v in start), seed=seed, label=label,
            config={**cfg, "seed": seed},
            theta_before=before[i], theta_after=after[i],
            **{k: (None if v is None else v[i]) for k, v in fields_.items()},
            terminal_mode=int(modes[i]), terminal_distance=float(dists[i]),
        ))
    return out


def run_distillation(config: DistillConfig, model, sched: NoiseSchedule, start) -> TrajectoryRecord:
    return _simulate(config, model, sched, start, [config.seed])[0]


def _chunk_job(args):
    return _simulate(*args)


def run_seeds(config: DistillConfig, model, sched: NoiseSchedule, start, seeds, workers=1):
    """Run every seed in fixed-size chunks; results do not depend on ``workers``."""
    seeds = list(seeds)
    chunks = [seeds[i : i + SEED_CHUNK] for i in range(0, len(seeds), SEED_CHUNK)]
    jobs = [(config, model, sched, start, c) for c in chunks]
    if workers <= 1 or len(chunks) == 1:
        results = [_chunk_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chunk_job, jobs))
    return [rec for chunk in results for rec in chunk]


def recompute_gradient(rec: TrajectoryRecord):
    return combine(rec.eps_main, rec.control_variate, rec.weight, rec.ratio)


def inflated_hull_contains(point, centers, margin=0.5):
    """Whether ``point`` lies in the hull of ``centers`` with every edge pushed out by ``margin``."""
    ang = np.arctan2(centers[:, 1], centers[:, 0])
    order = np.argsort(ang)
    poly = centers[order]
    p = np.asarray(point, dtype=np.float64)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        edge = b - a
        normal = np.array([edge[1], -edge[0]]) / math.hypot(*edge)  # outward for CCW order
        if np.dot(p - a, normal) > margin:
            return False
    return True
