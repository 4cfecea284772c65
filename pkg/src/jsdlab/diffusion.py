"""Conditional epsilon-prediction model for the toy mixture, and its samplers.

Any object with a ``predict_noise(x_t, t, label)`` method can stand in for
the trained network below (see ``PointMassOracle`` and ``MixtureOracle``),
which is how the samplers and distillation engines are checked against
closed-form scores.

DDIM recurrence used both ways (``a`` the current level, ``b`` the next)::

    eps  = eps_hat(x_a, a)
    x0   = (x_a - sigma_a * eps) / alpha_a
    x_b  = alpha_b * x0 + sigma_b * eps

Inversion walks ``b > a`` along ``floor(linspace(0, t, n + 1))``; the reverse
chain walks the same grid back down. A clean point is treated as living at
level 0 (``alpha_0 = sqrt(1 - 1e-4)``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    AdamState,
    MLP,
    NonFiniteError,
    adam_step,
    cosine_lr,
    load_arrays,
    mlp_arrays,
    mlp_from_arrays,
    mlp_layout,
    save_arrays,
)
from .schedule import NoiseSchedule, diffuse
from .toy_data import GaussianMixture

log = logging.getLogger(__name__)

NUM_CLASSES = 8
NULL_LABEL = NUM_CLASSES


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    base_lr: float = 1e-3
    null_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.null_dropout < 1:
            raise ValueError("null_dropout must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("epochs, batch_size and base_lr must be positive")


@dataclass
class GuidedPrediction:
    eps_hat: np.ndarray
    eps_cond: np.ndarray
    eps_uncond: np.ndarray
    scale: float


def _labels(label, n):
    if label is None:
        return np.full(n, NULL_LABEL, dtype=np.int64)
    lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
    if np.any(lab < 0) or np.any(lab > NULL_LABEL):
        raise ValueError(f"label outside [0, {NULL_LABEL}]")
    return lab


class ScoreModel:
    """time MLP + class embedding table (row 8 is the null class) + trunk MLP."""

    def __init__(self, time_embed: MLP, class_table: np.ndarray, trunk: MLP, T: int, seed=None):
        if class_table.shape[0] != NUM_CLASSES + 1:
            raise ValueError("class table needs 8 class rows plus a null row")
        if trunk.out_dim != 2:
            raise ValueError("trunk must output a 2D noise prediction")
        if trunk.in_dim != 2 + time_embed.out_dim + class_table.shape[1]:
            raise ValueError("trunk input width does not match the embeddings")
        self.time_embed = time_embed
        self.class_table = class_table
        self.trunk = trunk
        self.T = T
        self.seed = seed

    @classmethod
    def create(cls, T=1000, hidden=128, n_hidden=3, time_dim=32, class_dim=16, seed=0, zero_output=False):
        rng = np.random.default_rng(seed)
        s_time, s_trunk = rng.integers(0, 2**63, size=2)
        time_embed = MLP.build([1, time_dim, time_dim], seed=int(s_time), layer_norm=False)
        table = rng.uniform(-1.0, 1.0, size=(NUM_CLASSES + 1, class_dim))
        trunk = MLP.build(
            [2 + time_dim + class_dim] + [hidden] * n_hidden + [2],
            seed=int(s_trunk), zero_last=zero_output,
        )
        return cls(time_embed, table, trunk, T, seed=seed)

    def parameters(self):
        return self.time_embed.parameters() + [self.class_table] + self.trunk.parameters()

    def touch(self):
        self.time_embed.touch()
        self.trunk.touch()

    def _forward(self, x, t, label):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xs = x[None] if single else x
        n = len(xs)
        t = np.broadcast_to(np.asarray(t), (n,))
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T})")
        lab = _labels(label, n)
        temb, tcache = self.time_embed.forward((t / self.T)[:, None].astype(np.float64))
        inp = np.concatenate([xs, temb, self.class_table[lab]], axis=1)
        out, ccache = self.trunk.forward(inp)
        return out, single, (tcache, ccache, lab)

    def predict_noise(self, x_t, t, label=None):
        out, single, _ = self._forward(x_t, t, label)
        return out[0] if single else out

    def loss_and_grads(self, x_t, t, label, target):
        """Mean over the batch of ||eps_pred - target||^2, with parameter gradients."""
        out, _, (tcache, ccache, lab) = self._forward(x_t, t, label)
        diff = out - target
        n = len(out)
        loss = float((diff * diff).sum() / n)
        trunk_g = self.trunk.backward(ccache, 2.0 * diff / n)
        gin = trunk_g.input_grad
        tdim = self.time_embed.out_dim
        time_g = self.time_embed.backward(tcache, gin[:, 2 : 2 + tdim])
        table_g = np.zeros_like(self.class_table)
        np.add.at(table_g, lab, gin[:, 2 + tdim :])
        return loss, time_g.grads + [table_g] + trunk_g.grads

    # -- persistence --

    def save(self, path, header=None):
        arrays = {
            **mlp_arrays(self.time_embed, "time."),
            **mlp_arrays(self.trunk, "trunk."),
            "class_table": self.class_table,
        }
        meta = {
            "T": self.T,
            "seed": self.seed,
            "time_layers": mlp_layout(self.time_embed),
            "trunk_layers": mlp_layout(self.trunk),
            **(header or {}),
        }
        return save_arrays(path, "score_model", meta, arrays)

    @classmethod
    def load(cls, path):
        meta, arrays = load_arrays(path, "score_model")
        model = cls(
            mlp_from_arrays(meta["time_layers"], arrays, prefix="time."),
            arrays["class_table"],
            mlp_from_arrays(meta["trunk_layers"], arrays, prefix="trunk."),
            meta["T"],
            seed=meta.get("seed"),
        )
        return model, meta


def predict_noise(model, x_t, t, label=None):
    return model.predict_noise(x_t, t, label)


def cfg_predict(model, x_t, t, label, scale: float) -> GuidedPrediction:
    """eps_uncond + scale * (eps_cond - eps_uncond).

    Scales 0 and 1 return the raw unconditional / conditional prediction
    unchanged so the collapse cases hold bit-for-bit.
    """
    if label is None or np.any(np.asarray(label) == NULL_LABEL):
        raise ValueError("guided prediction needs a class label, not the null class")
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    cond = model.predict_noise(x_t, t, label)
    uncond = model.predict_noise(x_t, t, None)
    if scale == 1:
        eps_hat = cond.copy()
    elif scale == 0:
        eps_hat = uncond.copy()
    else:
        eps_hat = uncond + scale * (cond - uncond)
    return GuidedPrediction(eps_hat, cond, uncond, scale)


def guided_noise(model, x_t, t, label, scale=None):
    """Raw conditional prediction when ``scale`` is None, otherwise CFG."""
    if scale is None or label is None:
        return model.predict_noise(x_t, t, label)
    return cfg_predict(model, x_t, t, label, scale).eps_hat


@dataclass
class TrainResult:
    model: ScoreModel
    losses: list[float] = field(default_factory=list)


def train(model: ScoreModel, points, labels, sched: NoiseSchedule, config: TrainConfig,
          diagnostic_path=None, progress=None) -> TrainResult:
    """Epsilon-matching MSE with Adam and per-step cosine annealing.

    ``progress`` is called as ``progress(epoch, mean_loss)`` after each epoch.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(points)
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    per_epoch = -(-n // config.batch_size)
    total = config.epochs * per_epoch
    params = model.parameters()
    state = AdamState.zeros_like(params)
    losses = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        acc = 0.0
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            x0 = points[idx]
            t = rng.integers(0, sched.T, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            drop = rng.random(len(idx)) < config.null_dropout
            lab = np.where(drop, NULL_LABEL, labels[idx])
            x_t = diffuse(x0, t, eps, sched)
            loss, grads = model.loss_and_grads(x_t, t, lab, eps)
            if not np.isfinite(loss):
                if diagnostic_path is not None:
                    model.save(diagnostic_path, {"diverged_at_epoch": epoch, "step": step})
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            adam_step(params, grads, state, cosine_lr(step, total, config.base_lr))
            model.touch()
            acc += loss * len(idx)
            step += 1
        losses.append(acc / n)
        if progress is not None:
            progress(epoch, losses[-1])
    return TrainResult(model, losses)


def ancestral_sample(model, sched: NoiseSchedule, n: int, label, rng, scale=None):
    """DDPM reverse chain from x_T ~ N(0, I), posterior variance, no noise at t=0."""
    if n == 0:
        return np.zeros((0, 2))
    x = rng.standard_normal((n, 2))
    for t in range(sched.T - 1, -1, -1):
        eps = guided_noise(model, x, t, label, scale)
        beta = sched.betas[t]
        x = (x - beta / sched.sigma_t[t] * eps) / np.sqrt(1.0 - beta)
        if t > 0:
            var = beta * (1.0 - sched.alpha_bars[t - 1]) / (1.0 - sched.alpha_bars[t])
            x = x + np.sqrt(var) * rng.standard_normal((n, 2))
    return x


def ddim_grid(t_target, n_steps: int):
    """Integer sub-timesteps ``floor(linspace(0, t_target, n_steps + 1))``.

    ``t_target`` may be an array, giving one grid per row.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = np.asarray(t_target, dtype=np.float64)
    frac = np.linspace(0.0, 1.0, n_steps + 1)
    grid = np.floor(t[..., None] * frac + 1e-9).astype(np.int64)
    grid[..., -1] = np.asarray(t_target, dtype=np.int64)
    if np.any(np.diff(grid, axis=-1) <= 0):
        raise ValueError(f"t_target {t_target} too small for {n_steps} distinct DDIM steps")
    return grid


def _ddim_move(model, sched, x, a, b, label, scale):
    eps = guided_noise(model, x, a, label, scale)
    x0 = (x - sched.sigma_t[a][..., None] * eps) / sched.alpha_t[a][..., None]
    return sched.alpha_t[b][..., None] * x0 + sched.sigma_t[b][..., None] * eps


def _per_row(x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None] if single else x
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (len(xs),))
    return xs, t, single


def ddim_invert(model, sched: NoiseSchedule, x0, t_target, label, n_steps=10, scale=None):
    xs, t, single = _per_row(x0, t_target)
    sched.check_t(t)
    out = xs.copy()
    move = t > 0
    if np.any(move):
        grid = ddim_grid(t[move], n_steps)
        x = xs[move]
        lab = label if label is None or np.ndim(label) == 0 else np.asarray(label)[move]
        for k in range(n_steps):
            x = _ddim_move(model, sched, x, grid[:, k], grid[:, k + 1], lab, scale)
        out[move] = x
    return out[0] if single else out


def ddim_reverse(model, sched: NoiseSchedule, x_t, t, label, n_steps=10, scale=None):
    """Deterministic DDIM chain from ``t`` down to level 0 on the inversion grid."""
    xs, t, single = _per_row(x_t, t)
    sched.check_t(t)
    out = xs.copy()
    move = t > 0
    if np.any(move):
        grid = ddim_grid(t[move], n_steps)
        x = xs[move]
        lab = label if label is None or np.ndim(label) == 0 else np.asarray(label)[move]
        for k in range(n_steps, 0, -1):
            x = _ddim_move(model, sched, x, grid[:, k], grid[:, k - 1], lab, scale)
        out[move] = x
    return out[0] if single else out


def reverse_denoise(model, sched: NoiseSchedule, x_t, t, label, scale=None, eps=None):
    """One-shot clean estimate ``(x_t - sigma_t * eps_hat) / alpha_t``.

    Pass ``eps`` to reuse a prediction already computed at ``(x_t, t)``.
    """
    t = sched.check_t(t)
    if eps is None:
        eps = guided_noise(model, x_t, t, label, scale)
    a = sched.alpha_t[t]
    s = sched.sigma_t[t]
    if np.ndim(a):
        a, s = a[:, None], s[:, None]
    return (np.asarray(x_t) - s * eps) / a


# -- closed-form scores -------------------------------------------------------


class PointMassOracle:
    """Exact noise for data concentrated at ``x0``: ``(x_t - alpha_t x0) / sigma_t``."""

    def __init__(self, x0, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def predict_noise(self, x_t, t, label=None):
        t = self.sched.check_t(t)
        a, s = self.sched.alpha_t[t], self.sched.sigma_t[t]
        if np.ndim(a):
            a, s = a[:, None], s[:, None]
        return (np.asarray(x_t) - a * self.x0) / s


class MixtureOracle:
    """Exact epsilon-prediction for the noised Gaussian mixture.

    Conditional on class y the noised density is N(alpha_t mu_y, (alpha_t^2 s^2 + sigma_t^2) I),
    so eps* = sigma_t (x - alpha_t mu_y) / (alpha_t^2 s^2 + sigma_t^2). The null label
    mixes the eight components with their posterior weights.
    """

    def __init__(self, mixture: GaussianMixture, sched: NoiseSchedule):
        self.mixture = mixture
        self.sched = sched

    def predict_noise(self, x_t, t, label=None):
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 1
        xs = x[None] if single else x
        n = len(xs)
        t = np.broadcast_to(self.sched.check_t(t), (n,))
        a = self.sched.alpha_t[t][:, None]
        s = self.sched.sigma_t[t][:, None]
        var = a**2 * self.mixture.std**2 + s**2
        mus = self.mixture.centers
        lab = _labels(label, n)
        cond = s * (xs - a * mus[np.minimum(lab, NUM_CLASSES - 1)]) / var
        if np.any(lab == NULL_LABEL):
            diff = xs[:, None, :] - a[:, None] * mus[None]
            logw = -(diff**2).sum(-1) / (2 * var)
            w = np.exp(logw - logw.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            uncond = s * (w[:, :, None] * diff).sum(1) / var
            cond = np.where((lab == NULL_LABEL)[:, None], uncond, cond)
        return cond[0] if single else cond


