"""Small dense networks with hand-written reverse mode, Adam and cosine annealing.

Everything runs in float64. A network is a stack of blocks; each block is a
dense layer optionally followed by LayerNorm and a ReLU, in that order.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "jsdlab-arrays"
CHECKPOINT_VERSION = 1

_net_ids = count()


class NonFiniteError(ArithmeticError):
    """Raised when a gradient or loss stops being finite."""


class CheckpointError(ValueError):
    """Checkpoint file is missing, corrupted or of the wrong kind."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class LayerNormParams:
    gain: np.ndarray
    shift: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("LayerNorm epsilon must be positive")
        if self.gain.shape != self.shift.shape:
            raise ValueError("LayerNorm gain/shift shapes differ")


@dataclass
class Block:
    dense: DenseLayer
    norm: LayerNormParams | None = None
    relu: bool = False


@dataclass
class GradientBundle:
    """Gradients in the same order as ``MLP.parameters()``."""

    grads: list[np.ndarray]
    input_grad: np.ndarray | None = None

    def __iter__(self):
        return iter(self.grads)

    def __len__(self):
        return len(self.grads)


@dataclass
class ForwardCache:
    net_id: int
    version: int
    squeeze: bool
    inputs: list = field(default_factory=list)  # per-block tuples


def layer_norm(x, params: LayerNormParams):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xhat = xc * inv
    return xhat * params.gain + params.shift, xhat, inv


class MLP:
    def __init__(self, blocks: list[Block], seed: int | None = None):
        for a, b in zip(blocks, blocks[1:]):
            if a.dense.out_dim != b.dense.in_dim:
                raise ValueError(
                    f"layer dims do not compose: {a.dense.out_dim} -> {b.dense.in_dim}"
                )
        self.blocks = blocks
        self.seed = seed
        self.version = 0
        self._id = next(_net_ids)

    @classmethod
    def build(cls, sizes, seed, layer_norm=True, zero_last=False):
        """Hidden blocks are dense -> LayerNorm -> ReLU; the last layer is plain dense.

        Weights are uniform in +-sqrt(1/fan_in), biases zero.
        """
        rng = np.random.default_rng(seed)
        blocks = []
        n = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            last = i == n - 1
            if last and zero_last:
                w = np.zeros_like(w)
            dense = DenseLayer(w, np.zeros(fan_out))
            norm = None
            if not last and layer_norm:
                norm = LayerNormParams(np.ones(fan_out), np.zeros(fan_out))
            blocks.append(Block(dense, norm, relu=not last))
        return cls(blocks, seed=seed)

    @property
    def in_dim(self):
        return self.blocks[0].dense.in_dim

    @property
    def out_dim(self):
        return self.blocks[-1].dense.out_dim

    def parameters(self) -> list[np.ndarray]:
        params = []
        for b in self.blocks:
            params += [b.dense.weights, b.dense.bias]
            if b.norm is not None:
                params += [b.norm.gain, b.norm.shift]
        return params

    def parameter_names(self) -> list[str]:
        names = []
        for i, b in enumerate(self.blocks):
            names += [f"block{i}.weights", f"block{i}.bias"]
            if b.norm is not None:
                names += [f"block{i}.gain", f"block{i}.shift"]
        return names

    def touch(self):
        """Mark parameters as changed; caches from earlier forwards become stale."""
        self.version += 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        cache = ForwardCache(self._id, self.version, squeeze)
        h = x
        for b in self.blocks:
            z = h @ b.dense.weights.T + b.dense.bias
            xhat = inv = None
            if b.norm is not None:
                z, xhat, inv = layer_norm(z, b.norm)
            a = np.maximum(z, 0.0) if b.relu else z
            cache.inputs.append((h, xhat, inv, z))
            h = a
        return (h[0] if squeeze else h), cache

    __call__ = forward

    def backward(self, cache: ForwardCache, output_grad) -> GradientBundle:
        if cache.net_id != self._id or cache.version != self.version:
            raise RuntimeError("forward cache does not belong to this network state")
        g = np.asarray(output_grad, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        per_block = []
        for b, (h, xhat, inv, z) in zip(reversed(self.blocks), reversed(cache.inputs)):
            if b.relu:
                g = g * (z > 0)
            grads = []
            if b.norm is not None:
                grads = [(g * xhat).sum(axis=0), g.sum(axis=0)]
                gx = g * b.norm.gain
                g = inv * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            grads = [g.T @ h, g.sum(axis=0)] + grads
            per_block.append(grads)
            g = g @ b.dense.weights
        flat = [arr for grads in reversed(per_block) for arr in grads]
        return GradientBundle(flat, g[0] if cache.squeeze else g)


def forward(net: MLP, x):
    return net.forward(x)


def backward(net: MLP, cache: ForwardCache, output_grad) -> GradientBundle:
    return net.backward(cache, output_grad)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls(
            [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw
        )


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError("gradient count does not match parameter count")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(
                f"param {i}: {bad} non-finite gradient entries at Adam step {state.step_count + 1}"
            )
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# -- checkpoints ------------------------------------------------------------


def save_arrays(path, kind: str, header: dict, arrays: dict[str, np.ndarray]):
    """Write a ``.npz`` whose ``__header__`` entry is a JSON document.

    The header always carries ``format``, ``version``, ``kind`` and the
    shape of every stored array, so a loader can reject a mismatch before
    touching any data.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        **header,
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, **{k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()})
    return path


def load_arrays(path, kind: str):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["__header__"]).decode())
            if meta.get("format") != CHECKPOINT_FORMAT or meta.get("kind") != kind:
                raise CheckpointError(
                    f"{path}: expected {CHECKPOINT_FORMAT}/{kind}, "
                    f"found {meta.get('format')}/{meta.get('kind')}"
                )
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
            arrays = {k: data[k].copy() for k in meta["shapes"]}
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    for k, shape in meta["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise CheckpointError(f"{path}: array {k} has shape {arrays[k].shape}, header says {shape}")
    return meta, arrays


def mlp_arrays(net: MLP, prefix=""):
    return {prefix + n: p for n, p in zip(net.parameter_names(), net.parameters())}


def mlp_layout(net: MLP):
    return [
        {"in": b.dense.in_dim, "out": b.dense.out_dim,
         "norm": b.norm is not None, "relu": b.relu,
         "epsilon": b.norm.epsilon if b.norm is not None else None}
        for b in net.blocks
    ]


def mlp_from_arrays(layout, arrays, seed=None, prefix=""):
    blocks = []
    for i, spec in enumerate(layout):
        dense = DenseLayer(arrays[f"{prefix}block{i}.weights"], arrays[f"{prefix}block{i}.bias"])
        norm = None
        if spec["norm"]:
            norm = LayerNormParams(
                arrays[f"{prefix}block{i}.gain"], arrays[f"{prefix}block{i}.shift"], spec["epsilon"]
            )
        blocks.append(Block(dense, norm, spec["relu"]))
    return MLP(blocks, seed=seed)


def save_mlp(path, net: MLP):
    return save_arrays(path, "mlp", {"layers": mlp_layout(net), "seed": net.seed}, mlp_arrays(net))


def load_mlp(path) -> MLP:
    meta, arrays = load_arrays(path, "mlp")
    return mlp_from_arrays(meta["layers"], arrays, seed=meta.get("seed"))
