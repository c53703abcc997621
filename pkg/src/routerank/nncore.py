"""Small differentiable kernels with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` maps the upstream gradient and the cache to input and
parameter gradients.  Arrays are float64.  Sequence tensors are laid out as
``(batch, links, channels)`` with a ``(batch, links)`` 0/1 mask marking real
positions; padded positions are kept at exactly zero.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_CLAMP = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR0 = 0.001
DECAY_RATE = 0.9
DECAY_STEPS = 1000
CHECKPOINT_VERSION = "routerank-ckpt/1"


class ModelParams(dict):
    """Named parameter tensors with a stable flat-vector view (insertion order)."""

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([np.ravel(v) for v in self.values()])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.size}")
        out = ModelParams()
        i = 0
        for k, v in self.items():
            out[k] = vec[i : i + v.size].reshape(v.shape).copy()
            i += v.size
        return out

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- pointwise


def dense_forward(W, b, x):
    """``y = x @ W + b`` over the last axis; ``W`` has shape (in, out)."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (W, x)


def dense_backward(dy, cache):
    W, x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    y = sigmoid(np.asarray(x, dtype=np.float64))
    return y, y


def sigmoid_backward(dy, cache):
    return dy * cache * (1.0 - cache)


# ---------------------------------------------------------------- embeddings


def embed_forward(table, index):
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    return table[index], (table.shape, index)


def embed_backward(dy, cache):
    """Gradient w.r.t. the table: scatter-add of ``dy`` into the looked-up rows."""
    shape, index = cache
    grad = np.zeros(shape)
    np.add.at(grad, index.ravel(), dy.reshape(-1, shape[1]))
    return grad


# ---------------------------------------------------------------- sequence ops


def conv1d_forward(K, bias, x, mask=None):
    """Kernel-3 convolution along the link axis with zero 'same' padding.

    ``K`` has shape (3, C_in, C_out); tap 0 reads link ``i - 1``, tap 1 link
    ``i`` and tap 2 link ``i + 1``.  With a mask, outputs at padded positions
    are zeroed so a padded batch matches per-route evaluation.
    """
    if K.ndim != 3 or K.shape[0] != 3 or x.shape[-1] != K.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, K {K.shape}")
    B, M, C = x.shape
    xp = np.zeros((B, M + 2, C))
    xp[:, 1:-1] = x
    cols = np.concatenate([xp[:, :-2], xp[:, 1:-1], xp[:, 2:]], axis=2)
    y = cols @ K.reshape(3 * C, -1) + bias
    if mask is not None:
        y = y * mask[:, :, None]
    return y, (K, cols, mask)


def conv1d_backward(dy, cache):
    K, cols, mask = cache
    if mask is not None:
        dy = dy * mask[:, :, None]
    C = K.shape[1]
    dy2 = dy.reshape(-1, dy.shape[-1])
    dK = (cols.reshape(-1, cols.shape[-1]).T @ dy2).reshape(K.shape)
    db = dy2.sum(axis=0)
    dcols = dy @ K.reshape(3 * C, -1).T
    dx = dcols[:, :, C : 2 * C].copy()
    dx[:, :-1] += dcols[:, 1:, :C]  # tap 0 of output i reads input i - 1
    dx[:, 1:] += dcols[:, :-1, 2 * C :]
    return dx, dK, db


def residual_block_forward(p, x, mask=None):
    """``y = shortcut(x) + conv2(relu(conv1(x)))``.

    ``p`` holds ``K1, b1, K2, b2`` and, when channel counts differ, a
    pointwise projection ``Ws, bs`` for the shortcut.
    """
    h1, c1 = conv1d_forward(p["K1"], p["b1"], x, mask)
    a1, cr = relu_forward(h1)
    h2, c2 = conv1d_forward(p["K2"], p["b2"], a1, mask)
    if "Ws" in p:
        sc, cs = dense_forward(p["Ws"], p["bs"], x)
        if mask is not None:
            sc = sc * mask[:, :, None]
    else:
        sc, cs = x, None
    return sc + h2, (c1, cr, c2, cs, mask)


def residual_block_backward(dy, cache):
    c1, cr, c2, cs, mask = cache
    grads = {}
    da1, grads["K2"], grads["b2"] = conv1d_backward(dy, c2)
    dh1 = relu_backward(da1, cr)
    dx, grads["K1"], grads["b1"] = conv1d_backward(dh1, c1)
    if cs is not None:
        dsc = dy * mask[:, :, None] if mask is not None else dy
        dxs, grads["Ws"], grads["bs"] = dense_backward(dsc, cs)
        dx = dx + dxs
    else:
        dx = dx + dy
    return dx, grads


def blocks_for_depth(depth: int) -> int:
    """Basic residual blocks for a nominal depth (``depth = 6 n + 2``)."""
    if depth not in (20, 50):
        raise ValueError(f"unsupported resnet depth {depth}; expected 20 or 50")
    return (depth - 2) // 6


def receptive_field(depth: int, kernel: int = 3) -> int:
    """Links seen by one output position: two kernel-3 convs per block."""
    return 2 * blocks_for_depth(depth) * (kernel - 1) + 1


def sum_pool_forward(x, mask):
    """Masked sum over the sequence axis: (B, M, C) -> (B, C).

    Values are sorted along the sequence axis before adding, so the result is
    bit-identical under any permutation of the positions.
    """
    if mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape[:2]}")
    return np.sort(x * mask[:, :, None], axis=1).sum(axis=1), mask


def sum_pool_backward(dy, mask):
    return dy[:, None, :] * mask[:, :, None]


def cross_forward(W, b, x0, x):
    """One full-rank cross layer: ``x0 * (x @ W + b) + x``."""
    u = x @ W + b
    return x0 * u + x, (W, x0, x, u)


def cross_backward(dy, cache):
    W, x0, x, u = cache
    dx0 = dy * u
    du = dy * x0
    dx = du @ W.T + dy
    return dx0, dx, x.T @ du, du.sum(axis=0)


# ---------------------------------------------------------------- loss


def bce_loss(y_hat, y):
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.shape} vs {y.shape}")
    p = np.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_with_logits(z, y):
    """Loss on sigmoid(z) and its exact gradient w.r.t. the logits ``z``.

    Where the clamp is active the loss is locally constant, so the gradient
    there is zero.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"length mismatch: {z.shape} vs {y.shape}")
    p = sigmoid(z)
    loss = bce_loss(p, y)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = np.where(inside, p - y, 0.0) / z.size
    return loss, grad


# ---------------------------------------------------------------- optimiser


def exp_decay(step: int, lr0: float = LR0, rate: float = DECAY_RATE, decay_steps: int = DECAY_STEPS) -> float:
    """Continuous exponential decay ``lr0 * rate ** (step / decay_steps)``."""
    return lr0 * rate ** (step / decay_steps)


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - ADAM_BETA1**state.t
    c2 = 1.0 - ADAM_BETA2**state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------- gradient checking


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4, indices=None) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = None

    @property
    def model_hash(self) -> str:
        return self.params.digest()[:16]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    meta = dict(ckpt.meta)
    meta["version"] = CHECKPOINT_VERSION
    meta["param_names"] = list(ckpt.params)
    meta["param_shapes"] = {k: list(v.shape) for k, v in ckpt.params.items()}
    if ckpt.adam is not None:
        meta["adam_t"] = ckpt.adam.t
        arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam.v.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = ModelParams((k, z[f"param/{k}"].astype(np.float64)) for k in meta["param_names"])
        adam = None
        if "adam_t" in meta:
            adam = AdamState(
                ModelParams((k, z[f"adam_m/{k}"]) for k in meta["param_names"]),
                ModelParams((k, z[f"adam_v/{k}"]) for k in meta["param_names"]),
                int(meta["adam_t"]),
            )
    for k, shape in meta["param_shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"shape mismatch for {k}")
    return Checkpoint(params, meta, adam)


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
