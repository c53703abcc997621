"""Finite-difference gradient checks for every nncore layer.

Each check draws a random instance, projects the layer output onto a random
direction ``w`` to get a scalar, and compares backprop with central
differences (step 1e-4).  ReLU inputs are kept away from the kink so that
the difference quotient never straddles it.
"""

from __future__ import annotations

import numpy as np

from routerank import nncore as nn

EPS = 1e-4
KINK_MARGIN = 1e-2


def _max_error(pairs) -> float:
    return max(nn.relative_error(a, n) for a, n in pairs)


def _check(f, dy_fn, arrays):
    """``f()`` gives the output, ``dy_fn(w)`` the analytic grads (same order as ``arrays``)."""
    out = f()
    w = np.random.default_rng(len(arrays) + out.size).normal(size=out.shape)
    analytic = dy_fn(w)
    loss = lambda: float((f() * w).sum())  # noqa: E731
    return _max_error((a, nn.numeric_grad(loss, arr, EPS)) for a, arr in zip(analytic, arrays))


def check_dense(rng):
    W, b, x = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=(3, 2, 5))
    f = lambda: nn.dense_forward(W, b, x)[0]  # noqa: E731
    return _check(f, lambda w: nn.dense_backward(w, nn.dense_forward(W, b, x)[1]), [x, W, b])


def check_relu(rng):
    x = rng.normal(size=(4, 6))
    x = np.where(np.abs(x) < KINK_MARGIN, KINK_MARGIN * 2, x)
    f = lambda: nn.relu_forward(x)[0]  # noqa: E731
    return _check(f, lambda w: [nn.relu_backward(w, nn.relu_forward(x)[1])], [x])


def check_sigmoid(rng):
    x = rng.normal(0, 3, size=(4, 6))
    f = lambda: nn.sigmoid_forward(x)[0]  # noqa: E731
    return _check(f, lambda w: [nn.sigmoid_backward(w, nn.sigmoid_forward(x)[1])], [x])


def check_embedding(rng):
    table = rng.normal(size=(7, 3))
    idx = rng.integers(0, 7, size=(4, 5))
    f = lambda: nn.embed_forward(table, idx)[0]  # noqa: E731
    return _check(f, lambda w: [nn.embed_backward(w, nn.embed_forward(table, idx)[1])], [table])


def _seq(rng, B=2, M=6, C=3):
    x = rng.normal(size=(B, M, C))
    mask = np.ones((B, M))
    mask[1, int(rng.integers(1, M)) :] = 0.0
    return x, mask


def check_conv1d(rng):
    x, mask = _seq(rng)
    K, b = rng.normal(size=(3, 3, 4)), rng.normal(size=4)
    f = lambda: nn.conv1d_forward(K, b, x, mask)[0]  # noqa: E731
    return _check(f, lambda w: nn.conv1d_backward(w, nn.conv1d_forward(K, b, x, mask)[1]), [x, K, b])


def _kink_safe_block(rng, C_in, C_out):
    while True:
        x, mask = _seq(rng, C=C_in)
        p = {
            "K1": rng.normal(size=(3, C_in, C_out)),
            "b1": rng.normal(size=C_out),
            "K2": rng.normal(size=(3, C_out, C_out)),
            "b2": rng.normal(size=C_out),
        }
        if C_in != C_out:
            p["Ws"], p["bs"] = rng.normal(size=(C_in, C_out)), rng.normal(size=C_out)
        h1 = nn.conv1d_forward(p["K1"], p["b1"], x, mask)[0]
        live = mask[:, :, None] > 0
        if np.abs(h1[np.broadcast_to(live, h1.shape)]).min() > KINK_MARGIN:
            return p, x, mask


def check_residual_block(rng):
    C_out = 3 if rng.random() < 0.5 else 4
    p, x, mask = _kink_safe_block(rng, 3, C_out)
    names = list(p)

    def f():
        return nn.residual_block_forward(p, x, mask)[0]

    def grads(w):
        dx, g = nn.residual_block_backward(w, nn.residual_block_forward(p, x, mask)[1])
        return [dx] + [g[k] for k in names]

    return _check(f, grads, [x] + [p[k] for k in names])


def check_sum_pool(rng):
    x, mask = _seq(rng)
    f = lambda: nn.sum_pool_forward(x, mask)[0]  # noqa: E731
    return _check(f, lambda w: [nn.sum_pool_backward(w, mask)], [x])


def check_cross(rng):
    d = 5
    W, b, x0, x = rng.normal(size=(d, d)), rng.normal(size=d), rng.normal(size=(4, d)), rng.normal(size=(4, d))
    f = lambda: nn.cross_forward(W, b, x0, x)[0]  # noqa: E731
    return _check(f, lambda w: nn.cross_backward(w, nn.cross_forward(W, b, x0, x)[1]), [x0, x, W, b])


def check_bce(rng):
    z = rng.normal(0, 2, size=16)
    y = rng.integers(0, 2, size=16).astype(float)
    _, grad = nn.bce_with_logits(z, y)
    numeric = nn.numeric_grad(lambda: nn.bce_with_logits(z, y)[0], z, EPS)
    return nn.relative_error(grad, numeric)


def check_bce_probabilities(rng):
    """Loss on probabilities, chained through the sigmoid layer."""
    z = rng.normal(0, 2, size=16)
    y = rng.integers(0, 2, size=16).astype(float)
    p, cache = nn.sigmoid_forward(z)
    dp = -(y / p - (1 - y) / (1 - p)) / z.size
    analytic = nn.sigmoid_backward(dp, cache)
    numeric = nn.numeric_grad(lambda: nn.bce_loss(nn.sigmoid(z), y), z, EPS)
    return nn.relative_error(analytic, numeric)


CHECKS = {
    "dense": check_dense,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "embedding": check_embedding,
    "conv1d": check_conv1d,
    "residual_block": check_residual_block,
    "sum_pool": check_sum_pool,
    "cross": check_cross,
    "bce_logits": check_bce,
    "bce_probabilities": check_bce_probabilities,
}


def worst_errors(n_instances: int = 20, seed: int = 0) -> dict[str, float]:
    out = {}
    for name, fn in CHECKS.items():
        rng = np.random.default_rng([seed, len(name)])
        out[name] = max(fn(rng) for _ in range(n_instances))
    return out
