"""Central finite-difference checks for the hand-written backward passes.

Every check reduces a layer's output to a scalar through a fixed random
projection ``L = sum(R * f(x))`` so that ``dL/df = R`` is the upstream
gradient fed to the analytic backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries that are zero up to rounding from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


@dataclass
class GradCheck:
    layer: str
    config: dict
    errors: dict  # name -> max relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def _distinct(rng, shape, gap=1e-2):
    # shuffled values with pairwise gaps far above eps, so every pool window has a unique max
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * gap


def check_conv2d(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, k + 4, size=2)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(f, c, k, k))
    b = rng.normal(size=f)
    out, cache = nn.conv2d_forward(x, wt, b, stride, pad)
    r = rng.normal(size=out.shape)
    dx, dw, db = nn.conv2d_backward(r, cache)

    def loss():
        return float(np.sum(r * nn.conv2d_forward(x, wt, b, stride, pad)[0]))

    cfg = dict(x=x.shape, w=wt.shape, stride=stride, pad=pad)
    return GradCheck("conv2d", cfg, {
        "input": rel_error(dx, numeric_grad(loss, x, eps)),
        "weights": rel_error(dw, numeric_grad(loss, wt, eps)),
        "bias": rel_error(db, numeric_grad(loss, b, eps)),
    })


def check_relu(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    shape = tuple(rng.integers(1, 5, size=4))
    x = rng.normal(size=shape)
    # keep inputs away from the kink so the difference quotient is one-sided-free
    x = np.where(np.abs(x) < 10 * eps, 0.5, x)
    out, cache = nn.relu_forward(x)
    r = rng.normal(size=out.shape)
    dx = nn.relu_backward(r, cache)
    return GradCheck("relu", dict(x=shape), {
        "input": rel_error(dx, numeric_grad(lambda: float(np.sum(r * nn.relu_forward(x)[0])), x, eps)),
    })


def check_lrn(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    n = int(rng.choice([1, 3, 5, 7]))
    k = float(rng.uniform(0.5, 3.0))
    alpha = float(10 ** rng.uniform(-4, 0))
    beta = float(rng.uniform(0.25, 1.0))
    x = rng.normal(size=shape)
    out, cache = nn.lrn_forward(x, k, n, alpha, beta)
    r = rng.normal(size=out.shape)
    dx = nn.lrn_backward(r, cache)

    def loss():
        return float(np.sum(r * nn.lrn_forward(x, k, n, alpha, beta)[0]))

    return GradCheck("lrn", dict(x=shape, k=k, n=n, alpha=alpha, beta=beta),
                     {"input": rel_error(dx, numeric_grad(loss, x, eps))})


def check_maxpool(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(1, window + 1))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + tuple(int(v) for v in rng.integers(window, window + 4, size=2))
    x = _distinct(rng, shape).astype(np.float64)
    out, cache = nn.maxpool_forward(x, window, stride)
    r = rng.normal(size=out.shape)
    dx = nn.maxpool_backward(r, cache)

    def loss():
        return float(np.sum(r * nn.maxpool_forward(x, window, stride)[0]))

    return GradCheck("maxpool", dict(x=shape, window=window, stride=stride),
                     {"input": rel_error(dx, numeric_grad(loss, x, eps))})


def check_dense(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    n, d, m = (int(v) for v in rng.integers(1, 8, size=3))
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, m))
    b = rng.normal(size=m)
    out, cache = nn.dense_forward(x, w, b)
    r = rng.normal(size=out.shape)
    dx, dw, db = nn.dense_backward(r, cache)

    def loss():
        return float(np.sum(r * nn.dense_forward(x, w, b)[0]))

    return GradCheck("dense", dict(n=n, d=d, m=m), {
        "input": rel_error(dx, numeric_grad(loss, x, eps)),
        "weights": rel_error(dw, numeric_grad(loss, w, eps)),
        "bias": rel_error(db, numeric_grad(loss, b, eps)),
    })


def check_softmax_xent(rng: np.random.Generator, eps: float = 1e-5) -> GradCheck:
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 12))
    logits = rng.normal(scale=2.0, size=(n, k))
    target = rng.dirichlet(np.ones(k), size=n)
    _, dlogits = nn.softmax_xent_soft(logits, target)
    num = numeric_grad(lambda: nn.softmax_xent_soft(logits, target)[0], logits, eps)
    return GradCheck("softmax_xent_soft", dict(n=n, k=k), {"logits": rel_error(dlogits, num)})


CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "lrn": check_lrn,
    "maxpool": check_maxpool,
    "dense": check_dense,
    "softmax_xent_soft": check_softmax_xent,
}


def run_suite(configs: int = 20, seed: int = 0, eps: float = 1e-5) -> list:
    """Run ``configs`` random configurations of every check; returns the :class:`GradCheck` list."""
    results = []
    for offset, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, offset])
        results.extend(fn(rng, eps) for _ in range(configs))
    return results
