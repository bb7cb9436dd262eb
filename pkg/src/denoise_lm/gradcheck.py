"""Central finite-difference gradient checks for the autodiff ops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients of ``fn``.

    ``fn`` maps input Tensors to an output Tensor of any shape; the output is
    contracted with a fixed random projection to get a scalar.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    proj = np.asarray(rng.standard_normal(out.shape), dtype=np.float64)
    T.reduce_sum(T.mul(out, Tensor(proj))).backward()

    def scalar():
        return float(np.sum(fn(*[Tensor(x) for x in inputs]).data * proj))

    worst = 0.0
    for t, x in zip(tensors, inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(x)
        numeric = numerical_grad(scalar, x, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    shapes: list
    low: float = -2.0
    high: float = 2.0


def _ids(rng, shape, n):
    return rng.integers(0, n, size=shape)


def op_cases(rng: np.random.Generator) -> list[OpCase]:
    """One randomized instance of every differentiable op."""
    ids = _ids(rng, (3, 4), 6)
    targets = _ids(rng, (5,), 7)
    positions = rng.choice(5, size=3, replace=False)
    labels = rng.integers(0, 2, size=6)
    drop_seed = int(rng.integers(1 << 31))
    return [
        OpCase("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
        OpCase("add_bias", lambda a, b: T.add(a, b), [(2, 3, 4), (4,)]),
        OpCase("sub", lambda a, b: T.sub(a, b), [(3, 4), (3, 4)]),
        OpCase("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)]),
        OpCase("scale", lambda a: T.mul(a, -1.7), [(3, 4)]),
        OpCase("exp", lambda a: T.exp(a), [(3, 4)]),
        OpCase("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
        OpCase("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (2, 4, 5)]),
        OpCase("matmul_weight", lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)]),
        OpCase("softmax", lambda a: T.softmax(a, axis=-1), [(2, 5)]),
        OpCase("softmax_axis0", lambda a: T.softmax(a, axis=0), [(4, 3)]),
        OpCase("log_softmax", lambda a: T.log_softmax(a, axis=-1), [(2, 5)]),
        OpCase("layer_norm", lambda x, g, b: T.layer_norm(x, g, b, 1e-5), [(3, 6), (6,), (6,)]),
        OpCase("gelu", lambda a: T.gelu(a), [(3, 4)]),
        # kink at 0 has measure zero for uniform inputs; keep away from it
        OpCase("relu", lambda a: T.relu(T.add(T.mul(a, a), 0.1 - 2.0)), [(3, 4)]),
        OpCase("embedding", lambda t: T.embedding(t, ids), [(6, 3)]),
        OpCase("dropout", lambda a: T.dropout(a, 0.3, np.random.default_rng(drop_seed)), [(3, 4)]),
        OpCase("reshape", lambda a: T.reshape(a, (4, 3)), [(3, 4)]),
        OpCase("transpose", lambda a: T.transpose(a, (1, 2, 0)), [(2, 3, 4)]),
        OpCase("take", lambda a: T.take(a, 1, axis=1), [(2, 3, 4)]),
        OpCase("reduce_sum", lambda a: T.reduce_sum(a, axis=1), [(3, 4)]),
        OpCase("reduce_mean", lambda a: T.reduce_mean(a), [(3, 4)]),
        OpCase("cross_entropy", lambda z: T.cross_entropy(z, targets, positions), [(5, 7)]),
        OpCase("bce_with_logits", lambda z: T.binary_cross_entropy_with_logits(z, labels), [(6,)]),
    ]


def run_suite(instances: int = 20, seed: int = 0, h: float = 1e-5):
    """Yield ``(op name, worst relative error)`` over ``instances`` random draws per op."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for case in op_cases(rng):
            inputs = [rng.uniform(case.low, case.high, size=s) for s in case.shapes]
            err = check(case.fn, inputs, h=h, seed=int(rng.integers(1 << 31)))
            worst[case.name] = max(worst.get(case.name, 0.0), err)
    return worst
