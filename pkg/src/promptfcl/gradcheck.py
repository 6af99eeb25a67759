"""Finite-difference verification of every differentiable primitive and the loss composites."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import C2LossParams, c2_loss, cross_entropy, fedprox_term
from .tensor import Tensor

STEP = 1e-5
THRESHOLD = 1e-5
POINTS = 20


@dataclass
class Case:
    """``make(rng)`` returns ``(inputs, fn)``; ``fn(*tensors)`` may be non-scalar."""

    name: str
    make: Callable
    kind: str = "primitive"


@dataclass
class CaseResult:
    name: str
    kind: str
    points: int
    max_error: float

    @property
    def ok(self) -> bool:
        return self.max_error < THRESHOLD


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.results), default=0.0)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def checked(self) -> list:
        return [r.name for r in self.results]

    def render(self) -> str:
        lines = [f"{'case':<20} {'kind':<10} {'points':>6} {'max rel err':>12}  status"]
        for r in self.results:
            lines.append(f"{r.name:<20} {r.kind:<10} {r.points:>6} {r.max_error:>12.3e}  {'ok' if r.ok else 'FAIL'}")
        lines.append(f"max relative error {self.max_error:.3e} (threshold {THRESHOLD:g}) "
                     f"over {len(self.results)} cases in {self.seconds:.2f}s: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def _scalarize(out: Tensor, rng):
    """Contract a non-scalar output with fixed random weights so every output entry is tested."""
    if out.data.size == 1:
        return lambda y: y.reshape(())
    w = rng.normal(size=out.shape)
    return lambda y: (y * Tensor(w)).sum()


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(num / den) if den > 1e-8 else float(num)


def check_point(inputs: list, fn: Callable, rng, step: float = STEP) -> float:
    """Largest norm-wise relative error between analytic and central-difference gradients."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    reduce = _scalarize(out, rng)
    T.backward(reduce(out), leaves)
    worst = 0.0
    with T.no_grad():
        for i, x in enumerate(inputs):
            num = np.zeros_like(x)
            flat, g = x.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                vals = []
                for h in (step, -step):
                    flat[j] = orig + h
                    args = [Tensor(v) for v in inputs]
                    vals.append(reduce(fn(*args)).item())
                flat[j] = orig
                g[j] = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, relative_error(leaves[i].grad, num))
    return worst


def _n(rng, *shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, *shape):
    # keeps relu inputs off the kink, where the derivative is undefined
    x = rng.uniform(0.1, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _interior_c2(rng):
    """A c2 instance whose hinge is strictly active and whose nearest negative is unique."""
    while True:
        shape = (2, 3)
        cur, prev = _n(rng, *shape), _n(rng, *shape)
        others = [_n(rng, *shape) * 2 for _ in range(int(rng.integers(1, 4)))]
        params = C2LossParams(gamma_c2l=float(rng.uniform(0.1, 0.5)), margin=float(rng.uniform(0.5, 1.0)),
                              lambda_c2l=0.5)
        d = sorted(np.linalg.norm(cur - o) for o in others)
        gap = d[1] - d[0] if len(d) > 1 else 1.0
        value = np.linalg.norm(cur - prev) - params.gamma_c2l * d[0] + params.margin
        if value > 0.05 and gap > 0.05:
            return cur, prev, others, params


def _c2_case(rng):
    cur, prev, others, params = _interior_c2(rng)
    return [cur], lambda p: c2_loss(p, prev, others, params)


def _ce_case(rng):
    B, C = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, C, size=B)
    return [_n(rng, B, C)], lambda z: cross_entropy(z, labels)


def _prox_case(rng):
    shapes = [(2, 3), (4,)]
    snap = [_n(rng, *s) for s in shapes]
    mu = float(rng.uniform(0.01, 2.0))
    return [_n(rng, *s) for s in shapes], lambda *ps: fedprox_term(list(ps), snap, mu)


def _getitem_case(rng):
    idx = rng.integers(0, 4, size=5)  # repeated indices exercise accumulation
    return [_n(rng, 4, 3)], lambda a: T.getitem(a, (idx, slice(None)))


def default_cases() -> list:
    P = T.PRIMITIVES
    return [
        Case("matmul", lambda r: ([_n(r, 2, 3, 4), _n(r, 4, 2)], P["matmul"])),
        Case("matmul_batched", lambda r: ([_n(r, 2, 3, 4), _n(r, 2, 4, 2)], P["matmul"])),
        Case("add", lambda r: ([_n(r, 3, 4), _n(r, 4)], P["add"])),
        Case("subtract", lambda r: ([_n(r, 3, 1), _n(r, 3, 4)], P["subtract"])),
        Case("multiply", lambda r: ([_n(r, 2, 3), _n(r, 2, 3)], P["multiply"])),
        Case("scale", lambda r: ([_n(r, 3, 2)], lambda a: P["scale"](a, 1.7))),
        Case("concat", lambda r: ([_n(r, 2, 3), _n(r, 1, 3)], lambda a, b: P["concat"](a, b, axis=0))),
        Case("softmax", lambda r: ([_n(r, 3, 4)], lambda a: P["softmax"](a, axis=-1))),
        Case("log_softmax", lambda r: ([_n(r, 3, 4)], lambda a: P["log_softmax"](a, axis=-1))),
        Case("layer_norm", lambda r: ([_n(r, 3, 5)], P["layer_norm"])),
        Case("relu", lambda r: ([_away_from_zero(r, 3, 4)], P["relu"])),
        Case("sum", lambda r: ([_n(r, 3, 4)], lambda a: P["sum"](a, axis=1))),
        Case("mean", lambda r: ([_n(r, 3, 4)], lambda a: P["mean"](a, axis=0, keepdims=True))),
        Case("reshape", lambda r: ([_n(r, 2, 6)], lambda a: P["reshape"](a, (3, 4)))),
        Case("transpose", lambda r: ([_n(r, 2, 3, 4)], lambda a: P["transpose"](a, (2, 0, 1)))),
        Case("getitem", _getitem_case),
        Case("cosine_similarity", lambda r: ([_n(r, 3, 4), _n(r, 4)], P["cosine_similarity"])),
        Case("l2_distance", lambda r: ([_n(r, 2, 3), _n(r, 2, 3)], P["l2_distance"])),
        Case("cross_entropy", _ce_case, "composite"),
        Case("c2_loss", _c2_case, "composite"),
        Case("fedprox_term", _prox_case, "composite"),
    ]


def run_gradcheck(seed: int = 0, cases=None, points: int = POINTS) -> GradcheckReport:
    start = time.perf_counter()
    report = GradcheckReport()
    for k, case in enumerate(cases if cases is not None else default_cases()):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(points):
            inputs, fn = case.make(rng)
            worst = max(worst, check_point([np.array(x, dtype=np.float64) for x in inputs], fn, rng))
        report.results.append(CaseResult(case.name, case.kind, points, worst))
    report.seconds = time.perf_counter() - start
    return report
