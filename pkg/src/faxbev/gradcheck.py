"""Registry of central finite-difference gradient checks.

Every differentiable op has an entry.  A check builds random float64 inputs
(and parameters), reduces the op output to a scalar with a fixed random
cotangent and compares reverse-mode gradients against

    (f(x + h e) - f(x - h e)) / 2h,      h = 1e-4

for sampled coordinates ``e`` and for random unit directions.  The reported
error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from faxbev import tensor as T
from faxbev.errors import UsageError
from faxbev.tensor import Tensor

H = 1e-4
TOLERANCE = 1e-3

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass(frozen=True)
class GradCheck:
    name: str
    build: Builder
    instances: int = 20
    max_coords: int = 48
    directions: int = 2


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    passed: bool


REGISTRY: dict[str, GradCheck] = {}


def register(name: str, instances: int = 20, max_coords: int = 48, directions: int = 2):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = GradCheck(name, fn, instances, max_coords, directions)
        return fn
    return deco


def _leaf(rng, shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True, dtype=np.float64)


def _scalarize(out: Tensor, cot: np.ndarray | None) -> Tensor:
    if out.ndim == 0:
        return out
    return T.sum_all(T.mul(out, Tensor(cot)))


def check_instance(check: GradCheck, rng: np.random.Generator) -> float:
    """Max relative error of one random instance of ``check``."""
    leaves, fn = check.build(rng)
    probe = fn()
    cot = None if probe.ndim == 0 else rng.standard_normal(probe.shape)

    def value() -> float:
        with T.no_grad():
            return float(_scalarize(fn(), cot).data)

    for t in leaves:
        t.grad = None
    T.backward(_scalarize(fn(), cot))
    grads = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in leaves]

    coords = [(i, j) for i, t in enumerate(leaves) for j in range(t.size)]
    if len(coords) > check.max_coords:
        pick = rng.choice(len(coords), size=check.max_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    ana, num = [], []
    for i, j in coords:
        flat = leaves[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + H
        fp = value()
        flat[j] = orig - H
        fm = value()
        flat[j] = orig
        ana.append(grads[i].reshape(-1)[j])
        num.append((fp - fm) / (2 * H))
    err = _rel(ana, num)

    ana, num = [], []
    for _ in range(check.directions):
        dirs = [rng.standard_normal(t.shape) for t in leaves]
        norm = np.sqrt(sum((d * d).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        for t, d in zip(leaves, dirs):
            t.data += H * d
        fp = value()
        for t, d in zip(leaves, dirs):
            t.data -= 2 * H * d
        fm = value()
        for t, d in zip(leaves, dirs):
            t.data += H * d
        ana.append(sum(float((g * d).sum()) for g, d in zip(grads, dirs)))
        num.append((fp - fm) / (2 * H))
    return max(err, _rel(ana, num))


def _rel(ana, num) -> float:
    if not len(ana):
        return 0.0
    a, n = np.asarray(ana), np.asarray(num)
    return float(np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-8))


def select(pattern: str | None) -> list[GradCheck]:
    """Checks whose name matches the regular expression ``pattern`` (all when None)."""
    _ensure_loaded()
    if pattern is None:
        return list(REGISTRY.values())
    try:
        rx = re.compile(pattern)
    except re.error as exc:
        raise UsageError(f"invalid filter {pattern!r}: {exc}") from None
    chosen = [c for name, c in REGISTRY.items() if rx.search(name)]
    if not chosen:
        raise UsageError(f"filter {pattern!r} matches no registered check; known: {', '.join(REGISTRY)}")
    return chosen


def run_checks(pattern: str | None = None, seed: int = 0, instances: int | None = None,
               tolerance: float = TOLERANCE) -> list[CheckResult]:
    results = []
    for check in select(pattern):
        rng = np.random.default_rng([seed, _stable_hash(check.name)])
        n = check.instances if instances is None else min(instances, check.instances)
        worst = max(check_instance(check, rng) for _ in range(n))
        results.append(CheckResult(check.name, n, worst, worst < tolerance))
    return results


def _stable_hash(name: str) -> int:
    return int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little") ^ len(name)


def format_table(results: list[CheckResult]) -> str:
    width = max([len(r.name) for r in results] + [4])
    lines = [f"{'op':<{width}}  instances  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_rel_error:>11.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)


_loaded = False


def _ensure_loaded() -> None:
    global _loaded
    if not _loaded:
        from faxbev import _gradcheck_ops  # noqa: F401  (registers the built-in checks)
        _loaded = True
