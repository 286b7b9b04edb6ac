"""Finite-difference gradient checker.

Derivatives are estimated with a Richardson-extrapolated central difference,
(4 D(h/2) - D(h)) / 3 with D(h) = (f(x+h) - f(x-h)) / 2h, whose error is
O(h^4). That allows a step of 1e-3, where plain central differences need a
tiny step and then lose about eps*|f|/h to rounding.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tensor, backward, no_grad, record_branches


class GradcheckError(ValueError):
    pass


STEP = 1e-3


def _derivative(evaluate: Callable[[float], float], step: float) -> float:
    """Richardson-extrapolated central difference of a 1-d function of the offset."""
    d1 = (evaluate(step) - evaluate(-step)) / (2 * step)
    h = step / 2
    d2 = (evaluate(h) - evaluate(-h)) / (2 * h)
    return (4 * d2 - d1) / 3


def _count(stats, key):
    if stats is not None:
        stats[key] = stats.get(key, 0) + 1


def _relative(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = STEP,
    indices: Optional[Sequence[int]] = None,
    skip_kinks: bool = True,
    stats: Optional[dict] = None,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor and must be evaluated in float64.
    ``indices`` restricts the probe to a subset of flat positions. With
    ``skip_kinks`` a probe whose +/- evaluations take a different branch of a
    piecewise op (ReLU, max-pool, abs) than the base point is excluded, since
    the function is not differentiable across it. ``stats``, if given,
    accumulates the number of used and skipped probes.
    """
    if x.dtype != np.float64:
        raise GradcheckError("gradient_check requires float64 tensors")
    base = x.data.copy()
    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with record_branches() as base_branches:
        out = f(probe)
    if out.size != 1:
        raise GradcheckError(f"gradient_check: f must be scalar, got shape {out.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise GradcheckError(f"gradient_check: f(x) is not finite ({value})")
    if out.dtype != np.float64:
        raise GradcheckError("gradient_check: f produced a non-float64 result")
    backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    analytic = analytic.reshape(-1)
    reference = list(base_branches)

    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        crossed = False

        def at(offset):
            nonlocal crossed
            shifted = flat.copy()
            shifted[i] += offset
            with no_grad(), record_branches() as branches:
                value = f(Tensor(shifted.reshape(base.shape), dtype=np.float64)).item()
            crossed |= branches != reference
            return value

        numeric = _derivative(at, step)
        if crossed and skip_kinks:
            _count(stats, "skipped")
            continue
        _count(stats, "probes")
        worst = max(worst, float(_relative(analytic[i : i + 1], np.array([numeric]))[0]))
    return worst


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence,
    step: float = STEP,
    probes: int = 8,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = True,
    stats: Optional[dict] = None,
) -> dict:
    """Finite-difference check of ``loss_fn`` with respect to each parameter.

    ``params`` holds tensors or (name, tensor) pairs; they are perturbed in place. Returns a mapping of parameter name to
    max relative error over at most ``probes`` randomly chosen elements.
    """
    rng = rng or np.random.default_rng(0)
    named = [item if isinstance(item, tuple) else (item.name or f"param{k}", item) for k, item in enumerate(params)]
    params = [p for _, p in named]
    for p in params:
        if p.dtype != np.float64:
            raise GradcheckError("check_parameters requires float64 parameters")
        p.grad = None
    with record_branches() as base_branches:
        out = loss_fn()
    if not np.isfinite(out.item()):
        raise GradcheckError(f"check_parameters: loss is not finite ({out.item()})")
    backward(out)
    reference = list(base_branches)

    results = {}
    for name, p in named:
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        flat = p.data.reshape(-1)
        count = min(probes, p.size)
        worst = 0.0
        for i in rng.choice(p.size, size=count, replace=False):
            original = flat[i]
            crossed = False

            def at(offset):
                nonlocal crossed
                flat[i] = original + offset
                with no_grad(), record_branches() as branches:
                    value = loss_fn().item()
                crossed |= branches != reference
                return value

            numeric = _derivative(at, step)
            flat[i] = original
            if crossed and skip_kinks:
                _count(stats, "skipped")
                continue
            _count(stats, "probes")
            worst = max(worst, float(_relative(analytic[i : i + 1], np.array([numeric]))[0]))
        results[name] = worst
        p.grad = None
    return results


def check_directions(
    loss_fn: Callable[[], Tensor],
    params: Sequence,
    step: float = STEP,
    directions: int = 2,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = True,
    stats: Optional[dict] = None,
) -> dict:
    """Directional-derivative check: for random unit directions ``v`` over each
    parameter tensor, compare ``grad . v`` with a central difference along ``v``.

    Single elements of a deep model can have gradients near the finite
    difference noise floor; a direction involves every element at once.
    """
    rng = rng or np.random.default_rng(0)
    named = [item if isinstance(item, tuple) else (item.name or f"param{k}", item) for k, item in enumerate(params)]
    for _, p in named:
        if p.dtype != np.float64:
            raise GradcheckError("check_directions requires float64 parameters")
        p.grad = None
    with record_branches() as base_branches:
        out = loss_fn()
    if not np.isfinite(out.item()):
        raise GradcheckError(f"check_directions: loss is not finite ({out.item()})")
    backward(out)
    reference = list(base_branches)

    results = {}
    for name, p in named:
        grad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        original = p.data.copy()
        worst = 0.0
        for _ in range(directions):
            v = rng.normal(size=p.shape)
            v /= np.linalg.norm(v) or 1.0
            crossed = False

            def at(offset):
                nonlocal crossed
                p.data = original + offset * v
                with no_grad(), record_branches() as branches:
                    value = loss_fn().item()
                crossed |= branches != reference
                return value

            numeric = _derivative(at, step)
            p.data = original.copy()
            if crossed and skip_kinks:
                _count(stats, "skipped")
                continue
            _count(stats, "probes")
            worst = max(worst, float(_relative(np.array([np.sum(grad * v)]), np.array([numeric]))[0]))
        results[name] = worst
        p.grad = None
    return results
