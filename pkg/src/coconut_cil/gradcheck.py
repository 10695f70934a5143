"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import EXTENDED, Tensor, backward


def _value(loss_fn):
    v = loss_fn().data
    if not np.all(np.isfinite(v)):
        raise ValueError("grad_check: loss is not finite")
    return v.reshape(())[()]


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, h: float, extended: bool = False) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every entry of ``p``.

    With ``extended`` the probes run on a long-double copy of ``p`` so that the
    difference quotient is not limited by float64 round-off in ``f``.
    """
    base = p.data
    work = base.astype(EXTENDED) if extended else base.copy()
    num = np.zeros(base.shape, dtype=work.dtype)
    flat, nflat = work.reshape(-1), num.reshape(-1)
    p.data = work
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(loss_fn)
            flat[i] = orig - h
            fm = _value(loss_fn)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * work.dtype.type(h))
    finally:
        p.data = base
    return num.astype(np.float64)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float | None = None,
    extended: bool = True,
) -> list[float]:
    """Max relative error between analytic and central-difference gradients.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    The analytic side is always float64; ``extended`` only affects the probes.
    If ``tol`` is given, raise ``AssertionError`` when any error exceeds it.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    if not params:
        return []
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: loss is not finite")
    backward(loss)
    errors = []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        num = numeric_grad(loss_fn, p, h, extended=extended)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
        errors.append(float(np.max(np.abs(analytic - num) / denom)))
    if tol is not None and max(errors) > tol:
        raise AssertionError(f"gradient check failed: max rel. errors {errors} > {tol}")
    return errors
