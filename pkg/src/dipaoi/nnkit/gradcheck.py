"""Finite-difference verification of the reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import F32, Param, ShapeError, Tensor


def grad_check(fn, params: list[Param], epsilon: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn()` rebuilds the graph from the current parameter values and returns a
    scalar Tensor. Perturbed evaluations stay in float32 (the op dtype); the
    difference quotient is taken in float64.
    """
    out = fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-output graph")
    for p in params:
        p.grad = None
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = F32(orig + epsilon)
            f_plus = float(fn().data)
            flat[i] = F32(orig - epsilon)
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            av = float(a.reshape(-1)[i])
            denom = max(abs(av), abs(numeric), 1e-2)
            worst = max(worst, abs(av - numeric) / denom)
    return worst


def gradcheck_report(cases: dict[str, tuple], epsilon: float = 1e-3, tol: float = 1e-2) -> dict:
    """Run named (fn, params) cases; returns per-case errors and overall pass."""
    results = {}
    for name, (fn, params) in cases.items():
        err = grad_check(fn, params, epsilon=epsilon)
        results[name] = {"max_rel_err": err, "ok": bool(err < tol)}
    return {
        "epsilon": epsilon,
        "tolerance": tol,
        "cases": results,
        "ok": all(r["ok"] for r in results.values()),
    }
