"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteError, default_dtype, no_grad


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict = field(default_factory=dict)
    probes: int = 0

    @property
    def violations(self):
        return {k: v for k, v in self.max_rel_err.items() if not v <= self.tolerance}

    @property
    def passed(self):
        return not self.violations

    def worst(self):
        if not self.max_rel_err:
            return 0.0
        return max(self.max_rel_err.values())


def relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(f, named, reference_dtype):
    if reference_dtype is None:
        return float(f().data)
    saved = [p.data for _, p in named]
    try:
        for _, p in named:
            p.data = p.data.astype(reference_dtype)
        with default_dtype(reference_dtype):
            return float(f().data)
    finally:
        for (_, p), d in zip(named, saved):
            p.data = d


def _difference(f, named, flat, k, eps, name, reference_dtype):
    orig = flat[k]
    with no_grad():
        flat[k] = orig + eps
        hi = float(flat[k])
        fp = _evaluate(f, named, reference_dtype)
        flat[k] = orig - eps
        lo = float(flat[k])
        fm = _evaluate(f, named, reference_dtype)
    flat[k] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteError(f"non-finite probe for {name}[{k}]")
    # divide by the step actually stored, which differs from 2*eps in low precision
    return (fp - fm) / (hi - lo)


def grad_check(f, params, eps=1e-6, tolerance=1e-6, samples=8, seed=0, floor=None,
               reference_dtype=None, retry_step=0.1, retries=2, scale="entry"):
    """Compare ``backward()`` gradients of scalar ``f()`` with central differences.

    ``params`` is a list of tensors or ``(name, tensor)`` pairs. At most
    ``samples`` coordinates per tensor are probed. ``floor`` bounds the
    denominator of the relative error so that vanishing gradients are
    compared in absolute terms; by default it is the larger of the
    rounding noise of the difference quotient and 1e-3 of the largest
    analytic gradient entry.

    With ``reference_dtype`` the difference quotients are evaluated in that
    precision (parameters are up-cast for the probe), so a low-precision
    backward pass is judged against an oracle whose own rounding noise is
    far below the tolerance.

    A probe whose error exceeds a tenth of the tolerance is repeated (up to
    ``retries`` times) with the step scaled by ``retry_step`` and the closer
    agreement is kept: for piecewise-smooth
    functions a kink inside the first step is stepped over by the second,
    whereas a wrong gradient disagrees at both step sizes. Pass
    ``retry_step=None`` to disable.

    ``scale="tensor"`` measures each error against the largest analytic
    entry of its tensor (an infinity-norm relative error). Single precision
    backward passes through deep graphs carry rounding error proportional
    to the tensor's scale, so entries far below it cannot be resolved
    one by one.
    """
    if scale not in ("entry", "tensor"):
        raise ValueError(f"scale must be 'entry' or 'tensor', got {scale!r}")
    named = [p if isinstance(p, tuple) else (p.name or f"param{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    out = f()
    value = float(out.data)
    if not np.isfinite(value):
        raise NonFiniteError("function is non-finite at the base point")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in named}
    if floor is None:
        probe_dtype = reference_dtype or out.data.dtype
        noise = 1e2 * np.finfo(probe_dtype).eps * max(1.0, abs(value)) / eps
        gmax = max((float(np.abs(g).max()) for g in analytic.values() if g.size), default=0.0)
        floor = max(noise, 1e-3 * gmax)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(samples, n), replace=False)
        tensor_floor = floor
        if scale == "tensor" and n:
            tensor_floor = max(floor, float(np.abs(analytic[name]).max()))
        worst = 0.0
        for k in picks:
            a = float(analytic[name].reshape(-1)[k])
            err = relative_error(a, _difference(f, named, flat, k, eps, name, reference_dtype), tensor_floor)
            step = eps
            for _ in range(retries if retry_step else 0):
                if err <= 0.1 * tolerance:
                    break
                step *= retry_step
                err = min(err, relative_error(a, _difference(f, named, flat, k, step, name, reference_dtype),
                                              tensor_floor))
            worst = max(worst, err)
            report.probes += 1
        report.max_rel_err[name] = worst
    return report
