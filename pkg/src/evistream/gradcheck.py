"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class ProbeReport:
    name: str
    probes: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


def rel_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _loss64(loss_fn, params):
    saved = {k: p.data for k, p in params.items()}
    try:
        with nx.verification_mode():
            for p in params.values():
                p.data = p.data.astype(np.float64)
            return float(loss_fn().data)
    finally:
        for k, p in params.items():
            # write back perturbations made through the float64 copy
            saved[k][...] = p.data
            p.data = saved[k]


def check_gradients(loss_fn, params, probes=20, step=1e-3, floor=1e-6, seed=0, oracle64=True):
    """Compare ``backward`` against central differences for each tensor in ``params``.

    ``loss_fn()`` must rebuild the graph from the current parameter values
    and return a scalar :class:`Tensor`.  ``params`` maps names to leaf
    tensors.  ``floor`` bounds the denominator of the relative error so
    entries whose true gradient is ~0 are judged on absolute error.

    With ``oracle64`` the difference quotients are evaluated in float64 on
    the same parameter values, so a float32 backward pass is judged against
    a reference free of float32 rounding noise.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    nx.backward(loss_fn())
    evaluate = (lambda: _loss64(loss_fn, params)) if oracle64 else (lambda: float(loss_fn().data))
    reports = []
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        k = min(probes, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False) if flat.size > probes else np.arange(flat.size)
        worst = (-1.0, 0, 0.0, 0.0)
        for i in idx:
            orig = flat[i].copy()
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(grad.reshape(-1)[i])
            err = rel_error(analytic, numeric, floor)
            if err > worst[0]:
                worst = (err, int(i), analytic, numeric)
        reports.append(ProbeReport(name, int(k), worst[0],
                                   np.unravel_index(worst[1], p.shape), worst[2], worst[3]))
    return reports
