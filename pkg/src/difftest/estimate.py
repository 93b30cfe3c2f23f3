"""Adaptive two-stage quasi-maximum-likelihood estimation.

``alpha`` is fitted by maximising ``u1``; ``beta`` by maximising
``u2(. | alpha_bar)`` with ``alpha_bar`` the unconstrained ``alpha`` fit.
Null hypotheses pin components; only the free ones are searched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from . import quasilik
from .errors import AllStartsFailed, DifftestError, NotPositiveDefinite
from .model import DiffusionModel, Hypothesis, ParameterSpace
from .simulate import SamplePath

FIT_TOL = 1e-9
MAX_ITER = 2000
N_STARTS = 5
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool
    at_boundary: bool
    free: tuple[int, ...] = ()
    evaluations: int = 0


def _halton_starts(lo: np.ndarray, hi: np.ndarray, k: int) -> np.ndarray:
    # skip the origin of the unscrambled sequence: it is a box corner
    pts = qmc.Halton(d=len(lo), scramble=False).random(k + 1)[1:]
    return lo + pts * (hi - lo)


def _golden_max(f: Callable[[float], float], a: float, b: float, tol: float,
                x_best: float, f_best: float) -> tuple[float, float, int]:
    """Golden-section search on ``[a, b]``; never returns worse than ``x_best``."""
    evals = 0
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    evals += 2
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
        evals += 1
    for x, fx in ((c, fc), (d, fd)):
        if fx > f_best:
            x_best, f_best = x, fx
    return x_best, f_best, evals


def maximize_box(objective: Callable[[np.ndarray], float], lower, upper,
                 fixed: Sequence[tuple[int, float]] = (), *, scale: float = 1.0,
                 derivatives: Optional[Callable[[np.ndarray], tuple]] = None,
                 extra_starts: Sequence[np.ndarray] = (), n_starts: int = N_STARTS,
                 fit_tol: float = FIT_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Maximise ``objective`` over a box with some components pinned.

    Multi-start Nelder-Mead on the free components (infeasible proposals are
    clipped to the box), then a golden-section polish along each free
    coordinate and a safeguarded Newton step when ``derivatives`` (returning
    gradient and Hessian of the unscaled objective) is given.  ``scale``
    normalises the objective so that ``fit_tol`` is per-observation.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    p = len(lower)
    base = np.empty(p)
    fixed_idx = [i for i, _ in fixed]
    for i, v in fixed:
        base[i] = v
    free = tuple(i for i in range(p) if i not in fixed_idx)
    width = (upper - lower)[list(free)]
    lo_f, hi_f = lower[list(free)], upper[list(free)]
    counter = [0]

    def full(z):
        x = base.copy()
        x[list(free)] = z
        return x

    def f(z) -> float:
        counter[0] += 1
        try:
            val = objective(full(z)) / scale
        except NotPositiveDefinite:
            return -math.inf
        return val if math.isfinite(val) else -math.inf

    if not free:
        val = f(np.empty(0))
        if not math.isfinite(val):
            raise AllStartsFailed("objective undefined at the fully pinned parameter")
        return FitResult(base.copy(), val * scale, 0, True, False, free, counter[0])

    starts = list(_halton_starts(lo_f, hi_f, n_starts))
    for s in extra_starts:
        starts.append(np.clip(np.asarray(s, dtype=float)[list(free)], lo_f, hi_f))

    xatol = 1e-5 * width.min()
    runs = []
    for z0 in starts:
        f0 = f(z0)
        if not math.isfinite(f0):
            continue  # S not positive definite at the start
        res = minimize(lambda z: -f(z), z0, method="Nelder-Mead",
                       bounds=list(zip(lo_f, hi_f)),
                       options={"xatol": xatol, "fatol": fit_tol, "maxiter": max_iter,
                                "maxfev": 4 * max_iter})
        z = np.clip(res.x, lo_f, hi_f)
        fz = f(z)
        if not math.isfinite(fz):
            continue
        # coordinate-wise golden-section polish around the simplex optimum
        for k in range(len(free)):
            span = 10 * xatol
            a, b = max(lo_f[k], z[k] - span), min(hi_f[k], z[k] + span)

            def line(t, k=k, z=z):
                zz = z.copy()
                zz[k] = t
                return f(zz)

            t, fz, _ = _golden_max(line, a, b, 1e-3 * span, z[k], fz)
            z = z.copy()
            z[k] = t
        if derivatives is not None:
            z, fz = _newton_polish(derivatives, full, f, z, fz, list(free), lo_f, hi_f)
        runs.append((fz, z, res.nit, f0))

    if not runs:
        raise AllStartsFailed("every optimisation start failed (S not positive definite)")
    runs.sort(key=lambda r: -r[0])
    f_best, z_best, nit, _ = runs[0]
    converged = (len(runs) >= 2 and abs(runs[0][0] - runs[1][0]) <= fit_tol
                 and bool(np.max(np.abs(runs[0][1] - runs[1][1])) <= 100 * fit_tol))
    at_boundary = bool(np.any((z_best - lo_f <= 1e-6 * width) | (hi_f - z_best <= 1e-6 * width)))
    return FitResult(full(z_best), f_best * scale, int(nit), converged, at_boundary,
                     free, counter[0])


def _newton_polish(derivatives, full, f, z, fz, free, lo, hi, steps=3):
    # near the optimum the objective is flat to rounding, so a step that
    # shrinks the gradient may lose a few ulps of objective; allow that much
    def grad_hess(point):
        g, H = derivatives(full(point))
        return np.asarray(g)[free], np.asarray(H)[np.ix_(free, free)]

    try:
        g, H = grad_hess(z)
    except DifftestError:
        return z, fz
    for _ in range(steps):
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            break
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        cand = z + step
        if np.any(cand < lo) or np.any(cand > hi) or np.all(cand == z):
            break
        fc = f(cand)
        if not fc >= fz - 1e-14 * max(1.0, abs(fz)):
            break
        try:
            gc, Hc = grad_hess(cand)
        except DifftestError:
            break
        if not (fc >= fz or np.linalg.norm(gc) < np.linalg.norm(g)):
            break
        z, fz, g, H = cand, fc, gc, Hc
    return z, fz


def fit_alpha(path: SamplePath, model: DiffusionModel, space: ParameterSpace,
              hyp: Optional[Hypothesis] = None, *, extra_starts: Sequence = ()) -> FitResult:
    """Maximiser of ``u1`` over the alpha box (or its null-restricted slice)."""
    lo, hi = space.bounds("alpha")
    fixed = hyp.alpha_fixed if hyp is not None else ()

    def derivs(a):
        return quasilik.score_u1(path, model, a), quasilik.hess_u1(path, model, a)

    return maximize_box(lambda a: quasilik.u1(path, model, a), lo, hi, fixed,
                        scale=path.n, derivatives=derivs, extra_starts=extra_starts)


def fit_beta(path: SamplePath, model: DiffusionModel, space: ParameterSpace,
             alpha_bar, hyp: Optional[Hypothesis] = None, *,
             extra_starts: Sequence = ()) -> FitResult:
    """Maximiser of ``u2(. | alpha_bar)`` over the beta box (or its null slice)."""
    lo, hi = space.bounds("beta")
    fixed = hyp.beta_fixed if hyp is not None else ()
    alpha_bar = np.asarray(alpha_bar, dtype=float)

    def derivs(b):
        return (quasilik.score_u2(path, model, b, alpha_bar),
                quasilik.hess_u2(path, model, b, alpha_bar))

    return maximize_box(lambda b: quasilik.u2(path, model, b, alpha_bar), lo, hi, fixed,
                        scale=path.n * path.h, derivatives=derivs, extra_starts=extra_starts)
