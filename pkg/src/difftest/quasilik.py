"""Gaussian quasi-log-likelihoods for the diffusion and drift parameters.

``u1(alpha)  = -1/2 sum { h^-1 S^-1(X_{i-1}, alpha)[dX_i^2] + log det S(X_{i-1}, alpha) }``
``u2(beta|a) = -1/2 sum   h^-1 S^-1(X_{i-1}, a)[(dX_i - h b(X_{i-1}, beta))^2]``

Scalar states (d = 1) take a fast path; general d goes through batched
linear solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefinite
from .model import PD_FLOOR, DiffusionModel, check_pd
from .simulate import SamplePath

SINGULAR_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class InfoMatrix:
    """Empirical information matrix of one stage.

    ``matrix`` is the identity when the raw matrix is numerically singular,
    so ``inv(matrix)`` is always the Rao weight; ``raw`` keeps the scaled
    negative Hessian for the Wald statistic.
    """

    matrix: np.ndarray
    raw: np.ndarray
    stage: str
    singular_fallback_used: bool

    def rao_weight(self) -> np.ndarray:
        if self.singular_fallback_used:
            return np.eye(self.matrix.shape[0])
        return np.linalg.inv(self.matrix)


def _scalar_s(model: DiffusionModel, path: SamplePath, alpha) -> np.ndarray:
    s = model.S(path.x_prev, np.asarray(alpha, dtype=float))[:, 0, 0]
    if not np.all(np.isfinite(s)) or s.min() <= PD_FLOOR:
        raise NotPositiveDefinite("S(x, alpha) is not positive definite along the path")
    return s


def _matrix_S(model: DiffusionModel, path: SamplePath, alpha):
    S = model.S(path.x_prev, np.asarray(alpha, dtype=float))
    check_pd(S)
    return S, np.linalg.inv(S)


def _dx_sq(path: SamplePath) -> np.ndarray:
    cache = path.__dict__
    if "_dx_sq" not in cache:
        cache["_dx_sq"] = path.dx[:, 0] ** 2
    return cache["_dx_sq"]


def u1(path: SamplePath, model: DiffusionModel, alpha) -> float:
    if path.dim == 1:
        s = _scalar_s(model, path, alpha)
        return -0.5 * float(np.sum(_dx_sq(path) / (path.h * s) + np.log(s)))
    S = model.S(path.x_prev, np.asarray(alpha, dtype=float))
    check_pd(S)
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, path.dx[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * float(np.sum(np.sum(z * z, axis=-1) / path.h + logdet))


def _residual(path: SamplePath, model: DiffusionModel, beta) -> np.ndarray:
    return path.dx - path.h * model.drift(path.x_prev, np.asarray(beta, dtype=float))


def u2(path: SamplePath, model: DiffusionModel, beta, alpha_bar) -> float:
    r = _residual(path, model, beta)
    if path.dim == 1:
        s = _scalar_s(model, path, alpha_bar)
        return -0.5 * float(np.sum(r[:, 0] ** 2 / s)) / path.h
    S = model.S(path.x_prev, np.asarray(alpha_bar, dtype=float))
    check_pd(S)
    L = np.linalg.cholesky(S)
    z = np.linalg.solve(L, r[..., None])[..., 0]
    return -0.5 * float(np.sum(z * z)) / path.h


def score_u1(path: SamplePath, model: DiffusionModel, alpha) -> np.ndarray:
    dS, _ = model.S_derivs(path.x_prev, alpha)
    if path.dim == 1:
        s = _scalar_s(model, path, alpha)
        sk = dS[:, 0, 0, :]
        q = _dx_sq(path) / path.h
        return 0.5 * np.sum(sk * ((q / s - 1.0) / s)[:, None], axis=0)
    _, Sinv = _matrix_S(model, path, alpha)
    v = np.einsum("nij,nj->ni", Sinv, path.dx)
    quad = np.einsum("ni,nijk,nj->k", v, dS, v) / path.h
    trace = np.einsum("nij,njik->k", Sinv, dS)
    return -0.5 * (trace - quad)


def hess_u1(path: SamplePath, model: DiffusionModel, alpha) -> np.ndarray:
    dS, d2S = model.S_derivs(path.x_prev, alpha)
    if path.dim == 1:
        s = _scalar_s(model, path, alpha)
        sk = dS[:, 0, 0, :]
        skl = d2S[:, 0, 0, :, :]
        q = (_dx_sq(path) / path.h)[:, None, None]
        s3 = s[:, None, None]
        outer = sk[:, :, None] * sk[:, None, :]
        terms = q * (2 * outer / s3 ** 3 - skl / s3 ** 2) + skl / s3 - outer / s3 ** 2
        H = -0.5 * terms.sum(axis=0)
        return 0.5 * (H + H.T)
    _, Sinv = _matrix_S(model, path, alpha)
    v = np.einsum("nij,nj->ni", Sinv, path.dx)
    A = np.einsum("nij,njkp->nikp", Sinv, dS)
    Sv = np.einsum("nijk,nj->nik", dS, v)
    cross = np.einsum("nik,nij,njl->kl", Sv, Sinv, Sv)
    second = np.einsum("ni,nijkl,nj->kl", v, d2S, v)
    quad = (2 * cross - second) / path.h
    tr2 = np.einsum("nij,njikl->kl", Sinv, d2S)
    trAA = np.einsum("nijk,njil->kl", A, A)
    H = -0.5 * (quad + tr2 - trAA)
    return 0.5 * (H + H.T)


def score_u2(path: SamplePath, model: DiffusionModel, beta, alpha_bar) -> np.ndarray:
    J = model.drift_jac(path.x_prev, beta)
    r = _residual(path, model, beta)
    if path.dim == 1:
        s = _scalar_s(model, path, alpha_bar)
        return np.sum(J[:, 0, :] * (r[:, 0] / s)[:, None], axis=0)
    _, Sinv = _matrix_S(model, path, alpha_bar)
    w = np.einsum("nij,nj->ni", Sinv, r)
    return np.einsum("nik,ni->k", J, w)


def hess_u2(path: SamplePath, model: DiffusionModel, beta, alpha_bar) -> np.ndarray:
    J = model.drift_jac(path.x_prev, beta)
    Hb = model.drift_hess(path.x_prev, beta)
    r = _residual(path, model, beta)
    if path.dim == 1:
        s = _scalar_s(model, path, alpha_bar)
        j = J[:, 0, :]
        w = (r[:, 0] / s)[:, None, None]
        H = np.sum(Hb[:, 0] * w, axis=0) - path.h * np.einsum("nk,nl,n->kl", j, j, 1.0 / s)
        return 0.5 * (H + H.T)
    _, Sinv = _matrix_S(model, path, alpha_bar)
    w = np.einsum("nij,nj->ni", Sinv, r)
    H = np.einsum("nikl,ni->kl", Hb, w) - path.h * np.einsum("nik,nij,njl->kl", J, Sinv, J)
    return 0.5 * (H + H.T)


def is_singular(M: np.ndarray) -> bool:
    """Relative eigenvalue test: ``min |lambda| < 1e-10 max |lambda|``."""
    if not np.all(np.isfinite(M)):
        return True
    ev = np.abs(np.linalg.eigvalsh(M))
    return bool(ev.max() == 0.0 or ev.min() < SINGULAR_RTOL * ev.max())


def _info(raw: np.ndarray, stage: str) -> InfoMatrix:
    raw = 0.5 * (raw + raw.T)
    if is_singular(raw):
        return InfoMatrix(np.eye(raw.shape[0]), raw, stage, True)
    return InfoMatrix(raw, raw, stage, False)


def info_a(path: SamplePath, model: DiffusionModel, alpha) -> InfoMatrix:
    """``-(1/n) d^2 u1 / d alpha^2`` with identity fallback when singular."""
    return _info(-hess_u1(path, model, alpha) / path.n, "alpha")


def info_b(path: SamplePath, model: DiffusionModel, beta, alpha_bar) -> InfoMatrix:
    """``-(1/(n h)) d^2 u2 / d beta^2`` with identity fallback when singular."""
    return _info(-hess_u2(path, model, beta, alpha_bar) / (path.n * path.h), "beta")
