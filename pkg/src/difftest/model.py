"""Parametric diffusion models, parameter boxes and null hypotheses.

A model describes ``dX_t = b(X_t, beta) dt + a(X_t, alpha) dW_t``.  All
model callables are vectorised over leading axes of ``x``: for ``x`` of
shape ``(..., d)`` the drift returns ``(..., d)`` and the diffusion
coefficient returns ``(..., d, r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NonFinite, NotPositiveDefinite

PD_FLOOR = 1e-12
_EPS = np.finfo(float).eps
FD_SCALE_1 = _EPS ** (1.0 / 3.0)
FD_SCALE_2 = _EPS ** (1.0 / 4.0)

Array = np.ndarray


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """A diffusion with drift parameter ``beta`` and diffusion parameter ``alpha``.

    Optional derivative suppliers (all vectorised like ``drift``):

    ``drift_jacobian_beta(x, beta)``
        ``(..., d, p2)`` array of first beta-derivatives of the drift.
    ``drift_hessian_beta(x, beta)``
        ``(..., d, p2, p2)`` second beta-derivatives of the drift.
    ``diffusion_derivs_alpha(x, alpha)``
        pair ``(dS, d2S)`` with shapes ``(..., d, d, p1)`` and
        ``(..., d, d, p1, p1)``: alpha-derivatives of ``S = a a^T``.

    Missing suppliers fall back to central finite differences.
    """

    name: str
    state_dim: int
    noise_dim: int
    alpha_dim: int
    beta_dim: int
    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    drift_jacobian_beta: Optional[Callable[[Array, Array], Array]] = None
    drift_hessian_beta: Optional[Callable[[Array, Array], Array]] = None
    diffusion_derivs_alpha: Optional[Callable[[Array, Array], tuple]] = None
    # (x, alpha, beta) -> density of the invariant law, d = 1 only
    invariant_density: Optional[Callable[[Array, Array, Array], Array]] = None
    # (alpha, beta) -> finite integration interval for the invariant law
    invariant_support: Optional[Callable[[Array, Array], tuple]] = None
    # (alpha, beta, x0, h, n, z) -> states (n+1, d), z standard normal (n, d)
    exact_transition: Optional[Callable[..., Array]] = None

    def __post_init__(self):
        for attr in ("state_dim", "noise_dim", "alpha_dim", "beta_dim"):
            if int(getattr(self, attr)) < 1:
                raise ConfigError(f"{attr} must be a positive integer")

    # -- coefficient evaluation -------------------------------------------

    def S(self, x: Array, alpha: Array) -> Array:
        """``a a^T`` evaluated at ``x``; shape ``(..., d, d)``."""
        a = np.asarray(self.diffusion(x, alpha), dtype=float)
        if a.shape[-2:] == (1, 1):
            return a * a
        return a @ np.swapaxes(a, -1, -2)

    def S_derivs(self, x: Array, alpha: Array) -> tuple[Array, Array]:
        if self.diffusion_derivs_alpha is not None:
            dS, d2S = self.diffusion_derivs_alpha(x, alpha)
            return np.asarray(dS, dtype=float), np.asarray(d2S, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        dS = fd_derivative(lambda a: self.S(x, a), alpha, 1)
        d2S = fd_derivative(lambda a: self.S(x, a), alpha, 2)
        return dS, d2S

    def drift_jac(self, x: Array, beta: Array) -> Array:
        if self.drift_jacobian_beta is not None:
            return np.asarray(self.drift_jacobian_beta(x, beta), dtype=float)
        return fd_derivative(lambda b: self.drift(x, b), np.asarray(beta, float), 1)

    def drift_hess(self, x: Array, beta: Array) -> Array:
        if self.drift_hessian_beta is not None:
            return np.asarray(self.drift_hessian_beta(x, beta), dtype=float)
        return fd_derivative(lambda b: self.drift(x, b), np.asarray(beta, float), 2)


@dataclass(frozen=True)
class Theta:
    alpha: tuple[float, ...]
    beta: tuple[float, ...]

    def __init__(self, alpha: Sequence[float], beta: Sequence[float]):
        object.__setattr__(self, "alpha", tuple(float(v) for v in np.atleast_1d(alpha)))
        object.__setattr__(self, "beta", tuple(float(v) for v in np.atleast_1d(beta)))

    @property
    def alpha_array(self) -> Array:
        return np.array(self.alpha)

    @property
    def beta_array(self) -> Array:
        return np.array(self.beta)

    def check_dims(self, model: DiffusionModel) -> None:
        if len(self.alpha) != model.alpha_dim or len(self.beta) != model.beta_dim:
            raise ConfigError(
                f"theta has dims ({len(self.alpha)}, {len(self.beta)}), model "
                f"{model.name!r} expects ({model.alpha_dim}, {model.beta_dim})"
            )


@dataclass(frozen=True)
class ParameterSpace:
    """Compact box ``Theta_alpha x Theta_beta``."""

    alpha_lower: tuple[float, ...]
    alpha_upper: tuple[float, ...]
    beta_lower: tuple[float, ...]
    beta_upper: tuple[float, ...]

    def __post_init__(self):
        for lo_name, hi_name in (("alpha_lower", "alpha_upper"), ("beta_lower", "beta_upper")):
            lo = tuple(float(v) for v in getattr(self, lo_name))
            hi = tuple(float(v) for v in getattr(self, hi_name))
            object.__setattr__(self, lo_name, lo)
            object.__setattr__(self, hi_name, hi)
            if len(lo) != len(hi) or not lo:
                raise ConfigError(f"{lo_name}/{hi_name} must be non-empty and of equal length")
            if not all(math.isfinite(v) for v in lo + hi):
                raise ConfigError("parameter bounds must be finite")
            if not all(l < u for l, u in zip(lo, hi)):
                raise ConfigError(f"{lo_name} must be strictly below {hi_name}")

    @classmethod
    def uniform(cls, p1: int, p2: int, alpha_box=(0.1, 5.0), beta_box=(-10.0, 10.0)):
        return cls((alpha_box[0],) * p1, (alpha_box[1],) * p1,
                   (beta_box[0],) * p2, (beta_box[1],) * p2)

    def bounds(self, stage: str) -> tuple[Array, Array]:
        if stage == "alpha":
            return np.array(self.alpha_lower), np.array(self.alpha_upper)
        if stage == "beta":
            return np.array(self.beta_lower), np.array(self.beta_upper)
        raise ValueError(f"unknown stage {stage!r}")

    def contains(self, theta: Theta) -> bool:
        a, b = theta.alpha_array, theta.beta_array
        return (len(a) == len(self.alpha_lower) and len(b) == len(self.beta_lower)
                and bool(np.all(a >= self.alpha_lower) and np.all(a <= self.alpha_upper)
                         and np.all(b >= self.beta_lower) and np.all(b <= self.beta_upper)))

    def check_dims(self, model: DiffusionModel) -> None:
        if len(self.alpha_lower) != model.alpha_dim or len(self.beta_lower) != model.beta_dim:
            raise ConfigError(f"parameter space dims do not match model {model.name!r}")


@dataclass(frozen=True)
class Hypothesis:
    """Null hypotheses for both stages: components pinned to given values.

    ``alpha_fixed`` and ``beta_fixed`` are sequences of ``(index, value)``
    pairs with zero-based indices.
    """

    alpha_fixed: tuple[tuple[int, float], ...] = ()
    beta_fixed: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        for name in ("alpha_fixed", "beta_fixed"):
            pairs = tuple((int(i), float(v)) for i, v in getattr(self, name))
            idx = [i for i, _ in pairs]
            if len(set(idx)) != len(idx):
                raise ConfigError(f"{name} has duplicate indices")
            object.__setattr__(self, name, tuple(sorted(pairs)))

    def fixed(self, stage: str) -> tuple[tuple[int, float], ...]:
        return self.alpha_fixed if stage == "alpha" else self.beta_fixed

    def validate(self, space: ParameterSpace) -> None:
        for stage in ("alpha", "beta"):
            lo, hi = space.bounds(stage)
            for i, v in self.fixed(stage):
                if not 0 <= i < len(lo):
                    raise ConfigError(f"{stage} index {i} out of range [0, {len(lo)})")
                if not lo[i] <= v <= hi[i]:
                    raise ConfigError(
                        f"fixed {stage}[{i}]={v} outside the box [{lo[i]}, {hi[i]}]")


def eval_S(model: DiffusionModel, x, alpha) -> Array:
    """Positive-definite ``S(x, alpha)``; raises :class:`NotPositiveDefinite`.

    ``x`` may carry leading batch axes; every point is checked.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if x.shape[-1:] != (model.state_dim,) or alpha.shape != (model.alpha_dim,):
        raise ConfigError("dimension mismatch in eval_S")
    S = model.S(x, alpha)
    check_pd(S)
    return S


def check_pd(S: Array) -> None:
    if S.shape[-1] == 1:
        smallest = S[..., 0, 0]
    else:
        smallest = np.linalg.eigvalsh(S)[..., 0]
    if not np.all(np.isfinite(S)):
        raise NotPositiveDefinite("S(x, alpha) is not finite")
    if np.any(smallest <= PD_FLOOR):
        raise NotPositiveDefinite(
            f"smallest eigenvalue of S(x, alpha) is {float(np.min(smallest)):.3g} "
            f"<= {PD_FLOOR:g}")


def fd_derivative(f: Callable[[Array], Array], at, order: int) -> Array:
    """Central finite-difference gradient (order 1) or Hessian (order 2).

    ``f`` may return an array; derivative axes are appended at the end, so a
    scalar ``f`` yields shape ``(p,)`` or ``(p, p)``.  The Hessian uses the
    nine-point cross stencil and is symmetrised.
    """
    at = np.atleast_1d(np.asarray(at, dtype=float))
    p = at.size
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    scale = FD_SCALE_1 if order == 1 else FD_SCALE_2
    steps = scale * np.maximum(1.0, np.abs(at))

    def ev(point):
        val = np.asarray(f(point), dtype=float)
        if not np.all(np.isfinite(val)):
            raise NonFinite("non-finite value in finite-difference stencil")
        return val

    def shifted(*moves):
        point = at.copy()
        for i, sgn in moves:
            point[i] += sgn * steps[i]
        return point

    if order == 1:
        cols = [(ev(shifted((i, 1))) - ev(shifted((i, -1)))) / (2 * steps[i])
                for i in range(p)]
        return np.stack(cols, axis=-1)

    f0 = ev(at)
    out = np.empty(f0.shape + (p, p))
    for i in range(p):
        out[..., i, i] = (ev(shifted((i, 1))) - 2 * f0 + ev(shifted((i, -1)))) / steps[i] ** 2
        for j in range(i + 1, p):
            mixed = (ev(shifted((i, 1), (j, 1))) - ev(shifted((i, 1), (j, -1)))
                     - ev(shifted((i, -1), (j, 1))) + ev(shifted((i, -1), (j, -1))))
            mixed /= 4 * steps[i] * steps[j]
            out[..., i, j] = mixed
            out[..., j, i] = mixed
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# -- built-in models ---------------------------------------------------------

def _ou_drift(x, beta):
    return -(x - beta[0])


def _ou_diffusion(x, alpha):
    return np.full(np.shape(x) + (1,), float(alpha[0]))


def _ou_drift_jac(x, beta):
    return np.ones(np.shape(x) + (1,))


def _ou_drift_hess(x, beta):
    return np.zeros(np.shape(x) + (1, 1))


def _ou_S_derivs(x, alpha):
    shape = np.shape(x)[:-1]
    dS = np.full(shape + (1, 1, 1), 2.0 * alpha[0])
    d2S = np.full(shape + (1, 1, 1, 1), 2.0)
    return dS, d2S


def _ou_density(x, alpha, beta):
    var = alpha[0] ** 2 / 2.0
    return np.exp(-((x - beta[0]) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)


def _ou_support(alpha, beta):
    sd = math.sqrt(alpha[0] ** 2 / 2.0)
    return beta[0] - 10 * sd, beta[0] + 10 * sd


def _ou_exact(alpha, beta, x0, h, n, z):
    from scipy.signal import lfilter

    decay = math.exp(-h)
    sd = abs(alpha[0]) * math.sqrt(-math.expm1(-2 * h) / 2.0)
    inputs = (1.0 - decay) * beta[0] + sd * z[:, 0]
    x0 = float(np.asarray(x0).ravel()[0])
    tail = lfilter([1.0], [1.0, -decay], inputs, zi=[decay * x0])[0]
    return np.concatenate([[x0], tail])[:, None]


def make_ou_model() -> DiffusionModel:
    """``dX = -(X - beta) dt + alpha dW``, invariant law N(beta, alpha^2 / 2)."""
    return DiffusionModel(
        name="ou", state_dim=1, noise_dim=1, alpha_dim=1, beta_dim=1,
        drift=_ou_drift, diffusion=_ou_diffusion,
        drift_jacobian_beta=_ou_drift_jac, drift_hessian_beta=_ou_drift_hess,
        diffusion_derivs_alpha=_ou_S_derivs,
        invariant_density=_ou_density, invariant_support=_ou_support,
        exact_transition=_ou_exact,
    )


def _m2_basis(x):
    x = x[..., 0]
    return np.stack([np.ones_like(x), 1.0 / (1.0 + x * x), np.cos(x) ** 2], axis=-1)


def _m2_drift(x, beta):
    return -beta[0] * (x - beta[1])


def _m2_diffusion(x, alpha):
    return (_m2_basis(x) @ np.asarray(alpha, dtype=float))[..., None, None]


def _m2_drift_jac(x, beta):
    return np.stack([-(x - beta[1]), np.full(np.shape(x), float(beta[0]))], axis=-1)


def _m2_drift_hess(x, beta):
    out = np.zeros(np.shape(x) + (2, 2))
    out[..., 0, 1] = out[..., 1, 0] = 1.0
    return out


def _m2_S_derivs(x, alpha):
    g = _m2_basis(x)
    a = g @ np.asarray(alpha, dtype=float)
    dS = 2.0 * a[..., None] * g
    d2S = 2.0 * g[..., :, None] * g[..., None, :]
    return dS[..., None, None, :], d2S[..., None, None, :, :]


def make_model2() -> DiffusionModel:
    """``dX = -beta1 (X - beta2) dt + (alpha1 + alpha2/(1+X^2) + alpha3 cos^2 X) dW``."""
    return DiffusionModel(
        name="model2", state_dim=1, noise_dim=1, alpha_dim=3, beta_dim=2,
        drift=_m2_drift, diffusion=_m2_diffusion,
        drift_jacobian_beta=_m2_drift_jac, drift_hessian_beta=_m2_drift_hess,
        diffusion_derivs_alpha=_m2_S_derivs,
    )


_REGISTRY: dict[str, Callable[[], DiffusionModel]] = {
    "ou": make_ou_model,
    "model2": make_model2,
}


def register_model(name: str, factory: Callable[[], DiffusionModel]) -> None:
    """Make a user model addressable by name (CLI configs, experiments)."""
    _REGISTRY[name] = factory


def get_model(name: str) -> DiffusionModel:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None


def model_names() -> list[str]:
    return sorted(_REGISTRY)
