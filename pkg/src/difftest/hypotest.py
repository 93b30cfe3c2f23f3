"""Likelihood-ratio, Wald and Rao statistics for the two-stage test.

Stage 1 tests the diffusion parameter with ``u1``; stage 2 tests the drift
parameter with ``u2`` conditioned on the unconstrained stage-1 estimate,
whatever stage 1 decided.  Each statistic type then gets a case:

====  ==================  =================
case  alpha rejected      beta rejected
====  ==================  =================
1     no                  no
2     no                  yes
3     yes                 no
4     yes                 yes
====  ==================  =================
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import special

from . import quasilik
from .errors import ConfigError, OptimizerInconsistency
from .estimate import FitResult, fit_alpha, fit_beta
from .model import DiffusionModel, Hypothesis, ParameterSpace
from .simulate import SamplePath

CLAMP_TOL = 2e-9
STATISTICS = ("lambda", "wald", "rao")
_TAIL_WEIGHT = 1e-12
_TIE_RTOL = 1e-14


# -- chi-squared laws -----------------------------------------------------------

def chi2_cdf(x, df: int):
    """Central chi-squared CDF via the regularised lower incomplete gamma."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = special.gammainc(df / 2.0, x / 2.0)
    return float(out) if out.ndim == 0 else out


def chi2_sf(x, df: int):
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = special.gammaincc(df / 2.0, x / 2.0)
    return float(out) if out.ndim == 0 else out


def chi2_quantile(q: float, df: int) -> float:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")
    return 2.0 * float(special.gammaincinv(df / 2.0, q))


def noncentral_chi2_cdf(x, df: int, noncentrality: float):
    """Poisson mixture ``sum_j Pois(j; c/2) F_{df + 2j}(x)``.

    The series stops once the Poisson mass beyond the last term is below
    ``1e-12``; ``c = 0`` is exactly the central law.
    """
    c = float(noncentrality)
    if c < 0:
        raise ValueError("noncentrality must be nonnegative")
    if c == 0.0:
        return chi2_cdf(x, df)
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    lam = c / 2.0
    total = np.zeros_like(x)
    j = 0
    while True:
        log_w = -lam + j * math.log(lam) - math.lgamma(j + 1)
        total = total + math.exp(log_w) * special.gammainc(df / 2.0 + j, x / 2.0)
        # P(J > j) for J ~ Poisson(lam)
        if j >= lam and special.gammainc(j + 1, lam) < _TAIL_WEIGHT:
            break
        j += 1
    out = np.clip(total, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# -- results --------------------------------------------------------------------

@dataclass(frozen=True)
class StageResult:
    stage: str
    lambda_: float
    wald: float
    rao: float
    df: int
    p_lambda: float
    p_wald: float
    p_rao: float
    reject_lambda: bool
    reject_wald: bool
    reject_rao: bool
    fallback_flag: bool
    # likelihood-ratio value before clamping, kept to audit feasible-set nesting
    lambda_raw: float = 0.0

    def statistic(self, kind: str) -> float:
        return {"lambda": self.lambda_, "wald": self.wald, "rao": self.rao}[kind]

    def rejects(self, kind: str) -> bool:
        return {"lambda": self.reject_lambda, "wald": self.reject_wald,
                "rao": self.reject_rao}[kind]

    def to_dict(self) -> dict:
        return {("lambda" if k == "lambda_" else k): v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class TestReport:
    stage1: StageResult
    stage2: StageResult
    case_by_statistic: dict
    alpha_hat: tuple
    alpha_tilde: tuple
    beta_hat: tuple
    beta_tilde: tuple
    level: float
    diagnostics: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "case_by_statistic": dict(self.case_by_statistic),
            "estimates": {
                "alpha_hat": list(self.alpha_hat), "alpha_tilde": list(self.alpha_tilde),
                "beta_hat": list(self.beta_hat), "beta_tilde": list(self.beta_tilde),
            },
            "level": self.level,
            "diagnostics": dict(self.diagnostics),
        }


def case_number(reject1: bool, reject2: bool) -> int:
    return 1 + 2 * bool(reject1) + bool(reject2)


# -- statistics -----------------------------------------------------------------

def _clamp(value: float, what: str) -> float:
    if value >= 0.0:
        return float(value) + 0.0  # no negative zero
    if value >= -CLAMP_TOL:
        return 0.0
    raise OptimizerInconsistency(
        f"{what} = {value:.3e} is below -{CLAMP_TOL:g}: the constrained fit beat the unconstrained one")


def _assemble(stage: str, lam_raw: float, wald: float, rao: float, df: int,
              level: float, fallback: bool) -> StageResult:
    lam = _clamp(lam_raw, f"{stage} likelihood ratio")
    wald = _clamp(wald, f"{stage} Wald statistic")
    rao = _clamp(rao, f"{stage} Rao statistic")
    crit = chi2_quantile(1.0 - level, df)
    return StageResult(
        stage=stage, lambda_=lam, wald=wald, rao=rao, df=df,
        p_lambda=chi2_sf(lam, df), p_wald=chi2_sf(wald, df), p_rao=chi2_sf(rao, df),
        reject_lambda=lam > crit, reject_wald=wald > crit, reject_rao=rao > crit,
        fallback_flag=fallback, lambda_raw=float(lam_raw),
    )


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"significance level must lie in (0, 1), got {level}")


def _prefer_constrained(hat: FitResult, tilde: FitResult) -> FitResult:
    # the constrained optimum is feasible for the full problem; when the two
    # tie to rounding, reusing it makes coincident estimators exactly equal
    if tilde.objective >= hat.objective - _TIE_RTOL * max(1.0, abs(hat.objective)):
        return replace(hat, theta_hat=tilde.theta_hat.copy(), objective=tilde.objective)
    return hat


def _alpha_fits(path, model, space, hyp) -> tuple[FitResult, FitResult]:
    if not hyp.alpha_fixed:
        raise ConfigError("the stage-1 hypothesis must fix at least one alpha component")
    tilde = fit_alpha(path, model, space, hyp)
    # seeding the full fit with the constrained optimum guarantees nesting
    hat = fit_alpha(path, model, space, extra_starts=[tilde.theta_hat])
    return _prefer_constrained(hat, tilde), tilde


def _beta_fits(path, model, space, hyp, alpha_hat) -> tuple[FitResult, FitResult]:
    if not hyp.beta_fixed:
        raise ConfigError("the stage-2 hypothesis must fix at least one beta component")
    tilde = fit_beta(path, model, space, alpha_hat, hyp)
    hat = fit_beta(path, model, space, alpha_hat, extra_starts=[tilde.theta_hat])
    return _prefer_constrained(hat, tilde), tilde


def _stage1_from_fits(path, model, hat, tilde, df, level) -> StageResult:
    n = path.n
    a_hat, a_tilde = hat.theta_hat, tilde.theta_hat
    lam = -2.0 * (quasilik.u1(path, model, a_tilde) - quasilik.u1(path, model, a_hat))
    info = quasilik.info_a(path, model, a_hat)
    diff = a_hat - a_tilde
    wald = n * float(diff @ info.raw @ diff)
    score = quasilik.score_u1(path, model, a_tilde)
    rao = float(score @ info.rao_weight() @ score) / n
    return _assemble("alpha", lam, wald, rao, df, level, info.singular_fallback_used)


def _stage2_from_fits(path, model, hat, tilde, alpha_hat, df, level) -> StageResult:
    nh = path.n * path.h
    b_hat, b_tilde = hat.theta_hat, tilde.theta_hat
    lam = -2.0 * (quasilik.u2(path, model, b_tilde, alpha_hat)
                  - quasilik.u2(path, model, b_hat, alpha_hat))
    info = quasilik.info_b(path, model, b_hat, alpha_hat)
    diff = b_hat - b_tilde
    wald = nh * float(diff @ info.raw @ diff)
    score = quasilik.score_u2(path, model, b_tilde, alpha_hat)
    rao = float(score @ info.rao_weight() @ score) / nh
    return _assemble("beta", lam, wald, rao, df, level, info.singular_fallback_used)


def _prepare(model, space, hyp):
    space.check_dims(model)
    hyp.validate(space)


def stage1_statistics(path: SamplePath, model: DiffusionModel, space: ParameterSpace,
                      hyp: Hypothesis, level: float = 0.05) -> StageResult:
    """Statistics for ``H0: alpha_i = v_i`` over the pinned components."""
    _check_level(level)
    _prepare(model, space, hyp)
    hat, tilde = _alpha_fits(path, model, space, hyp)
    return _stage1_from_fits(path, model, hat, tilde, len(hyp.alpha_fixed), level)


def stage2_statistics(path: SamplePath, model: DiffusionModel, space: ParameterSpace,
                      hyp: Hypothesis, alpha_hat, level: float = 0.05) -> StageResult:
    """Statistics for ``H0: beta_i = v_i`` given the unconstrained ``alpha_hat``."""
    _check_level(level)
    _prepare(model, space, hyp)
    alpha_hat = np.asarray(alpha_hat, dtype=float)
    hat, tilde = _beta_fits(path, model, space, hyp, alpha_hat)
    return _stage2_from_fits(path, model, hat, tilde, alpha_hat, len(hyp.beta_fixed), level)


def two_step_decision(path: SamplePath, model: DiffusionModel, space: ParameterSpace,
                      hyp: Hypothesis, level: float = 0.05,
                      hyp_beta: Optional[Hypothesis] = None) -> TestReport:
    """Run both stages and map each statistic's pair of decisions to a case.

    ``hyp`` carries both stages' pinned components; ``hyp_beta`` may supply
    a separate stage-2 hypothesis (its ``alpha_fixed`` is ignored).
    """
    _check_level(level)
    if hyp_beta is not None:
        hyp = Hypothesis(hyp.alpha_fixed, hyp_beta.beta_fixed)
    _prepare(model, space, hyp)
    a_hat, a_tilde = _alpha_fits(path, model, space, hyp)
    s1 = _stage1_from_fits(path, model, a_hat, a_tilde, len(hyp.alpha_fixed), level)
    alpha_hat = a_hat.theta_hat
    b_hat, b_tilde = _beta_fits(path, model, space, hyp, alpha_hat)
    s2 = _stage2_from_fits(path, model, b_hat, b_tilde, alpha_hat, len(hyp.beta_fixed), level)
    cases = {k: case_number(s1.rejects(k), s2.rejects(k)) for k in STATISTICS}
    diagnostics = {
        "converged": {"alpha_hat": a_hat.converged, "alpha_tilde": a_tilde.converged,
                      "beta_hat": b_hat.converged, "beta_tilde": b_tilde.converged},
        "at_boundary": {"alpha_hat": a_hat.at_boundary, "alpha_tilde": a_tilde.at_boundary,
                        "beta_hat": b_hat.at_boundary, "beta_tilde": b_tilde.at_boundary},
        "n": path.n, "h": path.h,
    }
    return TestReport(
        stage1=s1, stage2=s2, case_by_statistic=cases,
        alpha_hat=tuple(map(float, alpha_hat)), alpha_tilde=tuple(map(float, a_tilde.theta_hat)),
        beta_hat=tuple(map(float, b_hat.theta_hat)), beta_tilde=tuple(map(float, b_tilde.theta_hat)),
        level=float(level), diagnostics=diagnostics,
    )
