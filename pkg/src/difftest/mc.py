"""Monte Carlo experiments: case tables, sizes, powers, null and local-alternative laws.

Replication ``i`` at sample size ``n`` draws its path from a seed derived
from ``(master_seed, n, i)`` alone, and replications are grouped into
fixed index blocks, so results do not depend on thread count or
scheduling order.
"""

from __future__ import annotations

import math
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ._alloc import tune_allocator
from .errors import (ConfigError, DifftestError, ExperimentAborted,
                     MissingInvariantDensity)
from .hypotest import (STATISTICS, chi2_cdf, chi2_quantile, noncentral_chi2_cdf,
                       two_step_decision)
from .model import DiffusionModel, Hypothesis, ParameterSpace, Theta, get_model
from .simulate import SamplePath, euler_batch, make_rng, replication_seed, resolve_h

LARGE_N = 100_000
ABORT_FRACTION = 0.2
BLOCK_SIZE = 16
QUAD_TOL = 1e-8
STAGES = ("alpha", "beta")


# -- configuration ----------------------------------------------------------------

class TruthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: list[float] = Field(min_length=1)
    beta: list[float] = Field(min_length=1)


class SpaceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_lower: list[float]
    alpha_upper: list[float]
    beta_lower: list[float]
    beta_upper: list[float]


class ExperimentConfig(BaseModel):
    """One Monte Carlo study.

    ``hyp1`` / ``hyp2`` list ``[index, value]`` pairs (zero-based) pinned
    under the stage-1 (alpha) and stage-2 (beta) null.  Every mode runs the
    full two-step test; ``mode`` picks the reference law for the KS
    distances and, for ``local_alt``, moves the truth to
    ``alpha + u_alpha / sqrt(n)``, ``beta + u_beta / sqrt(n h)``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "experiment"
    description: str = ""
    model: str
    truth: TruthConfig
    hyp1: list[tuple[int, float]] = Field(min_length=1)
    hyp2: list[tuple[int, float]] = Field(min_length=1)
    space: Optional[SpaceConfig] = None
    n_list: list[int] = Field(default_factory=lambda: [10_000, 100_000], min_length=1)
    h_rule: Union[str, float] = "n^-2/3"
    replications: int = Field(default=300, ge=1)
    level: float = Field(default=0.05, gt=0.0, lt=1.0)
    master_seed: int = Field(default=20240601, ge=0)
    mode: Literal["case_table", "size", "power", "null_dist", "local_alt"] = "case_table"
    u_alpha: Optional[list[float]] = None
    u_beta: Optional[list[float]] = None
    x0: Optional[list[float]] = None
    substeps: int = Field(default=10, ge=1)
    sampler: Literal["auto", "euler", "exact"] = "auto"
    allow_large_n: bool = False
    hist_bins: int = Field(default=40, ge=1)

    @field_validator("n_list")
    @classmethod
    def _n_positive(cls, v):
        if any(n < 2 for n in v):
            raise ValueError("every n must be at least 2")
        return v

    @field_validator("h_rule")
    @classmethod
    def _h_valid(cls, v):
        resolve_h(v, 100)
        return v

    @model_validator(mode="after")
    def _local_alt_fields(self):
        if self.mode == "local_alt":
            if self.u_alpha is None or self.u_beta is None:
                raise ValueError("local_alt mode needs both u_alpha and u_beta")
        elif self.u_alpha is not None or self.u_beta is not None:
            raise ValueError("u_alpha/u_beta are only meaningful in local_alt mode")
        return self

    # derived objects

    def get_model(self) -> DiffusionModel:
        return get_model(self.model)

    def parameter_space(self, model: DiffusionModel) -> ParameterSpace:
        if self.space is None:
            return ParameterSpace.uniform(model.alpha_dim, model.beta_dim)
        s = self.space
        return ParameterSpace(s.alpha_lower, s.alpha_upper, s.beta_lower, s.beta_upper)

    def hypothesis(self) -> Hypothesis:
        return Hypothesis(self.hyp1, self.hyp2)

    def truth_theta(self) -> Theta:
        return Theta(self.truth.alpha, self.truth.beta)

    def validate_against_model(self) -> DiffusionModel:
        model = self.get_model()
        self.truth_theta().check_dims(model)
        space = self.parameter_space(model)
        space.check_dims(model)
        self.hypothesis().validate(space)
        if self.x0 is not None and len(self.x0) != model.state_dim:
            raise ConfigError(f"x0 must have {model.state_dim} components")
        if self.mode == "local_alt":
            if len(self.u_alpha) != model.alpha_dim or len(self.u_beta) != model.beta_dim:
                raise ConfigError("u_alpha/u_beta must match the parameter dimensions")
            if len(self.hyp1) != model.alpha_dim or len(self.hyp2) != model.beta_dim:
                raise ConfigError("local_alt mode needs hypotheses fixing every component")
        if self.sampler == "exact" and model.exact_transition is None:
            raise ConfigError(f"model {model.name!r} has no exact sampler")
        big = [n for n in self.n_list if n > LARGE_N]
        if big and not self.allow_large_n:
            raise ConfigError(f"n = {big} exceeds {LARGE_N}; set allow_large_n to run it")
        return model

    def echo(self) -> dict:
        return self.model_dump(mode="json")


# -- quadrature, reference laws, KS ---------------------------------------------

def adaptive_simpson(f: Callable[[float], float], a: float, b: float,
                     tol: float = QUAD_TOL, max_depth: int = 50, panels: int = 16) -> float:
    """Adaptive Simpson rule with Richardson correction, absolute tolerance ``tol``.

    The interval is first cut into ``panels`` pieces so narrow features are
    not skipped by the initial five-point estimate.
    """
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("integration limits must be finite")
    if a == b:
        return 0.0
    total = 0.0
    edges = np.linspace(a, b, panels + 1)
    for lo, hi in zip(edges[:-1], edges[1:]):
        lo, hi = float(lo), float(hi)
        mid = 0.5 * (lo + hi)
        flo, fmid, fhi = f(lo), f(mid), f(hi)
        whole = (hi - lo) * (flo + 4 * fmid + fhi) / 6.0
        stack = [(lo, hi, flo, fmid, fhi, whole, tol / panels, 0)]
        while stack:
            lo_, hi_, fa, fm, fb, s, eps, depth = stack.pop()
            m = 0.5 * (lo_ + hi_)
            lm, rm = 0.5 * (lo_ + m), 0.5 * (m + hi_)
            flm, frm = f(lm), f(rm)
            left = (m - lo_) * (fa + 4 * flm + fm) / 6.0
            right = (hi_ - m) * (fm + 4 * frm + fb) / 6.0
            delta = left + right - s
            if depth >= max_depth or abs(delta) <= 15 * eps:
                total += left + right + delta / 15.0
            else:
                stack.append((lo_, m, fa, flm, fm, left, eps / 2, depth + 1))
                stack.append((m, hi_, fm, frm, fb, right, eps / 2, depth + 1))
    return total


@dataclass(frozen=True)
class Reference:
    """Chi-squared reference law, central when ``noncentrality == 0``."""

    df: int
    noncentrality: float = 0.0

    def cdf(self, x):
        if self.noncentrality == 0.0:
            return chi2_cdf(x, self.df)
        return noncentral_chi2_cdf(x, self.df, self.noncentrality)

    def quantile(self, q: float) -> float:
        if self.noncentrality == 0.0:
            return chi2_quantile(q, self.df)
        lo, hi = 0.0, self.df + self.noncentrality
        while self.cdf(hi) < q:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-10 * max(1.0, hi):
                break
        return 0.5 * (lo + hi)

    @property
    def label(self) -> str:
        if self.noncentrality == 0.0:
            return f"chi2({self.df})"
        return f"noncentral_chi2({self.df},{self.noncentrality:.10g})"


def ks_distance(samples, reference: Reference) -> float:
    """Sup-distance between the empirical CDF of ``samples`` and ``reference``."""
    x = np.sort(np.asarray(samples, dtype=float))
    m = len(x)
    if m < 100:
        raise ValueError(f"KS distance needs at least 100 samples, got {m}")
    F = np.asarray(reference.cdf(x), dtype=float)
    upper = np.arange(1, m + 1) / m - F
    lower = F - np.arange(m) / m
    return float(max(upper.max(), lower.max()))


# -- population oracles ---------------------------------------------------------

def _invariant(model: DiffusionModel, truth: Theta):
    if model.invariant_density is None or model.invariant_support is None:
        raise MissingInvariantDensity(f"model {model.name!r} has no invariant density")
    if model.state_dim != 1:
        raise MissingInvariantDensity("invariant-law quadrature is one-dimensional only")
    alpha, beta = truth.alpha_array, truth.beta_array
    lo, hi = model.invariant_support(alpha, beta)

    def weighted(g):
        def integrand(x):
            xs = np.array([[x]])
            return float(g(xs)) * float(model.invariant_density(np.array(x), alpha, beta))
        return adaptive_simpson(integrand, float(lo), float(hi))

    return weighted


def limit_criterion_alpha(model: DiffusionModel, alpha, truth: Theta) -> float:
    """``-1/2 E_mu[tr(S(alpha*) S(alpha)^-1) + log det S(alpha)]`` under the truth's invariant law."""
    weighted = _invariant(model, truth)
    alpha = np.asarray(alpha, dtype=float)

    def g(xs):
        S = model.S(xs, alpha)[0]
        S_star = model.S(xs, truth.alpha_array)[0]
        _, logdet = np.linalg.slogdet(S)
        return np.trace(S_star @ np.linalg.inv(S)) + logdet

    return -0.5 * weighted(g)


def limit_criterion_beta(model: DiffusionModel, beta, alpha, truth: Theta) -> float:
    """``-1/2 E_mu[S(alpha)^-1 [(b(beta*) - b(beta))^2]]`` under the truth's invariant law."""
    weighted = _invariant(model, truth)
    beta = np.asarray(beta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)

    def g(xs):
        diff = (model.drift(xs, truth.beta_array) - model.drift(xs, beta))[0]
        return diff @ np.linalg.solve(model.S(xs, alpha)[0], diff)

    return -0.5 * weighted(g)


def limit_criteria(model: DiffusionModel, truth: Theta, alpha, beta=None) -> float:
    """Stage-1 limit criterion at ``alpha``, or stage 2 at ``(alpha, beta)`` if ``beta`` is given."""
    if beta is None:
        return limit_criterion_alpha(model, alpha, truth)
    return limit_criterion_beta(model, beta, alpha, truth)


def population_info_a(model: DiffusionModel, theta0: Theta) -> np.ndarray:
    """``1/2 E_mu tr(S^-1 dS_i S^-1 dS_j)`` at the null."""
    weighted = _invariant(model, theta0)
    alpha = theta0.alpha_array
    p = model.alpha_dim
    out = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            def g(xs, i=i, j=j):
                dS, _ = model.S_derivs(xs, alpha)
                Sinv = np.linalg.inv(model.S(xs, alpha)[0])
                return 0.5 * np.trace(Sinv @ dS[0, ..., i] @ Sinv @ dS[0, ..., j])
            out[i, j] = out[j, i] = weighted(g)
    return out


def population_info_b(model: DiffusionModel, theta0: Theta) -> np.ndarray:
    """``E_mu (db_i)^T S^-1 (db_j)`` at the null."""
    weighted = _invariant(model, theta0)
    alpha, beta = theta0.alpha_array, theta0.beta_array
    p = model.beta_dim
    out = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            def g(xs, i=i, j=j):
                J = model.drift_jac(xs, beta)[0]
                return J[:, i] @ np.linalg.solve(model.S(xs, alpha)[0], J[:, j])
            out[i, j] = out[j, i] = weighted(g)
    return out


def noncentrality(model: DiffusionModel, theta0: Theta, u_alpha, u_beta) -> tuple[float, float]:
    """``(u_alpha' I_a u_alpha, u_beta' I_b u_beta)`` with population information at the null."""
    ua = np.asarray(u_alpha, dtype=float)
    ub = np.asarray(u_beta, dtype=float)
    c_a = float(ua @ population_info_a(model, theta0) @ ua) if np.any(ua) else 0.0
    c_b = float(ub @ population_info_b(model, theta0) @ ub) if np.any(ub) else 0.0
    return c_a, c_b


def local_truth(theta0: Theta, u_alpha, u_beta, n: int, h: float) -> Theta:
    return Theta(theta0.alpha_array + np.asarray(u_alpha, float) / math.sqrt(n),
                 theta0.beta_array + np.asarray(u_beta, float) / math.sqrt(n * h))


# -- results --------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationRecord:
    index: int
    n: int
    seed: int
    ok: bool
    error: str = ""
    # keyed "alpha.lambda", "beta.rao", ... for the six statistics
    statistics: dict = field(default_factory=dict)
    lambda_raw: tuple = ()
    rejects: dict = field(default_factory=dict)
    cases: dict = field(default_factory=dict)
    fallback: tuple = (False, False)
    alpha_hat: tuple = ()
    beta_hat: tuple = ()


@dataclass
class SizeSummary:
    n: int
    h: float
    truth: Theta
    replications: int
    failures: int
    failure_types: dict
    case_counts: dict            # statistic -> [c1, c2, c3, c4]
    rejections: dict             # "stage.statistic" -> count
    valid: int
    fallback_counts: dict        # stage -> count
    references: dict             # stage -> Reference
    ks: dict                     # "stage.statistic" -> distance (None below 100 samples)
    histograms: dict             # "stage.statistic" -> (edges, counts)

    def rate(self, stage: str, stat: str) -> tuple[float, float]:
        """Rejection rate and its binomial standard error."""
        if self.valid == 0:
            return math.nan, math.nan
        p = self.rejections[f"{stage}.{stat}"] / self.valid
        return p, math.sqrt(p * (1 - p) / self.valid)

    def case_proportions(self, stat: str) -> list[float]:
        total = max(self.valid, 1)
        return [c / total for c in self.case_counts[stat]]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summaries: dict              # n -> SizeSummary
    records: dict                # n -> list[ReplicationRecord] in index order
    wall_time: float

    def values(self, n: int, stage: str, stat: str) -> np.ndarray:
        """Statistic values of the successful replications, in replication order."""
        key = f"{stage}.{stat}"
        return np.array([r.statistics[key] for r in self.records[n] if r.ok])


# -- engine ---------------------------------------------------------------------

@dataclass(frozen=True)
class _Plan:
    model: DiffusionModel
    space: ParameterSpace
    hyp: Hypothesis
    n: int
    h: float
    truth: Theta
    x0: np.ndarray
    substeps: int
    exact: bool
    level: float


def _simulate_block(plan: _Plan, seeds: list[int]) -> list[Optional[np.ndarray]]:
    model, n, h = plan.model, plan.n, plan.h
    if plan.exact:
        out = []
        for s in seeds:
            z = make_rng(s).standard_normal((n, model.state_dim))
            states = model.exact_transition(plan.truth.alpha_array, plan.truth.beta_array,
                                            plan.x0, h, n, z)
            out.append(states if np.all(np.isfinite(states)) else None)
        return out
    states, ok = euler_batch(model, plan.truth, plan.x0, h, n, plan.substeps, seeds)
    return [states[k] if ok[k] else None for k in range(len(seeds))]


def _replicate(plan: _Plan, index: int, seed: int, states: Optional[np.ndarray]) -> ReplicationRecord:
    if states is None:
        return ReplicationRecord(index, plan.n, seed, False, "NonFinite")
    try:
        path = SamplePath(h=plan.h, states=states, model_name=plan.model.name)
        rep = two_step_decision(path, plan.model, plan.space, plan.hyp, plan.level)
    except DifftestError as exc:
        return ReplicationRecord(index, plan.n, seed, False, type(exc).__name__)
    stats, rejects = {}, {}
    for stage, res in (("alpha", rep.stage1), ("beta", rep.stage2)):
        for k in STATISTICS:
            stats[f"{stage}.{k}"] = res.statistic(k)
            rejects[f"{stage}.{k}"] = res.rejects(k)
    return ReplicationRecord(
        index, plan.n, seed, True, "", stats,
        (rep.stage1.lambda_raw, rep.stage2.lambda_raw), rejects,
        dict(rep.case_by_statistic), (rep.stage1.fallback_flag, rep.stage2.fallback_flag),
        rep.alpha_hat, rep.beta_hat,
    )


def _run_block(plan: _Plan, indices: range, master_seed: int) -> list[ReplicationRecord]:
    seeds = [replication_seed(master_seed, plan.n, i) for i in indices]
    paths = _simulate_block(plan, seeds)
    return [_replicate(plan, i, s, p) for i, s, p in zip(indices, seeds, paths)]


def _histogram(values: np.ndarray, ref: Reference, bins: int):
    upper = ref.quantile(0.999)
    if len(values):
        upper = max(upper, float(values.max()))
    edges = np.linspace(0.0, upper, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return edges, counts


def _summarise(cfg: ExperimentConfig, plan: _Plan, records: list[ReplicationRecord],
               references: dict) -> SizeSummary:
    good = [r for r in records if r.ok]
    cases = {k: [0, 0, 0, 0] for k in STATISTICS}
    for r in good:
        for k in STATISTICS:
            cases[k][r.cases[k] - 1] += 1
    rejections, ks, hists = {}, {}, {}
    for stage in STAGES:
        for k in STATISTICS:
            key = f"{stage}.{k}"
            vals = np.array([r.statistics[key] for r in good])
            rejections[key] = sum(r.rejects[key] for r in good)
            ks[key] = ks_distance(vals, references[stage]) if len(vals) >= 100 else None
            hists[key] = _histogram(vals, references[stage], cfg.hist_bins)
    return SizeSummary(
        n=plan.n, h=plan.h, truth=plan.truth, replications=len(records),
        failures=len(records) - len(good),
        failure_types=dict(sorted(Counter(r.error for r in records if not r.ok).items())),
        case_counts=cases, rejections=rejections, valid=len(good),
        fallback_counts={"alpha": sum(r.fallback[0] for r in good),
                         "beta": sum(r.fallback[1] for r in good)},
        references=references, ks=ks, histograms=hists,
    )


def reference_laws(cfg: ExperimentConfig, model: DiffusionModel) -> dict:
    df = {"alpha": len(cfg.hyp1), "beta": len(cfg.hyp2)}
    if cfg.mode != "local_alt":
        return {s: Reference(df[s]) for s in STAGES}
    try:
        c_a, c_b = noncentrality(model, cfg.truth_theta(), cfg.u_alpha, cfg.u_beta)
    except MissingInvariantDensity:
        return {s: Reference(df[s]) for s in STAGES}
    return {"alpha": Reference(df["alpha"], c_a), "beta": Reference(df["beta"], c_b)}


def run_experiment(cfg: ExperimentConfig, threads: Optional[int] = None,
                   progress: Optional[Callable[[int, int], None]] = None) -> ExperimentResult:
    """Run every replication at every ``n`` and aggregate.

    ``progress(done, total)`` is called after each finished block.  Raises
    :class:`ExperimentAborted` when more than 20% of the replications at
    some ``n`` fail.
    """
    tune_allocator()
    model = cfg.validate_against_model()
    space = cfg.parameter_space(model)
    hyp = cfg.hypothesis()
    theta0 = cfg.truth_theta()
    x0 = np.array(cfg.x0 if cfg.x0 is not None else [1.0] * model.state_dim)
    exact = cfg.sampler == "exact" or (cfg.sampler == "auto" and model.exact_transition is not None)
    references = reference_laws(cfg, model)
    threads = max(1, threads or os.cpu_count() or 1)

    start = time.perf_counter()
    R = cfg.replications
    total = R * len(cfg.n_list)
    done = 0
    summaries, records = {}, {}
    for n in cfg.n_list:
        h = resolve_h(cfg.h_rule, n)
        truth = local_truth(theta0, cfg.u_alpha, cfg.u_beta, n, h) if cfg.mode == "local_alt" else theta0
        plan = _Plan(model, space, hyp, n, h, truth, x0, cfg.substeps, exact, cfg.level)
        blocks = [range(s, min(s + BLOCK_SIZE, R)) for s in range(0, R, BLOCK_SIZE)]
        results: list[list[ReplicationRecord]] = [[] for _ in blocks]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_run_block, plan, b, cfg.master_seed): k
                       for k, b in enumerate(blocks)}
            for fut in as_completed(futures):
                results[futures[fut]] = fut.result()
                done += len(blocks[futures[fut]])
                if progress is not None:
                    progress(done, total)
        recs = [r for block in results for r in block]
        failures = sum(not r.ok for r in recs)
        if failures > ABORT_FRACTION * R:
            raise ExperimentAborted(
                f"{failures} of {R} replications failed at n={n} "
                f"({dict(Counter(r.error for r in recs if not r.ok))})")
        records[n] = recs
        summaries[n] = _summarise(cfg, plan, recs, references)
    return ExperimentResult(cfg, summaries, records, time.perf_counter() - start)

