"""Command-line interface: ``difftest simulate | test | experiment``.

Exit codes: 0 success, 2 invalid input, 3 simulation or data failure,
4 estimation failure, 5 experiment aborted (too many failed replications).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import __version__
from ._alloc import tune_allocator
from .errors import (AllStartsFailed, ConfigError, DifftestError, ExperimentAborted,
                     MalformedRow, NonFinite, NotPositiveDefinite, OptimizerInconsistency,
                     UnequalSpacing)
from .hypotest import STATISTICS, two_step_decision
from .mc import STAGES, ExperimentConfig, run_experiment
from .model import Hypothesis, ParameterSpace, Theta, eval_S, get_model, model_names
from .report import write_outputs
from .simulate import SimConfig, euler_maruyama, exact_sample, load_path, save_path

EXIT_OK, EXIT_INPUT, EXIT_DATA, EXIT_ESTIMATION, EXIT_ABORTED = 0, 2, 3, 4, 5
SEED_ENV = "DIFFTEST_SEED"


class CliConfig(ExperimentConfig):
    """Experiment config file: an :class:`ExperimentConfig` plus output settings."""

    output_dir: str = "results"
    verbosity: int = 1

    def experiment(self) -> ExperimentConfig:
        data = self.model_dump(exclude={"output_dir", "verbosity"})
        return ExperimentConfig(**data)


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- parsing helpers --------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise _Fail(EXIT_INPUT, f"expected comma-separated numbers, got {text!r}") from None


def _split_theta(text: str, model) -> Theta:
    vals = _floats(text)
    p1, p2 = model.alpha_dim, model.beta_dim
    if len(vals) != p1 + p2:
        raise _Fail(EXIT_INPUT, f"--theta needs {p1} alpha then {p2} beta values "
                                f"for model {model.name!r}, got {len(vals)}")
    return Theta(vals[:p1], vals[p1:])


def _pairs(items: Optional[Sequence[str]], flag: str) -> list[tuple[int, float]]:
    out = []
    for item in items or ():
        idx, sep, val = item.partition("=")
        try:
            if not sep:
                raise ValueError
            out.append((int(idx), float(val)))
        except ValueError:
            raise _Fail(EXIT_INPUT, f"{flag} expects idx=value (zero-based), got {item!r}") from None
    return out


def _box(text: Optional[str], dim: int, default: tuple[float, float]):
    lo, hi = default if text is None else _floats(text)[:2]
    return (lo,) * dim, (hi,) * dim


# -- commands ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    model = get_model(args.model)
    theta = _split_theta(args.theta, model)
    h = args.h if args.h is not None else args.h_rule
    x0 = _floats(args.x0) if args.x0 else [1.0] * model.state_dim
    cfg = SimConfig(n=args.n, h=h, x0=x0, substeps=args.substeps, seed=args.seed)
    use_exact = args.sampler == "exact" or (args.sampler == "auto" and model.exact_transition is not None)
    if use_exact:
        eval_S(model, np.array(cfg.x0), theta.alpha_array)
        path = exact_sample(model, theta, cfg)
    else:
        path = euler_maruyama(model, theta, cfg)
    save_path(path, args.out)
    terminal = ",".join(f"{v:.6g}" for v in path.states[-1])
    print(f"n={path.n} h={path.h:.6g} nh={path.n * path.h:.6g} terminal={terminal} -> {args.out}")
    return EXIT_OK


def cmd_test(args) -> int:
    try:
        path = load_path(args.data)
    except FileNotFoundError:
        raise _Fail(EXIT_DATA, f"data file not found: {args.data}") from None
    except DifftestError as exc:
        raise _Fail(EXIT_DATA, f"{type(exc).__name__}: {exc}") from None
    name = args.model or path.model_name
    if not name:
        raise _Fail(EXIT_INPUT, "no --model given and the data file does not name one")
    model = get_model(name)
    if path.dim != model.state_dim:
        raise _Fail(EXIT_DATA, f"data has {path.dim} state columns, model {name!r} needs {model.state_dim}")
    a_lo, a_hi = _box(args.alpha_box, model.alpha_dim, (0.1, 5.0))
    b_lo, b_hi = _box(args.beta_box, model.beta_dim, (-10.0, 10.0))
    space = ParameterSpace(a_lo, a_hi, b_lo, b_hi)
    hyp = Hypothesis(_pairs(args.fix_alpha, "--fix-alpha"), _pairs(args.fix_beta, "--fix-beta"))
    report = two_step_decision(path, model, space, hyp, args.level)
    if args.json:
        doc = report.to_dict()
        doc["data"] = {"file": str(args.data), "model": name, "n": path.n, "h": path.h}
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    print(f"data: {args.data}  model: {name}  n={path.n}  h={path.h:.6g}  nh={path.n * path.h:.6g}")
    print(f"alpha_hat={list(report.alpha_hat)}  alpha_tilde={list(report.alpha_tilde)}")
    print(f"beta_hat={list(report.beta_hat)}  beta_tilde={list(report.beta_tilde)}")
    print(f"{'stage':<6} {'stat':<7} {'value':>12} {'df':>3} {'p-value':>10}  reject")
    for res in (report.stage1, report.stage2):
        for k, label in zip(STATISTICS, ("LR", "Wald", "Rao")):
            p = getattr(res, f"p_{k}")
            print(f"{res.stage:<6} {label:<7} {res.statistic(k):>12.6g} {res.df:>3} "
                  f"{p:>10.4g}  {'yes' if res.rejects(k) else 'no'}")
        if res.fallback_flag:
            print(f"{res.stage:<6} note: singular information matrix, Rao uses the identity")
    cases = "  ".join(f"{lab}={report.case_by_statistic[k]}"
                      for k, lab in zip(STATISTICS, ("LR", "Wald", "Rao")))
    print(f"case (level {report.level:g}): {cases}")
    return EXIT_OK


def _resolve_config_path(text: str) -> Path:
    p = Path(text)
    if p.exists():
        return p
    name = text if text.endswith(".json") else text + ".json"
    bundled = resources.files("difftest").joinpath("configs", name)
    if bundled.is_file():
        return Path(str(bundled))
    raise _Fail(EXIT_INPUT, f"config file not found: {text}")


def load_cli_config(path, seed_override: Optional[str] = None) -> CliConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise _Fail(EXIT_INPUT, f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise _Fail(EXIT_INPUT, f"{path}: config must be a JSON object")
    if seed_override is not None:
        try:
            raw["master_seed"] = int(seed_override)
        except ValueError:
            raise _Fail(EXIT_INPUT, f"{SEED_ENV} must be an integer, got {seed_override!r}") from None
    try:
        return CliConfig(**raw)
    except ValidationError as exc:
        raise _Fail(EXIT_INPUT, f"{path}: invalid config\n{exc}") from None


def cmd_experiment(args) -> int:
    cli_cfg = load_cli_config(_resolve_config_path(args.config), os.environ.get(SEED_ENV))
    cfg = cli_cfg.experiment()
    if args.allow_large_n and not cfg.allow_large_n:
        cfg = cfg.model_copy(update={"allow_large_n": True})
    cfg.validate_against_model()
    out_dir = Path(args.output_dir or cli_cfg.output_dir)
    verbosity = cli_cfg.verbosity if args.verbosity is None else args.verbosity
    total = cfg.replications * len(cfg.n_list)
    reported = [0]

    def progress(done: int, _total: int) -> None:
        decile = done * 10 // total
        if verbosity > 0 and decile > reported[0]:
            reported[0] = decile
            print(f"[{cfg.name}] {done}/{total} replications ({decile * 10}%)",
                  file=sys.stderr, flush=True)

    result = run_experiment(cfg, threads=args.threads, progress=progress)
    paths = write_outputs(result, out_dir)
    if verbosity > 0:
        for n, s in result.summaries.items():
            print(f"n={n} h={s.h:.6g} nh={n * s.h:.4g} valid={s.valid} failures={s.failures}")
            for k in STATISTICS:
                print(f"  {k:<6} cases {s.case_counts[k]}  "
                      + "  ".join(f"{st} rate {s.rate(st, k)[0]:.3f}" for st in STAGES))
        print(f"wall time {result.wall_time:.1f}s; outputs in {out_dir}")
    for kind, p in paths.items():
        if verbosity > 1:
            print(f"{kind}: {p}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difftest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a sample path to CSV")
    sim.add_argument("--model", required=True, help=f"one of {model_names()}")
    sim.add_argument("--theta", required=True, help="alpha values then beta values, comma-separated")
    sim.add_argument("--n", type=int, required=True, help="number of increments")
    step = sim.add_mutually_exclusive_group()
    step.add_argument("--h", type=float, help="explicit step size")
    step.add_argument("--h-rule", default="n^-2/3", help="step rule such as n^-2/3 (default)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output CSV (.gz for gzip)")
    sim.add_argument("--x0", help="initial state, comma-separated (default 1.0 per coordinate)")
    sim.add_argument("--substeps", type=int, default=10, help="Euler substeps per observation")
    sim.add_argument("--sampler", choices=("auto", "euler", "exact"), default="auto",
                     help="auto: exact transition when the model has one, else Euler")
    sim.set_defaults(func=cmd_simulate)

    tst = sub.add_parser("test", help="two-step LR/Wald/Rao test on a path file")
    tst.add_argument("--data", required=True)
    tst.add_argument("--model", help="model name (default: taken from the file header)")
    tst.add_argument("--fix-alpha", nargs="+", metavar="IDX=VAL", required=True,
                     help="stage-1 null: zero-based alpha components and values")
    tst.add_argument("--fix-beta", nargs="+", metavar="IDX=VAL", required=True,
                     help="stage-2 null: zero-based beta components and values")
    tst.add_argument("--level", type=float, default=0.05)
    tst.add_argument("--alpha-box", help="lo,hi for every alpha component (default 0.1,5)")
    tst.add_argument("--beta-box", help="lo,hi for every beta component (default -10,10)")
    tst.add_argument("--json", action="store_true", help="machine-readable report")
    tst.set_defaults(func=cmd_test)

    exp = sub.add_parser("experiment", help="run a Monte Carlo experiment from a JSON config")
    exp.add_argument("config", help="config file, or the name of a bundled config")
    exp.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    exp.add_argument("--output-dir", help="overrides output_dir from the config")
    exp.add_argument("--allow-large-n", action="store_true", help="permit n > 1e5")
    exp.add_argument("--verbosity", type=int, choices=(0, 1, 2))
    exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tune_allocator()
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"difftest: error: {exc}", file=sys.stderr)
        return exc.code
    except ExperimentAborted as exc:
        print(f"difftest: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (NotPositiveDefinite, NonFinite, MalformedRow, UnequalSpacing) as exc:
        if args.command == "test" and isinstance(exc, (NotPositiveDefinite, NonFinite)):
            print(f"difftest: estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_ESTIMATION
        print(f"difftest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AllStartsFailed, OptimizerInconsistency) as exc:
        print(f"difftest: estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except ConfigError as exc:
        print(f"difftest: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DifftestError as exc:
        print(f"difftest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
