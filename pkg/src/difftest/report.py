"""CSV and JSON writers for experiment results.

Every CSV starts with ``# config: <json>`` and ``# master_seed: <int>``
comment lines, so a file on its own is enough to rerun the experiment.
Only the JSON summary carries a timestamp and wall time; the CSVs are
byte-identical across reruns.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path

from . import __version__
from .hypotest import STATISTICS
from .mc import STAGES, ExperimentResult

_FMT = "{:.17g}"


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool,)):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return _FMT.format(float(v))


def _header(result: ExperimentResult) -> list[str]:
    echo = json.dumps(result.config.echo(), sort_keys=True, separators=(",", ":"))
    return [f"# config: {echo}", f"# master_seed: {result.config.master_seed}"]


def _write_csv(path: Path, result: ExperimentResult, columns: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in _header(result):
            fh.write(line + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([c if isinstance(c, str) else _num(c) for c in row])


def _case_rows(result):
    for n, s in result.summaries.items():
        for k in STATISTICS:
            for case, count in enumerate(s.case_counts[k], start=1):
                yield [n, k, str(case), count, count / s.valid if s.valid else math.nan]
            yield [n, k, "failed", s.failures, s.failures / s.replications]


def _rate_rows(result):
    for n, s in result.summaries.items():
        for stage in STAGES:
            for k in STATISTICS:
                key = f"{stage}.{k}"
                rate, se = s.rate(stage, k)
                yield [n, s.h, stage, k, s.rejections[key], s.valid, rate, se,
                       s.fallback_counts[stage], s.references[stage].label, s.ks[key]]


def _replication_rows(result):
    for n, recs in result.records.items():
        for r in recs:
            stats = [r.statistics.get(f"{st}.{k}") for st in STAGES for k in STATISTICS]
            cases = [r.cases.get(k) for k in STATISTICS]
            raw = list(r.lambda_raw) if r.ok else [None, None]
            fb = list(r.fallback) if r.ok else [None, None]
            yield ([n, r.index, str(r.seed), "ok" if r.ok else "failed", r.error]
                   + stats + raw + cases + fb
                   + [" ".join(_FMT.format(v) for v in r.alpha_hat),
                      " ".join(_FMT.format(v) for v in r.beta_hat)])


def _hist_rows(result):
    for n, s in result.summaries.items():
        for stage in STAGES:
            ref = s.references[stage]
            for k in STATISTICS:
                edges, counts = s.histograms[f"{stage}.{k}"]
                cdf = ref.cdf(edges)
                total = max(int(counts.sum()), 1)
                for j in range(len(counts)):
                    width = edges[j + 1] - edges[j]
                    yield [n, stage, k, edges[j], edges[j + 1], int(counts[j]),
                           counts[j] / (total * width), cdf[j + 1] - cdf[j]]


def _ecdf_rows(result):
    for n, s in result.summaries.items():
        for stage in STAGES:
            ref = s.references[stage]
            for k in STATISTICS:
                vals = sorted(result.values(n, stage, k))
                m = len(vals)
                cdf = ref.cdf(vals) if m else []
                for i, v in enumerate(vals, start=1):
                    yield [n, stage, k, i, v, i / m, cdf[i - 1]]


def summary_dict(result: ExperimentResult) -> dict:
    cfg = result.config
    per_n = {}
    for n, s in result.summaries.items():
        per_n[str(n)] = {
            "h": s.h, "nh": n * s.h, "nh2": n * s.h * s.h,
            "truth": {"alpha": list(s.truth.alpha), "beta": list(s.truth.beta)},
            "replications": s.replications, "valid": s.valid, "failures": s.failures,
            "failure_types": s.failure_types,
            "case_counts": s.case_counts,
            "rejection_rates": {
                f"{st}.{k}": {"rate": s.rate(st, k)[0], "se": s.rate(st, k)[1]}
                for st in STAGES for k in STATISTICS},
            "fallback_counts": s.fallback_counts,
            "references": {st: s.references[st].label for st in STAGES},
            "ks_distance": s.ks,
        }
    return {
        "config": cfg.echo(),
        "master_seed": cfg.master_seed,
        "seed_rule": "SeedSequence(master_seed, spawn_key=(n, index)).generate_state(1, uint64)",
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_time_seconds": result.wall_time,
        "results": per_n,
    }


def write_outputs(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """Write the CSV tables and the JSON summary; returns the paths by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = result.config.name
    paths = {k: out / f"{stem}_{k}.csv" for k in ("cases", "rates", "replications", "hist", "ecdf")}
    _write_csv(paths["cases"], result, ["n", "statistic", "case", "count", "proportion"],
               _case_rows(result))
    _write_csv(paths["rates"], result,
               ["n", "h", "stage", "statistic", "rejections", "valid", "rate", "se",
                "fallback_count", "reference", "ks_distance"], _rate_rows(result))
    _write_csv(paths["replications"], result,
               ["n", "index", "seed", "status", "error"]
               + [f"{st}_{k}" for st in STAGES for k in STATISTICS]
               + ["alpha_lambda_raw", "beta_lambda_raw"]
               + [f"case_{k}" for k in STATISTICS]
               + ["alpha_fallback", "beta_fallback", "alpha_hat", "beta_hat"],
               _replication_rows(result))
    _write_csv(paths["hist"], result,
               ["n", "stage", "statistic", "bin_lo", "bin_hi", "count", "density",
                "reference_prob"], _hist_rows(result))
    _write_csv(paths["ecdf"], result,
               ["n", "stage", "statistic", "rank", "value", "ecdf", "reference_cdf"],
               _ecdf_rows(result))
    paths["summary"] = out / f"{stem}_summary.json"
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary_dict(result), fh, indent=2, allow_nan=True)
        fh.write("\n")
    return paths
