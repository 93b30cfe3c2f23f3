"""Sample-path generation and path files."""

from __future__ import annotations

import csv
import gzip
import io
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, MalformedRow, NonFinite, UnequalSpacing
from .model import DiffusionModel, Theta, eval_S

OVERFLOW_GUARD = 1e12
_CHUNK = 4096
_RULE = re.compile(r"^\s*n\s*\^\s*\(?\s*(-?\d+(?:\.\d+)?)\s*(?:/\s*(\d+(?:\.\d+)?))?\s*\)?\s*$")


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Equally spaced observations ``X_{t_0}, ..., X_{t_n}`` with ``t_i = i h``."""

    h: float
    states: np.ndarray
    model_name: str = ""

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] < 3:
            raise ConfigError("a sample path needs n >= 2 increments (n + 1 >= 3 rows)")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ConfigError(f"step h must be positive and finite, got {self.h}")
        if not np.all(np.isfinite(states)):
            raise NonFinite("sample path contains non-finite states")
        states.setflags(write=False)
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "states", states)

    @property
    def n(self) -> int:
        return self.states.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.h

    @cached_property
    def x_prev(self) -> np.ndarray:
        return self.states[:-1]

    @cached_property
    def dx(self) -> np.ndarray:
        out = np.diff(self.states, axis=0)
        out.setflags(write=False)
        return out


@dataclass(frozen=True)
class SimConfig:
    """Sampling design: ``n`` steps of size ``h`` (a number or a rule like ``"n^-2/3"``)."""

    n: int
    h: Union[float, str] = "n^-2/3"
    x0: Sequence[float] = (1.0,)
    substeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if int(self.n) < 2:
            raise ConfigError("n must be at least 2")
        if int(self.substeps) < 1:
            raise ConfigError("substeps must be >= 1")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        step = resolve_h(self.h, self.n)
        if not math.isfinite(self.n * step):
            raise ConfigError("n * h must be finite")

    @property
    def step(self) -> float:
        return resolve_h(self.h, self.n)


def resolve_h(h: Union[float, str], n: int) -> float:
    """Step size from a number or a power rule ``"n^-p/q"`` (``"n^(-2/3)"`` also accepted)."""
    if isinstance(h, str):
        m = _RULE.match(h.replace("−", "-"))
        if not m:
            raise ConfigError(f"unrecognised h rule {h!r}; expected e.g. 'n^-2/3'")
        expo = float(m.group(1)) / (float(m.group(2)) if m.group(2) else 1.0)
        value = float(n) ** expo
    else:
        value = float(h)
    if not (value > 0 and math.isfinite(value)):
        raise ConfigError(f"step h must be positive, got {value}")
    return value


def design_summary(n: int, h: float) -> dict:
    """``n h`` and ``n h^2`` for judging the high-frequency design."""
    return {"n": n, "h": h, "nh": n * h, "nh2": n * h * h}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def replication_seed(master_seed: int, n: int, index: int) -> int:
    """Order-independent 64-bit seed for replication ``index`` at sample size ``n``."""
    ss = np.random.SeedSequence(int(master_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(n), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def euler_batch(model: DiffusionModel, theta: Theta, x0, h: float, n: int, substeps: int,
                seeds: Sequence[int], zero_noise: bool = False,
                dW: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama for a batch of paths sharing ``theta``.

    Each path draws its own Gaussian stream from its seed, so a path does not
    depend on which other paths share the batch.  Returns ``(states, ok)``
    with ``states`` of shape ``(batch, n + 1, d)``; diverged paths have
    ``ok = False``.  ``dW`` (shape ``(batch, n * substeps, r)``, already scaled
    by ``sqrt(dt)``) replaces the random increments.
    """
    d, r = model.state_dim, model.noise_dim
    alpha, beta = theta.alpha_array, theta.beta_array
    batch = len(seeds) if dW is None else dW.shape[0]
    dt = h / substeps
    sqdt = math.sqrt(dt)
    total = n * substeps
    rngs = [make_rng(s) for s in seeds] if dW is None else None

    out = np.empty((batch, n + 1, d))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (batch, d)).copy()
    out[:, 0] = x
    ok = np.ones(batch, dtype=bool)
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < total:
            size = min(_CHUNK, total - done)
            if zero_noise:
                noise = np.zeros((batch, size, r))
            elif dW is not None:
                noise = dW[:, done:done + size]
            else:
                noise = np.stack([g.standard_normal((size, r)) for g in rngs]) * sqdt
            for k in range(size):
                a = model.diffusion(x, alpha)
                x = x + dt * model.drift(x, beta) + (a @ noise[:, k, :, None])[..., 0]
                step = done + k + 1
                if step % substeps == 0:
                    out[:, step // substeps] = x
            done += size
            bad = ~np.all(np.isfinite(x) & (np.abs(x) <= OVERFLOW_GUARD), axis=-1)
            if bad.any():
                ok &= ~bad
                x[bad] = 0.0
    rec_bad = ~np.all(np.isfinite(out) & (np.abs(out) <= OVERFLOW_GUARD), axis=(1, 2))
    ok &= ~rec_bad
    return out, ok


def euler_maruyama(model: DiffusionModel, theta: Theta, cfg: SimConfig, *,
                   zero_noise: bool = False, dW: Optional[np.ndarray] = None) -> SamplePath:
    """Simulate on the fine grid ``h / substeps`` and keep every ``substeps``-th point.

    ``zero_noise`` and ``dW`` (increments of shape ``(n * substeps, r)``) are
    test hooks.
    """
    theta.check_dims(model)
    h = cfg.step
    x0 = np.array(cfg.x0, dtype=float)
    if x0.shape != (model.state_dim,):
        raise ConfigError(f"x0 must have {model.state_dim} components")
    eval_S(model, x0, theta.alpha_array)
    states, ok = euler_batch(model, theta, x0, h, cfg.n, cfg.substeps, [cfg.seed],
                             zero_noise=zero_noise,
                             dW=None if dW is None else np.asarray(dW, float)[None])
    if not ok[0]:
        raise NonFinite(f"path diverged (|X| > {OVERFLOW_GUARD:g})")
    return SamplePath(h=h, states=states[0], model_name=model.name)


def exact_sample(model: DiffusionModel, theta: Theta, cfg: SimConfig, *,
                 zero_noise: bool = False, z: Optional[np.ndarray] = None) -> SamplePath:
    """Simulate with the model's exact transition (no discretisation error)."""
    if model.exact_transition is None:
        raise ConfigError(f"model {model.name!r} has no exact sampler")
    theta.check_dims(model)
    h = cfg.step
    if z is None:
        z = (np.zeros((cfg.n, model.state_dim)) if zero_noise
             else make_rng(cfg.seed).standard_normal((cfg.n, model.state_dim)))
    z = np.asarray(z, dtype=float).reshape(cfg.n, model.state_dim)
    states = model.exact_transition(theta.alpha_array, theta.beta_array,
                                    np.array(cfg.x0), h, cfg.n, z)
    if not np.all(np.isfinite(states) & (np.abs(states) <= OVERFLOW_GUARD)):
        raise NonFinite("exact path diverged")
    return SamplePath(h=h, states=states, model_name=model.name)


def ou_exact(theta: Theta, cfg: SimConfig, *, zero_noise: bool = False,
             z: Optional[np.ndarray] = None) -> SamplePath:
    """Exact OU transition ``beta + (x - beta) e^{-h} + alpha sqrt((1 - e^{-2h}) / 2) Z``."""
    from .model import make_ou_model

    return exact_sample(make_ou_model(), theta, cfg, zero_noise=zero_noise, z=z)


# -- path files --------------------------------------------------------------

def _open_text(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def save_path(sample: SamplePath, path: Union[str, Path]) -> None:
    """Write ``t,x1[,x2,...]`` CSV with 17 significant digits (gzip for ``.gz``)."""
    path = Path(path)
    with _open_text(path, "w") as fh:
        if sample.model_name:
            fh.write(f"# model={sample.model_name}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"x{j + 1}" for j in range(sample.dim)])
        for i, row in enumerate(sample.states):
            writer.writerow([f"{i * sample.h:.17g}"] + [f"{v:.17g}" for v in row])


def load_path(path: Union[str, Path], model_name: str = "") -> SamplePath:
    """Read a path file written by :func:`save_path` (or any compatible CSV)."""
    path = Path(path)
    header = None
    rows = []
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("model=") and not model_name:
                    model_name = line.split("=", 1)[1].strip()
                continue
            fields = [f.strip() for f in line.split(",")]
            if header is None:
                if fields[0].lower() != "t" or len(fields) < 2:
                    raise MalformedRow(f"line {lineno}: expected header 't,x1[,x2,...]'")
                header = fields
                continue
            if len(fields) != len(header):
                raise MalformedRow(f"line {lineno}: expected {len(header)} fields, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise MalformedRow(f"line {lineno}: non-numeric field") from None
    if header is None or len(rows) < 3:
        raise MalformedRow(f"{path}: need a header and at least 3 observation rows")
    data = np.array(rows)
    t = data[:, 0]
    n = len(t) - 1
    h = (t[-1] - t[0]) / n
    if not h > 0:
        raise UnequalSpacing("observation times must be strictly increasing")
    dev = np.max(np.abs(np.diff(t) - h)) / h
    if not dev < 1e-9:
        raise UnequalSpacing(f"observation times are not equally spaced (relative deviation {dev:.3g})")
    return SamplePath(h=float(h), states=data[:, 1:], model_name=model_name)
