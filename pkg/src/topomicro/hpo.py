"""Two-stage hyperparameter search: random search, then a Tree-structured
Parzen Estimator over a reduced space with the first-stage winners frozen."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidArgument

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
MIN_BANDWIDTH = 0.01  # fraction of the dimension span

KINDS = ("uniform", "loguniform", "int", "categorical")


@dataclass(frozen=True)
class Dimension:
    kind: str
    lo: float = 0.0
    hi: float = 1.0
    options: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown dimension kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.options:
                raise InvalidArgument("categorical dimension needs options")
            object.__setattr__(self, "options", tuple(self.options))
            return
        if not self.lo < self.hi:
            raise InvalidArgument("dimension needs lo < hi")
        if self.kind == "loguniform" and self.lo <= 0:
            raise InvalidArgument("log-uniform dimension needs lo > 0")
        if self.kind == "int" and (self.lo != int(self.lo) or self.hi != int(self.hi)):
            raise InvalidArgument("integer dimension needs integer bounds")

    # numeric dimensions are modelled in an internal continuous coordinate
    def bounds(self) -> tuple[float, float]:
        if self.kind == "loguniform":
            return math.log(self.lo), math.log(self.hi)
        if self.kind == "int":
            return self.lo - 0.5, self.hi + 0.5
        return float(self.lo), float(self.hi)

    def to_internal(self, value) -> float:
        return math.log(value) if self.kind == "loguniform" else float(value)

    def from_internal(self, u: float):
        lo, hi = self.bounds()
        u = min(max(u, lo), hi)
        if self.kind == "loguniform":
            return float(min(max(math.exp(u), self.lo), self.hi))
        if self.kind == "int":
            return int(min(max(round(u), self.lo), self.hi))
        return float(u)

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.options
        if self.kind == "int" and value != int(value):
            return False
        return self.lo <= value <= self.hi

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "categorical":
            d["options"] = list(self.options)
        else:
            d["lo"], d["hi"] = self.lo, self.hi
        return d


def uniform(lo, hi) -> Dimension:
    return Dimension("uniform", lo, hi)


def loguniform(lo, hi) -> Dimension:
    return Dimension("loguniform", lo, hi)


def integer(lo, hi) -> Dimension:
    return Dimension("int", lo, hi)


def categorical(options) -> Dimension:
    return Dimension("categorical", options=tuple(options))


SearchSpace = dict  # name -> Dimension, iterated in insertion order


@dataclass
class TrialRecord:
    index: int
    stage: int
    params: dict
    objective: float | None
    status: str  # "ok" or "failed"
    duration: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.objective is not None and math.isfinite(self.objective)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrialRecord":
        return cls(**d)


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def sample_random(space: SearchSpace, rng: np.random.Generator) -> dict:
    out = {}
    for name, dim in space.items():
        if dim.kind == "categorical":
            out[name] = _plain(dim.options[int(rng.integers(len(dim.options)))])
        elif dim.kind == "int":
            out[name] = int(rng.integers(int(dim.lo), int(dim.hi) + 1))
        elif dim.kind == "loguniform":
            out[name] = float(min(max(math.exp(rng.uniform(math.log(dim.lo), math.log(dim.hi))),
                                      dim.lo), dim.hi))
        else:
            out[name] = float(rng.uniform(dim.lo, dim.hi))
    return out


# ------------------------------------------------------------ Parzen model

class _NumericParzen:
    """Equal-weight mixture of Gaussians truncated to the dimension bounds."""

    def __init__(self, dim: Dimension, values):
        self.lo, self.hi = dim.bounds()
        span = self.hi - self.lo
        self.mu = np.array([dim.to_internal(v) for v in values], dtype=np.float64)
        self.bw = max(span / math.sqrt(len(self.mu)), MIN_BANDWIDTH * span)
        self.a = (self.lo - self.mu) / self.bw
        self.b = (self.hi - self.mu) / self.bw
        self.mass = ndtr(self.b) - ndtr(self.a)

    def sample(self, rng, n) -> np.ndarray:
        k = rng.integers(len(self.mu), size=n)
        u = rng.uniform(ndtr(self.a[k]), ndtr(self.b[k]))
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        return np.clip(self.mu[k] + self.bw * ndtri(u), self.lo, self.hi)

    def log_pdf(self, x) -> np.ndarray:
        z = (np.asarray(x)[:, None] - self.mu[None, :]) / self.bw
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.bw * self.mass[None, :])
        return np.log(dens.mean(axis=1) + 1e-300)


class _CategoricalParzen:
    def __init__(self, dim: Dimension, values):
        self.options = dim.options
        counts = np.ones(len(self.options))
        for v in values:
            counts[self.options.index(v)] += 1
        self.p = counts / counts.sum()

    def sample(self, rng, n) -> np.ndarray:
        return rng.choice(len(self.options), size=n, p=self.p)

    def log_pdf(self, idx) -> np.ndarray:
        return np.log(self.p[np.asarray(idx, dtype=np.int64)])


def _parzen(dim, values):
    return _CategoricalParzen(dim, values) if dim.kind == "categorical" else _NumericParzen(dim, values)


def tpe_suggest(history, space: SearchSpace, rng: np.random.Generator, gamma: float = GAMMA,
                n_startup: int = N_STARTUP, n_candidates: int = N_CANDIDATES) -> dict:
    """Next assignment from the density ratio of good to bad trials.

    Only successful trials whose parameters cover ``space`` are used; with
    fewer than ``n_startup`` of them the suggestion is a random sample.
    """
    done = [t for t in history if t.ok and all(k in t.params for k in space)]
    if len(done) < n_startup:
        return sample_random(space, rng)
    done.sort(key=lambda t: t.objective)
    n_good = max(1, int(math.ceil(gamma * len(done))))
    good, bad = done[:n_good], done[n_good:]
    score = np.zeros(n_candidates)
    draws = {}
    for name, dim in space.items():
        l_model = _parzen(dim, [t.params[name] for t in good])
        g_model = _parzen(dim, [t.params[name] for t in bad])
        x = l_model.sample(rng, n_candidates)
        score += l_model.log_pdf(x) - g_model.log_pdf(x)
        draws[name] = x
    best = int(np.argmax(score))
    out = {}
    for name, dim in space.items():
        x = draws[name][best]
        out[name] = _plain(dim.options[int(x)]) if dim.kind == "categorical" else dim.from_internal(float(x))
    return out


# ------------------------------------------------------------- two stages

@dataclass
class HpoResult:
    best: dict
    best_objective: float
    trials: list = field(default_factory=list)

    def best_so_far(self) -> list[float]:
        out, cur = [], math.inf
        for t in self.trials:
            if t.ok:
                cur = min(cur, t.objective)
            out.append(cur)
        return out


def read_trial_log(path) -> list[TrialRecord]:
    p = Path(path)
    if not p.exists():
        return []
    return [TrialRecord.from_json(json.loads(line)) for line in p.read_text().splitlines() if line.strip()]


def _evaluate(objective, params, seed, index, stage) -> TrialRecord:
    start = time.perf_counter()
    try:
        value = float(objective(params, seed))
        status, msg = ("ok", "") if math.isfinite(value) else ("failed", "non-finite objective")
    except Exception as exc:  # a failing trial must not stop the search
        value, status, msg = None, "failed", f"{type(exc).__name__}: {exc}"
    if status != "ok":
        value = None
    return TrialRecord(index, stage, params, value, status, time.perf_counter() - start, msg)


def run_hpo(objective: Callable[[dict, int], float], space1: SearchSpace, space2: SearchSpace,
            n1: int = 50, n2: int = 50, seed: int = 0, log_path=None) -> HpoResult:
    """Stage 1 draws ``n1`` random assignments from ``space1``. Stage 2 runs
    ``n2`` TPE suggestions over ``space2`` with every stage-1 parameter not
    in ``space2`` frozen at the stage-1 winner; its densities use stage-2
    trials only. ``objective(params, seed)`` returns a validation loss.

    With ``log_path`` each trial is appended as one JSON line and trials
    already present in the log are reused instead of re-evaluated.
    """
    logged = {t.index: t for t in read_trial_log(log_path)} if log_path else {}
    trials: list[TrialRecord] = []

    def run(index, stage, params):
        prev = logged.get(index)
        if prev is not None and prev.stage == stage and prev.params == params:
            rec = prev
        else:
            rec = _evaluate(objective, params, seed, index, stage)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        trials.append(rec)
        return rec

    for i in range(n1):
        rng = np.random.default_rng([seed, 1, i])
        run(i, 1, sample_random(space1, rng))
    stage1_ok = [t for t in trials if t.ok]
    frozen = {}
    if stage1_ok:
        winner = min(stage1_ok, key=lambda t: t.objective)
        frozen = {k: v for k, v in winner.params.items() if k not in space2}
    stage2: list[TrialRecord] = []
    for i in range(n2):
        rng = np.random.default_rng([seed, 2, i])
        hist = [TrialRecord(t.index, 2, {k: t.params[k] for k in space2}, t.objective, t.status)
                for t in stage2]
        suggestion = tpe_suggest(hist, space2, rng)
        stage2.append(run(n1 + i, 2, {**frozen, **suggestion}))

    ok = [t for t in trials if t.ok]
    if not ok:
        return HpoResult({}, math.inf, trials)
    best = min(ok, key=lambda t: (t.objective, t.index))
    return HpoResult(dict(best.params), best.objective, trials)


def minimize(objective: Callable[[dict], float], space: SearchSpace, n_trials: int = 50,
             seed: int = 0, method: str = "tpe") -> HpoResult:
    """Single-stage search; ``method`` is ``"tpe"`` or ``"random"``."""
    if method not in ("tpe", "random"):
        raise InvalidArgument("method must be 'tpe' or 'random'")
    trials: list[TrialRecord] = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, 0, i])
        params = tpe_suggest(trials, space, rng) if method == "tpe" else sample_random(space, rng)
        trials.append(_evaluate(lambda p, _s: objective(p), params, seed, i, 0))
    ok = [t for t in trials if t.ok]
    if not ok:
        return HpoResult({}, math.inf, trials)
    best = min(ok, key=lambda t: (t.objective, t.index))
    return HpoResult(dict(best.params), best.objective, trials)
