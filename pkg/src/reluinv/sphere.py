"""Sparse-direction search on the unit sphere.

Minimizes a sparsity surrogate of ``L q`` over unit vectors ``q`` with either
Riemannian Adam (tangent projection, renormalization retraction, first
moment re-projected after every step) or projected gradient descent.  Many
restarts run together as the columns of one matrix, so the per-step work is
two GEMMs regardless of the restart count.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

RADAM = "radam"
PGD = "pgd"

RADAM_SCHEDULE = ((0, 1e-1), (200, 1e-3), (400, 1e-5))
PGD_SCHEDULE = ((0, 1e-2), (200, 1e-4), (400, 1e-6))


class L1:
    name = "l1"

    def value(self, Y):
        return np.abs(Y).sum(axis=0)

    def grad(self, Y):
        return np.sign(Y)

    def to_dict(self):
        return {"name": self.name}

    def __eq__(self, other):
        return type(other) is type(self)

    def __repr__(self):
        return "L1()"


class LogCosh:
    name = "logcosh"

    def __init__(self, mu: float):
        if not mu > 0:
            raise ConfigError("LogCosh smoothing mu must be positive")
        self.mu = float(mu)

    def value(self, Y):
        t = np.abs(Y) / self.mu
        return (self.mu * (t + np.log1p(np.exp(-2.0 * t)) - math.log(2.0))).sum(axis=0)

    def grad(self, Y):
        return np.tanh(Y / self.mu)

    def to_dict(self):
        return {"name": self.name, "mu": self.mu}

    def __eq__(self, other):
        return type(other) is type(self) and other.mu == self.mu

    def __repr__(self):
        return f"LogCosh(mu={self.mu})"


class NegL4:
    name = "negl4"

    def value(self, Y):
        Y2 = Y * Y
        return -(Y2 * Y2).sum(axis=0)

    def grad(self, Y):
        return -4.0 * (Y * Y * Y)

    def to_dict(self):
        return {"name": self.name}

    def __eq__(self, other):
        return type(other) is type(self)

    def __repr__(self):
        return "NegL4()"


def default_mu(m: int) -> float:
    return 1.0 / 300.0 if m == 200 else 1.0 / 500.0


def make_loss(name: str, m: int | None = None, mu: float | None = None):
    if name == "l1":
        return L1()
    if name == "logcosh":
        if mu is None:
            if m is None:
                raise ConfigError("LogCosh needs mu or the layer width m")
            mu = default_mu(m)
        return LogCosh(mu)
    if name == "negl4":
        return NegL4()
    raise ConfigError(f"unknown loss {name!r}")


def loss_and_subgradient(loss, y: np.ndarray):
    """Value and subgradient of the surrogate at ``y`` (columnwise for matrices)."""
    y = np.asarray(y, dtype=np.float64)
    value = loss.value(y if y.ndim == 2 else y[:, None])
    return (value if y.ndim == 2 else float(value[0])), loss.grad(y)


@dataclass
class OptimizerConfig:
    method: str = RADAM
    steps: int = 500
    schedule: Sequence[tuple[int, float]] = RADAM_SCHEDULE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    restarts: int = 1000
    seed: int = 0
    chunk_size: int = 512

    def __post_init__(self) -> None:
        self.schedule = tuple((int(s), float(r)) for s, r in self.schedule)
        if self.method not in (RADAM, PGD):
            raise ConfigError(f"unknown optimizer {self.method!r}")
        if self.steps < 0 or self.restarts < 1 or self.chunk_size < 1:
            raise ConfigError("steps must be >= 0, restarts and chunk size >= 1")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ConfigError("schedule must start at step 0")
        steps = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("schedule breakpoints must be strictly increasing")
        if any(r <= 0 for _, r in self.schedule):
            raise ConfigError("schedule rates must be positive")

    @classmethod
    def for_method(cls, method: str, **kw) -> "OptimizerConfig":
        return cls(method=method, schedule=PGD_SCHEDULE if method == PGD else RADAM_SCHEDULE, **kw)

    def rates(self) -> np.ndarray:
        out = np.empty(self.steps)
        for (start, rate) in self.schedule:
            out[start:] = rate
        return out

    def to_dict(self) -> dict:
        return {
            "method": self.method, "steps": self.steps, "schedule": [list(p) for p in self.schedule],
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "restarts": self.restarts, "seed": self.seed, "chunk_size": self.chunk_size,
        }


def restart_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def random_unit_direction(b: int, rng: np.random.Generator) -> np.ndarray:
    if b < 1:
        raise ConfigError("dimension must be at least 1")
    while True:
        z = rng.standard_normal(b)
        norm = np.linalg.norm(z)
        if norm > 0:
            return z / norm


def _normalize(Q: np.ndarray) -> np.ndarray:
    return Q / np.linalg.norm(Q, axis=0)


def optimize_batch(L: np.ndarray, loss, Q0: np.ndarray, cfg: OptimizerConfig):
    """Run ``cfg.steps`` iterations on every column of ``Q0``.

    Returns the final unit columns and a mask of restarts that stayed finite.
    """
    Q = _normalize(np.array(Q0, dtype=np.float64, ndmin=2))
    Lt = L.T
    rates = cfg.rates()
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if cfg.method == PGD:
            for t in range(cfg.steps):
                g = Lt @ loss.grad(L @ Q)
                Q = _normalize(Q - rates[t] * g)
        else:
            b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
            mom = np.zeros_like(Q)
            sq = np.zeros(Q.shape[1])
            for t in range(cfg.steps):
                g = Lt @ loss.grad(L @ Q)
                r = g - Q * np.einsum("ij,ij->j", Q, g)
                mom = b1 * mom + (1.0 - b1) * r
                sq = b2 * sq + (1.0 - b2) * np.einsum("ij,ij->j", r, r)
                denom = np.sqrt(sq / (1.0 - b2 ** (t + 1))) + eps
                Q = _normalize(Q - (rates[t] / (1.0 - b1 ** (t + 1))) * mom / denom)
                mom = mom - Q * np.einsum("ij,ij->j", Q, mom)
        ok = np.all(np.isfinite(Q), axis=0)
    return Q, ok


def optimize_on_sphere(L: np.ndarray, loss, init: np.ndarray, cfg: OptimizerConfig) -> np.ndarray | None:
    """Single restart; ``None`` when the iterate went non-finite."""
    Q, ok = optimize_batch(L, loss, np.asarray(init, dtype=np.float64)[:, None], cfg)
    return Q[:, 0] if ok[0] else None


@dataclass
class RestartStats:
    requested: int = 0
    executed: int = 0
    failed: int = 0
    stopped_early: bool = False
    forwarded: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


Sink = Callable[[int, np.ndarray], bool]


def _run_chunk(L, loss, cfg: OptimizerConfig, start: int, stop: int):
    b = L.shape[1]
    Q0 = np.empty((b, stop - start))
    for j, idx in enumerate(range(start, stop)):
        Q0[:, j] = random_unit_direction(b, restart_rng(cfg.seed, idx))
    return optimize_batch(L, loss, Q0, cfg)


def run_restarts(L: np.ndarray, loss, cfg: OptimizerConfig, sink: Sink, workers: int = 1) -> RestartStats:
    """Optimize ``cfg.restarts`` random starts, feeding results to ``sink`` in index order.

    Restart ``i`` starts from ``restart_rng(cfg.seed, i)``.  Restarts are
    grouped in chunks of ``cfg.chunk_size`` that may be optimized on
    ``workers`` threads; results reach the sink in restart order, so the
    outcome does not depend on the thread count.  A sink returning ``True``
    stops the run.
    """
    stats = RestartStats(requested=cfg.restarts)
    bounds = [(s, min(s + cfg.chunk_size, cfg.restarts)) for s in range(0, cfg.restarts, cfg.chunk_size)]

    def consume(start, Q, ok) -> bool:
        for j in range(Q.shape[1]):
            stats.executed += 1
            if not ok[j]:
                stats.failed += 1
                continue
            stats.forwarded += 1
            if sink(start + j, Q[:, j]):
                stats.stopped_early = True
                return True
        return False

    if workers <= 1:
        for start, stop in bounds:
            if consume(start, *_run_chunk(L, loss, cfg, start, stop)):
                break
        return stats

    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        it = iter(bounds)
        for start, stop in it:
            pending.append((start, pool.submit(_run_chunk, L, loss, cfg, start, stop)))
            if len(pending) >= workers:
                break
        while pending:
            start, fut = pending.pop(0)
            Q, ok = fut.result()
            if consume(start, Q, ok):
                for _, f in pending:
                    f.cancel()
                break
            nxt = next(it, None)
            if nxt is not None:
                pending.append((nxt[0], pool.submit(_run_chunk, L, loss, cfg, *nxt)))
    return stats
