"""Candidate pool, false-candidate filtering, scale fixing and the attack driver."""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import decomp
from .errors import AttackPreconditionError, RankError
from .flsim import GradientCapture
from .rounding import RoundingConfig, round_via_sampling
from .sphere import L1, OptimizerConfig, make_loss, restart_rng, run_restarts

ZERO_TOL = 1e-6
DETECT_TOL = 1e-5  # zero detection on unpolished optimizer output
DEDUP_TOL = 1e-6
TAU = 0.35
RANK_TOL = 1e-9
NOISY_TOL_CAP = 0.2
COMPLEMENT = "complement"


def near_zero(Y: np.ndarray, zero_tol: float) -> np.ndarray:
    """Entries of each column no larger than ``zero_tol`` times the column's RMS."""
    Y = np.asarray(Y)
    col = Y if Y.ndim == 2 else Y[:, None]
    rms = np.linalg.norm(col, axis=0) / np.sqrt(col.shape[0])
    mask = np.abs(col) <= zero_tol * rms
    return mask if Y.ndim == 2 else mask[:, 0]


def sparsity_count(L: np.ndarray, q: np.ndarray, zero_tol: float = ZERO_TOL) -> int:
    return int(np.count_nonzero(near_zero(L @ q, zero_tol)))


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    """Rank of ``M`` after normalizing its columns, so column scales do not matter."""
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0
    norms = np.linalg.norm(M, axis=0)
    keep = norms > 0
    if not keep.any():
        return 0
    s = np.linalg.svd(M[:, keep] / norms[keep], compute_uv=False)
    return int(np.count_nonzero(s > tol * s[0]))


def polish(L: np.ndarray, q: np.ndarray, detect_tol: float = DETECT_TOL, kernel_tol: float = 1e-8) -> np.ndarray:
    """Snap ``q`` onto the kernel of the rows where ``L q`` is near zero.

    Returns ``q`` unchanged when those rows do not pin down a single direction.
    """
    b = L.shape[1]
    rows = near_zero(L @ q, detect_tol)
    if np.count_nonzero(rows) < b - 1:
        return q
    _, s, Vt = np.linalg.svd(L[rows], full_matrices=True)
    s = np.concatenate([s, np.zeros(b - s.size)])
    if b > 1 and s[-2] <= kernel_tol * s[0]:
        return q
    k = Vt[-1]
    return k if k @ q >= 0 else -k


@dataclass
class Candidate:
    q: np.ndarray
    count: int
    origin: int | str


class CandidatePool:
    """Deduplicated (up to sign) set of sparse directions; ``submit`` is atomic."""

    def __init__(self, b: int, dedup_tol: float = DEDUP_TOL):
        self.b = b
        self.dedup_tol = dedup_tol
        self.items: list[Candidate] = []
        self._mat = np.empty((b, 0))
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def is_duplicate(self, q: np.ndarray) -> bool:
        if not self.items:
            return False
        return bool(np.any(np.abs(self._mat.T @ q) >= 1.0 - self.dedup_tol))

    def submit(self, L: np.ndarray, q: np.ndarray, tau: float = TAU, zero_tol: float = ZERO_TOL,
               origin: int | str = -1) -> bool:
        q = np.asarray(q, dtype=np.float64)
        count = sparsity_count(L, q, zero_tol)
        if count < tau * L.shape[0]:
            return False
        with self._lock:
            if self.is_duplicate(q):
                return False
            self.items.append(Candidate(q.copy(), count, origin))
            self._mat = np.column_stack([self._mat, q])
        return True

    def matrix(self) -> np.ndarray:
        return self._mat.copy()

    def rank(self) -> int:
        return numerical_rank(self._mat)

    def by_sparsity(self) -> list[Candidate]:
        # stable: ties keep submission order
        return sorted(self.items, key=lambda c: -c.count)


def init_filt(L: np.ndarray, pool) -> list[Candidate]:
    """Sparsest-first greedy selection of linearly independent candidates (at most b)."""
    b = L.shape[1]
    chosen: list[Candidate] = []
    for cand in sorted(pool, key=lambda c: -c.count):
        if len(chosen) >= b:
            break
        trial = chosen + [cand]
        if numerical_rank(np.column_stack([c.q for c in trial])) == len(trial):
            chosen = trial
        # otherwise the candidate is discarded for good
    return chosen


def ortho_complement(B, b: int) -> np.ndarray:
    """Orthonormal basis (as columns) of the complement of span(B) in R^b."""
    vecs = [np.asarray(v, dtype=np.float64) for v in B]
    if not vecs:
        return np.eye(b)
    M = np.column_stack(vecs)
    rank = numerical_rank(M)
    U, _, _ = np.linalg.svd(M / np.linalg.norm(M, axis=0), full_matrices=True)
    return U[:, rank:].copy()


@dataclass
class DisaggregationMatrix:
    Q: np.ndarray
    scales: np.ndarray
    unscaled: np.ndarray  # columns whose bias-derived scale was zero
    provenance: list = field(default_factory=list)

    @property
    def scaled(self) -> bool:
        return not bool(self.unscaled.any())


def _check_full_rank(Q: np.ndarray) -> None:
    if numerical_rank(Q) < Q.shape[1]:
        raise RankError("disaggregation matrix is rank deficient")


def fix_scale(Q_hat: np.ndarray, L: np.ndarray, db: np.ndarray, provenance=None) -> DisaggregationMatrix:
    """Rescale columns so that L Q reproduces the bias gradient: d = Q_hat^-1 L^T db."""
    Q_hat = np.asarray(Q_hat, dtype=np.float64)
    _check_full_rank(Q_hat)
    d = np.linalg.solve(Q_hat, L.T @ db)
    top = np.max(np.abs(d)) if d.size else 0.0
    unscaled = np.abs(d) <= 1e-12 * top
    Q = Q_hat * np.where(unscaled, 1.0, d)
    return DisaggregationMatrix(Q, d, unscaled, list(provenance) if provenance is not None else [])


@dataclass(frozen=True)
class SparsityScore:
    lam: float
    neg: int
    pos: int

    @property
    def perfect(self) -> bool:
        return self.lam == 1.0


def compute_score(L, R, Q, W, bias, zero_tol: float = ZERO_TOL, WRt: np.ndarray | None = None) -> SparsityScore:
    """Agreement between the ReLU pattern of the implied inputs and the zeros of L Q."""
    Q = np.asarray(Q, dtype=np.float64)
    _check_full_rank(Q)
    if WRt is None:
        WRt = W @ R.T
    # W (Q^-1 R)^T = (W R^T) Q^-T
    Zp = np.linalg.solve(Q, WRt.T).T + np.asarray(bias)[:, None]
    zero = near_zero(L @ Q, zero_tol)
    neg = int(np.count_nonzero((Zp <= 0) & zero))
    pos = int(np.count_nonzero((Zp > 0) & ~zero))
    m, b = Zp.shape
    return SparsityScore((neg + pos) / (m * b), neg, pos)


@dataclass
class FilterResult:
    score: SparsityScore
    X: np.ndarray  # (n, b) reconstruction, columns are datapoints
    disagg: DisaggregationMatrix


def greedy_filt(L, R, W, bias, db, B, pool, zero_tol: float = ZERO_TOL, WRt=None) -> FilterResult:
    """Greedy column swaps from the spare candidates while the score strictly improves.

    ``B`` holds exactly b candidates (``Candidate`` or raw vectors); spare
    candidates are the pool entries not in ``B``, tried sparsest first.  Each
    spare goes into the column where it raises the score most (leftmost on
    ties), if any.
    """
    cands = [c if isinstance(c, Candidate) else Candidate(np.asarray(c, dtype=np.float64), 0, -1) for c in B]
    b = L.shape[1]
    if len(cands) != b:
        raise RankError(f"greedy filtering needs exactly {b} basis vectors, got {len(cands)}")
    if WRt is None:
        WRt = W @ R.T
    cols = [c.q for c in cands]
    prov = [c.origin for c in cands]
    D = fix_scale(np.column_stack(cols), L, db, prov)
    score = compute_score(L, R, D.Q, W, bias, zero_tol, WRt)
    if not score.perfect:
        members = {id(c) for c in cands}
        spare_items = pool.by_sparsity() if isinstance(pool, CandidatePool) else list(pool)
        spare = [
            c if isinstance(c, Candidate) else Candidate(np.asarray(c, dtype=np.float64), 0, -1)
            for c in spare_items if id(c) not in members
        ]
        for s in spare:
            # every column is tried against the same Q; the best strict improvement wins
            best = None
            for j in range(b):
                trial = list(cols)
                trial[j] = s.q
                Qt = np.column_stack(trial)
                if numerical_rank(Qt) < b:
                    continue
                tprov = list(prov)
                tprov[j] = s.origin
                Dt = fix_scale(Qt, L, db, tprov)
                st = compute_score(L, R, Dt.Q, W, bias, zero_tol, WRt)
                if st.lam > (best[0].lam if best else score.lam):
                    best = (st, Dt, trial, tprov)
            if best is not None:
                score, D, cols, prov = best
            if score.perfect:
                break
    X = np.linalg.solve(D.Q, R).T
    return FilterResult(score, X, D)


@dataclass
class AttackConfig:
    loss: str = "l1"
    mu: float | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rounding: bool | None = None  # None: round only for smooth losses
    rounding_cfg: RoundingConfig | None = None  # None: width-dependent default
    tau: float = TAU
    zero_tol: float | None = None  # None: chosen from the capture's protocol
    dedup_tol: float | None = None  # None: chosen from the capture's protocol
    b_override: int | None = None
    early_stop: bool = True
    polish: bool = True  # snap unrounded candidates onto their zero set (noiseless captures only)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss, "mu": self.mu, "optimizer": self.optimizer.to_dict(),
            "rounding": self.rounding,
            "rounding_cfg": self.rounding_cfg.to_dict() if self.rounding_cfg else None,
            "tau": self.tau, "zero_tol": self.zero_tol, "dedup_tol": self.dedup_tol,
            "b_override": self.b_override, "early_stop": self.early_stop, "polish": self.polish,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        opt = OptimizerConfig(**d.pop("optimizer", {}))
        rc = d.pop("rounding_cfg", None)
        return cls(optimizer=opt, rounding_cfg=RoundingConfig(**rc) if rc else None, **d)


def noise_angle(capture: GradientCapture, pair: decomp.LowRankPair) -> float:
    """Rough rotation of the recovered left subspace caused by DP noise.

    Gaussian noise of std sigma restricted to the b-dimensional right subspace
    has spectral norm about sigma (sqrt(m) + sqrt(b)); dividing by the b-th
    singular value bounds the angle by which L is rotated.
    """
    if not capture.protocol.noisy or pair.b == 0:
        return 0.0
    m = capture.dW.shape[0]
    return float(capture.protocol.sigma * (np.sqrt(m) + np.sqrt(pair.b)) / pair.singular_values[pair.b - 1])


def auto_tolerances(capture: GradientCapture, pair: decomp.LowRankPair) -> tuple[float, float]:
    """(zero tolerance, dedup tolerance) for a capture; widened under DP noise."""
    angle = noise_angle(capture, pair)
    zero_tol = min(max(ZERO_TOL, 3.0 * angle), NOISY_TOL_CAP)
    dedup_tol = min(max(DEDUP_TOL, angle**2), NOISY_TOL_CAP)
    return zero_tol, dedup_tol


@dataclass
class ReconstructionReport:
    X: np.ndarray
    score: SparsityScore
    b: int
    m: int
    n: int
    provenance: list
    unscaled: list
    stats: dict
    timing: dict
    config: dict
    psnr: list | None = None
    psnr_mean: float | None = None

    def to_json_dict(self) -> dict:
        out = {
            "lambda": self.score.lam, "lambda_neg": self.score.neg, "lambda_pos": self.score.pos,
            "b": self.b, "m": self.m, "n": self.n,
            "provenance": self.provenance, "unscaled_columns": self.unscaled,
            "stats": self.stats, "config": self.config,
            "psnr": self.psnr, "psnr_mean": self.psnr_mean,
            "timing": self.timing,
        }
        return out


def run_attack(capture: GradientCapture, cfg: AttackConfig | None = None, workers: int = 1) -> ReconstructionReport:
    cfg = cfg or AttackConfig()
    t0 = time.perf_counter()
    m, n = capture.dW.shape
    if cfg.b_override is not None and not 1 <= cfg.b_override <= min(m, n):
        raise AttackPreconditionError(f"batch size {cfg.b_override} is not in [1, min(m, n) = {min(m, n)}]")
    pair = decomp.initial_decomposition(capture.dW, cfg.b_override, noisy=capture.protocol.noisy)
    if pair.b < 1:
        raise AttackPreconditionError("gradient has rank 0; nothing to reconstruct")
    L, R, b = pair.L, pair.R, pair.b
    W, bias, db = capture.layer_W, capture.layer_b, capture.db
    loss = make_loss(cfg.loss, m=m, mu=cfg.mu)
    rounding = cfg.rounding if cfg.rounding is not None else not isinstance(loss, L1)
    rcfg = cfg.rounding_cfg or RoundingConfig.for_width(m)
    if rounding:
        rcfg.pool_size(b, m)
    auto_zero, auto_dedup = auto_tolerances(capture, pair)
    zero_tol = cfg.zero_tol if cfg.zero_tol is not None else auto_zero
    dedup_tol = cfg.dedup_tol if cfg.dedup_tol is not None else auto_dedup
    detect_tol = max(DETECT_TOL, zero_tol)
    # under DP noise the detected zero set is unreliable and polishing costs accuracy
    polishing = cfg.polish and not rounding and not capture.protocol.noisy
    WRt = W @ R.T
    pool = CandidatePool(b, dedup_tol)
    state = {"result": None, "found_at": None, "filter_calls": 0, "rounding_failed": 0}

    def sink(idx: int, q_hat: np.ndarray) -> bool:
        q = q_hat
        if rounding:
            q = round_via_sampling(L, q_hat, rcfg, restart_rng(cfg.optimizer.seed, idx, 1))
            if q is None:
                state["rounding_failed"] += 1
                return False
        elif polishing:
            q = polish(L, q_hat, detect_tol)
        if not pool.submit(L, q, cfg.tau, zero_tol, origin=idx):
            return False
        if state["found_at"] is not None or pool.rank() < b:
            return False
        state["filter_calls"] += 1
        res = greedy_filt(L, R, W, bias, db, init_filt(L, pool), pool, zero_tol, WRt)
        if res.score.perfect:
            state["result"], state["found_at"] = res, idx
            return cfg.early_stop
        return False

    t1 = time.perf_counter()
    rstats = run_restarts(L, loss, cfg.optimizer, sink, workers=workers)
    t2 = time.perf_counter()
    result = state["result"]
    if result is None:
        basis = init_filt(L, pool)
        comp = ortho_complement([c.q for c in basis], b)
        basis += [Candidate(comp[:, k], 0, COMPLEMENT) for k in range(comp.shape[1])]
        state["filter_calls"] += 1
        result = greedy_filt(L, R, W, bias, db, basis, pool, zero_tol, WRt)
    t3 = time.perf_counter()

    stats = {
        **rstats.to_dict(),
        "rounding_failed": state["rounding_failed"],
        "pool_size": len(pool),
        "pool_rank": pool.rank(),
        "filter_calls": state["filter_calls"],
        "found_at": state["found_at"],
        "rank_residual": pair.residual,
        "zero_tol": zero_tol,
        "dedup_tol": dedup_tol,
    }
    timing = {"decomposition_s": t1 - t0, "restarts_s": t2 - t1, "filtering_s": t3 - t2, "total_s": t3 - t0}
    config = cfg.to_dict()
    config["resolved"] = {
        "loss": loss.to_dict(), "rounding": rounding, "r_factor": rcfg.r_factor if rounding else None,
        "polish": polishing,
    }
    return ReconstructionReport(
        X=result.X, score=result.score, b=b, m=m, n=n,
        provenance=[p if isinstance(p, str) else int(p) for p in result.disagg.provenance],
        unscaled=[int(j) for j in np.flatnonzero(result.disagg.unscaled)],
        stats=stats, timing=timing, config=config,
    )
