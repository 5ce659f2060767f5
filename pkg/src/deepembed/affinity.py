"""High-dimensional mini-batch affinities.

Two kinds are produced for a batch of row vectors (raw data or network
features): Gaussian joint probabilities calibrated per row to a target
perplexity, and fuzzy k-neighbor memberships calibrated per row so the
kernel mass over the k nearest neighbors hits log2(k), combined by
probabilistic union.

Per-row bandwidth searches are plain bisections in log-sigma space over
the bracket [1e-20, 1e20]; the hot loops are numba-compiled and run one
row per thread, so results never depend on calibration order.
"""

import os
from dataclasses import dataclass

import numpy as np
import numba
from numba import njit, prange

# Skip the TBB probe (the sandbox TBB is too old and numba warns about it);
# rows are independent so any threading layer gives identical results.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"

TSNE_JOINT = "tsne_joint"
UMAP_FUZZY = "umap_fuzzy"

SIGMA_LO = 1e-20
SIGMA_HI = 1e20

_OK = 0
_BOUNDARY = 1  # bisection exhausted without reaching tolerance
_DEGENERATE = 2  # all-zero distances with an unreachable target


class DegenerateRowError(ValueError):
    """A row's neighbor distances admit no calibrated distribution."""

    def __init__(self, rows, message):
        super().__init__(message)
        self.rows = list(rows)


@dataclass(frozen=True)
class PerplexityConfig:
    perplexity: float = 30.0
    tol: float = 1e-3  # tolerance on perplexity itself, not entropy
    max_iter: int = 100

    def __post_init__(self):
        if self.perplexity <= 0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")


@dataclass(frozen=True)
class UmapGraphConfig:
    k: int = 15
    tol: float = 1e-3
    max_iter: int = 100

    def __post_init__(self):
        # k=1 is unreachable: the nearest-neighbor term is exactly 1 while
        # the calibration target log2(1) is 0.
        if self.k < 2:
            raise ValueError(f"neighbor count k must be >= 2, got {self.k}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")


@dataclass
class AffinityMatrix:
    """Symmetric B x B batch affinity with zero diagonal."""

    size: int
    kind: str
    values: np.ndarray
    flagged_rows: np.ndarray | None = None  # calibration hit the bracket boundary

    def validate(self, atol=1e-8):
        v = self.values
        if v.shape != (self.size, self.size):
            raise ValueError(f"values shape {v.shape} != ({self.size}, {self.size})")
        if np.abs(np.diagonal(v)).max(initial=0.0) != 0.0:
            raise ValueError("affinity diagonal must be exactly zero")
        if not np.allclose(v, v.T, rtol=0.0, atol=atol):
            raise ValueError("affinity matrix must be symmetric")
        if self.kind == TSNE_JOINT:
            if v.min() < 0.0:
                raise ValueError("joint probabilities must be non-negative")
            if abs(v.sum() - 1.0) > 1e-10:
                raise ValueError(f"joint probabilities sum to {v.sum()}, not 1")
        elif self.kind == UMAP_FUZZY:
            if v.min() < 0.0 or v.max() > 1.0:
                raise ValueError("fuzzy memberships must lie in [0, 1]")
        else:
            raise ValueError(f"unknown affinity kind {self.kind!r}")
        return self


def pairwise_sq_dist(X):
    """Squared Euclidean distances between all rows of X.

    Exactly symmetric, exactly zero on the diagonal, clamped at 0 against
    round-off.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need a 2-D matrix with >= 2 rows, got shape {X.shape}")
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    D = 0.5 * (D + D.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


@njit(cache=True, parallel=True)
def _calibrate_gaussian(D2, target, tol, max_iter, skip_diag):
    """Per-row sigma bisection for Gaussian conditionals.

    Each D2 row holds squared distances to that row's candidate
    neighbors; with skip_diag the matrix is the full B x B table and
    column i of row i is excluded in place.  Rows are shifted by their
    minimum distance before exponentiation, which leaves the conditional
    unchanged but keeps the nearest-neighbor term at exp(0).
    """
    n, m = D2.shape
    sigma = np.empty(n)
    P = np.zeros((n, m))
    status = np.zeros(n, dtype=np.int64)
    llo0 = np.log(SIGMA_LO)
    lhi0 = np.log(SIGMA_HI)
    for i in prange(n):
        row = D2[i]
        skip = i if skip_diag else -1
        m_eff = m - 1 if skip_diag else m
        dmin = np.inf
        dmax = -np.inf
        for j in range(m):
            if j == skip:
                continue
            if row[j] < dmin:
                dmin = row[j]
            if row[j] > dmax:
                dmax = row[j]
        if dmax == 0.0 and abs(m_eff - target) > tol:
            # duplicates of the query: uniform for every sigma
            status[i] = _DEGENERATE
            sigma[i] = np.nan
            for j in range(m):
                if j != skip:
                    P[i, j] = 1.0 / m_eff
            continue
        llo = llo0
        lhi = lhi0
        lmid = 0.5 * (llo + lhi)
        converged = False
        for _ in range(max_iter):
            lmid = 0.5 * (llo + lhi)
            s = np.exp(lmid)
            beta = 1.0 / (2.0 * s * s)
            esum = 0.0
            wsum = 0.0
            for j in range(m):
                if j == skip:
                    continue
                e = np.exp(-(row[j] - dmin) * beta)
                esum += e
                wsum += e * (row[j] - dmin)
            entropy = beta * wsum / esum + np.log(esum)
            perp = np.exp(entropy)
            if abs(perp - target) <= tol:
                converged = True
                break
            if perp > target:
                lhi = lmid
            else:
                llo = lmid
        if not converged:
            status[i] = _BOUNDARY
        s = np.exp(lmid)
        sigma[i] = s
        beta = 1.0 / (2.0 * s * s)
        esum = 0.0
        for j in range(m):
            if j == skip:
                continue
            e = np.exp(-(row[j] - dmin) * beta)
            P[i, j] = e
            esum += e
        for j in range(m):
            if j != skip:
                P[i, j] /= esum
    return sigma, P, status


def sigma_search(dist_row, cfg: PerplexityConfig):
    """Calibrate one row: squared distances (self excluded) -> (sigma, p_row).

    Raises DegenerateRowError when every distance is zero and the target
    perplexity is unreachable; returns the boundary sigma when bisection
    exhausts its iterations without converging.
    """
    row = np.ascontiguousarray(dist_row, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise ValueError("need a 1-D row with at least 2 neighbor distances")
    sigma, P, status = _calibrate_gaussian(row[None, :], cfg.perplexity,
                                           cfg.tol, cfg.max_iter, False)
    if status[0] == _DEGENERATE:
        raise DegenerateRowError([0], "all neighbor distances are zero and the "
                                 f"target perplexity {cfg.perplexity} is unreachable")
    return float(sigma[0]), P[0]


def conditional_P(X, cfg: PerplexityConfig):
    """Row-calibrated Gaussian conditional matrix, zero diagonal."""
    D2 = pairwise_sq_dist(X)
    return conditional_from_sq_dist(D2, cfg)


def conditional_from_sq_dist(D2, cfg: PerplexityConfig):
    b = D2.shape[0]
    if not cfg.perplexity < b - 1:
        raise ValueError(f"perplexity {cfg.perplexity} must be < B-1 = {b - 1}")
    sigma, P, status = _calibrate_gaussian(np.ascontiguousarray(D2, dtype=np.float64),
                                           cfg.perplexity, cfg.tol, cfg.max_iter,
                                           True)
    bad = np.flatnonzero(status == _DEGENERATE)
    if bad.size:
        raise DegenerateRowError(bad.tolist(),
                                 f"{bad.size} degenerate rows (first: {bad[0]}): "
                                 "all-zero distances, perplexity unreachable")
    return P


def joint_P(p_cond) -> AffinityMatrix:
    """Symmetrize a conditional matrix into joint probabilities.

    p_ij = (p_j|i + p_i|j) / (2B); the batch size plays the role of the
    dataset size because affinities never leave the mini-batch.
    """
    pc = np.asarray(p_cond, dtype=np.float64)
    b = pc.shape[0]
    if pc.shape != (b, b):
        raise ValueError(f"conditional matrix must be square, got {pc.shape}")
    if np.abs(np.diagonal(pc)).max(initial=0.0) != 0.0:
        raise ValueError("conditional diagonal must be zero")
    rs = pc.sum(axis=1)
    if not np.allclose(rs, 1.0, rtol=0.0, atol=1e-8):
        raise ValueError("conditional rows must each sum to 1")
    P = (pc + pc.T) / (2.0 * b)
    return AffinityMatrix(size=b, kind=TSNE_JOINT, values=P).validate()


def tsne_affinity(X, cfg: PerplexityConfig) -> AffinityMatrix:
    """Full pipeline: distances -> per-row calibration -> joint matrix."""
    return joint_P(conditional_P(X, cfg))


@njit(cache=True, parallel=True)
def _calibrate_umap(knn_d, target, tol, max_iter):
    """Per-row sigma bisection so sum_j exp(-max(0, d_j - rho)/sigma) = target.

    knn_d holds each row's k nearest-neighbor distances sorted ascending;
    rho is the first column.
    """
    n, k = knn_d.shape
    rho = np.empty(n)
    sigma = np.empty(n)
    flagged = np.zeros(n, dtype=np.bool_)
    llo0 = np.log(SIGMA_LO)
    lhi0 = np.log(SIGMA_HI)
    for i in prange(n):
        row = knn_d[i]
        r = row[0]
        rho[i] = r
        llo = llo0
        lhi = lhi0
        lmid = 0.5 * (llo + lhi)
        converged = False
        for _ in range(max_iter):
            lmid = 0.5 * (llo + lhi)
            s = np.exp(lmid)
            total = 0.0
            for j in range(k):
                d = row[j] - r
                if d < 0.0:
                    d = 0.0
                total += np.exp(-d / s)
            if abs(total - target) <= tol:
                converged = True
                break
            if total > target:
                lhi = lmid
            else:
                llo = lmid
        sigma[i] = np.exp(lmid)
        if not converged:
            flagged[i] = True
    return rho, sigma, flagged


def umap_rho_sigma(dist_row, cfg: UmapGraphConfig):
    """Calibrate one row of plain (not squared) neighbor distances.

    Returns (rho, sigma, flagged): rho is the nearest-neighbor distance
    and flagged marks an unreachable target where bisection returned a
    bracket-boundary sigma.
    """
    row = np.sort(np.ascontiguousarray(dist_row, dtype=np.float64), kind="stable")
    if row.size < cfg.k:
        raise ValueError(f"row has {row.size} neighbors, config wants k={cfg.k}")
    target = np.log2(cfg.k)
    rho, sigma, flagged = _calibrate_umap(row[None, :cfg.k], target,
                                          cfg.tol, cfg.max_iter)
    return float(rho[0]), float(sigma[0]), bool(flagged[0])


def fuzzy_union(cond):
    """Probabilistic union of directed memberships: v + v' - v v'."""
    V = cond + cond.T - cond * cond.T
    np.clip(V, 0.0, 1.0, out=V)  # the formula can overshoot 1 by one ulp
    return V


def _knn_of_dist(D, k):
    """Indices and distances of each row's k nearest neighbors, ascending.

    Deterministic for a given input; exact ties at the k-th distance
    resolve by the partition rather than by index, which leaves the
    calibration unchanged.
    """
    b = D.shape[0]
    if k >= b:
        raise ValueError(f"k={k} must be smaller than batch size {b}")
    D = D.copy()
    np.fill_diagonal(D, np.inf)
    part = np.argpartition(D, k - 1, axis=1)[:, :k]
    dpart = np.take_along_axis(D, part, axis=1)
    order = np.argsort(dpart, axis=1, kind="stable")
    return np.take_along_axis(part, order, axis=1), \
        np.take_along_axis(dpart, order, axis=1)


def fuzzy_V(X, cfg: UmapGraphConfig) -> AffinityMatrix:
    """Fuzzy membership matrix from locally calibrated exponential kernels.

    v_j|i = exp(-max(0, d_ij - rho_i)/sigma_i) on the k nearest neighbors
    of i and 0 elsewhere; v_ij is the probabilistic union of the two
    directed memberships.
    """
    D = np.sqrt(pairwise_sq_dist(X))
    b = D.shape[0]
    if b <= cfg.k:
        raise ValueError(f"batch size {b} must exceed k={cfg.k}")
    idx, knn_d = _knn_of_dist(D, cfg.k)
    target = np.log2(cfg.k)
    rho, sigma, flagged = _calibrate_umap(np.ascontiguousarray(knn_d), target,
                                          cfg.tol, cfg.max_iter)
    w = np.exp(-np.maximum(0.0, knn_d - rho[:, None]) / sigma[:, None])
    cond = np.zeros((b, b))
    np.put_along_axis(cond, idx, w, axis=1)
    np.fill_diagonal(cond, 0.0)
    V = fuzzy_union(cond)
    flagged_rows = np.flatnonzero(flagged)
    return AffinityMatrix(size=b, kind=UMAP_FUZZY, values=V,
                          flagged_rows=flagged_rows if flagged_rows.size else None
                          ).validate()


def affinities_from_features(features, kind, cfg) -> AffinityMatrix:
    """Same pipelines applied to network feature rows instead of raw data."""
    if kind == TSNE_JOINT:
        return tsne_affinity(features, cfg)
    if kind == UMAP_FUZZY:
        return fuzzy_V(features, cfg)
    raise ValueError(f"unknown affinity kind {kind!r}")
