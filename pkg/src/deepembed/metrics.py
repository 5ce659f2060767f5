"""Embedding-quality measures over a (data, projection, labels) triple.

All neighbor machinery is exact brute force with deterministic
tie-breaking (equal distances resolve to the lower index), computed in
row chunks so nothing ever materializes an N x N matrix.
"""

from dataclasses import dataclass

import numpy as np

_CHUNK = 512


@dataclass
class LabeledEmbedding:
    X: np.ndarray  # (N, D) original data
    Y: np.ndarray  # (N, d) projection
    labels: np.ndarray | None = None
    k: int = 7

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("X and Y must be 2-D")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if self.Y.shape[1] >= self.X.shape[1]:
            raise ValueError("projection must have fewer dimensions than the data")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.X.shape[0],):
                raise ValueError("labels length must match the number of rows")
        if not self.k < self.X.shape[0]:
            raise ValueError(f"k={self.k} must be smaller than N={self.X.shape[0]}")


@dataclass
class MetricsReport:
    one_nn_accuracy: float | None
    neighborhood_hit: float | None
    trustworthiness: float
    continuity: float
    shepard_goodness: float
    normalized_stress: float
    k: int

    FIELDS = ("one_nn_accuracy", "neighborhood_hit", "trustworthiness",
              "continuity", "shepard_goodness", "normalized_stress", "k")

    def to_key_values(self):
        lines = []
        for f in self.FIELDS:
            v = getattr(self, f)
            lines.append(f"{f}={'NA' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        header = ",".join(self.FIELDS)
        row = ",".join("NA" if getattr(self, f) is None else repr(getattr(self, f))
                       for f in self.FIELDS)
        return header + "\n" + row + "\n"


def _chunked_sq_dist(M, lo, hi, sq):
    block = M[lo:hi]
    d = sq[lo:hi, None] + sq[None, :] - 2.0 * (block @ M.T)
    np.maximum(d, 0.0, out=d)
    return d


def knn_table(M, k):
    """Exact k-nearest-neighbor index table, self excluded.

    Ties break toward the lower index (stable sort over distances).
    """
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than N={n}")
    sq = np.einsum("ij,ij->i", M, M)
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d = _chunked_sq_dist(M, lo, hi, sq)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def one_nn_accuracy(Y, labels):
    """Leave-one-out nearest-neighbor label agreement in the projection."""
    if labels is None:
        raise ValueError("one_nn_accuracy requires labels")
    labels = np.asarray(labels)
    nn = knn_table(Y, 1)[:, 0]
    return float(np.mean(labels[nn] == labels))


def neighborhood_hit(Y, labels, k=7):
    """Mean fraction of each point's k projected neighbors sharing its label."""
    if labels is None:
        raise ValueError("neighborhood_hit requires labels")
    labels = np.asarray(labels)
    idx = knn_table(Y, k)
    return float(np.mean(labels[idx] == labels[:, None]))


def _rank_in(space_row_order):
    """rank_of[j] = 1-based position of j in a row's distance ordering."""
    rank = np.empty(space_row_order.size, dtype=np.int64)
    rank[space_row_order] = np.arange(1, space_row_order.size + 1)
    return rank


def _rank_penalty(A, B, k):
    """Mean rank excess of B-neighbors missing from A-neighborhoods.

    For each i, points in the k-neighborhood of i under B but not under A
    are penalized by their rank under A minus k.  This is the common core
    of trustworthiness (A = data space) and continuity (A = projection).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    norm = n * k * (2.0 * n - 3.0 * k - 1.0)
    if norm <= 0:
        raise ValueError(f"normalization factor is nonpositive for N={n}, K={k}")
    knn_A = knn_table(A, k)
    knn_B = knn_table(B, k)
    sqA = np.einsum("ij,ij->i", A, A)
    penalty = 0.0
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d = _chunked_sq_dist(A, lo, hi, sqA)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        order = np.argsort(d, axis=1, kind="stable")
        for r, i in enumerate(range(lo, hi)):
            rank = _rank_in(order[r])
            intruders = np.setdiff1d(knn_B[i], knn_A[i], assume_unique=True)
            if intruders.size:
                penalty += float(np.sum(rank[intruders] - k))
    return 1.0 - 2.0 * penalty / norm


def trustworthiness(X, Y, k=7):
    """Penalizes projected neighbors that are not neighbors in the data."""
    return _rank_penalty(X, Y, k)


def continuity(X, Y, k=7):
    """Penalizes data neighbors that went missing from the projection."""
    return _rank_penalty(Y, X, k)


def normalized_stress(X, Y):
    """Squared distance mismatch over squared data distances."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    sqX = np.einsum("ij,ij->i", X, X)
    sqY = np.einsum("ij,ij->i", Y, Y)
    num = 0.0
    den = 0.0
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        dx = np.sqrt(_chunked_sq_dist(X, lo, hi, sqX))
        dy = np.sqrt(_chunked_sq_dist(Y, lo, hi, sqY))
        upper = np.triu(np.ones((hi - lo, n), dtype=bool), k=lo + 1)
        num += float(np.sum((dx[upper] - dy[upper]) ** 2))
        den += float(np.sum(dx[upper] ** 2))
    if den == 0.0:
        raise ValueError("all data points are identical; stress undefined")
    return num / den


def _pair_distances(M):
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    iu = np.triu_indices(n, k=1)
    diff = M[iu[0]] - M[iu[1]]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _average_ranks(a):
    """Ranks starting at 1 with ties assigned their average rank."""
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    sa = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def shepard_goodness(X, Y):
    """Spearman rank correlation between all pairwise distances."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 3:
        raise ValueError("need at least 3 points for a rank correlation")
    dx = _pair_distances(X)
    dy = _pair_distances(np.asarray(Y, dtype=np.float64))
    rx = _average_ranks(dx)
    ry = _average_ranks(dy)
    rx -= rx.mean()
    ry -= ry.mean()
    vx = float(np.sqrt(np.sum(rx * rx)))
    vy = float(np.sqrt(np.sum(ry * ry)))
    if vx == 0.0 or vy == 0.0:
        raise ValueError("rank variance is zero; correlation undefined")
    return float(np.sum(rx * ry)) / (vx * vy)


def full_report(le: LabeledEmbedding) -> MetricsReport:
    """All six measures; label metrics are None when labels are missing."""
    has_labels = le.labels is not None
    return MetricsReport(
        one_nn_accuracy=one_nn_accuracy(le.Y, le.labels) if has_labels else None,
        neighborhood_hit=neighborhood_hit(le.Y, le.labels, le.k) if has_labels else None,
        trustworthiness=trustworthiness(le.X, le.Y, le.k),
        continuity=continuity(le.X, le.Y, le.k),
        shepard_goodness=shepard_goodness(le.X, le.Y),
        normalized_stress=normalized_stress(le.X, le.Y),
        k=le.k,
    )
