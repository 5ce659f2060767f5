"""Low-dimensional similarity kernels, loss values, and exact gradients.

Both losses are written with explicit clamping inside the logarithms and
the gradients are derived for the clamped objective, so finite
differences of the returned loss reproduce the returned gradient to
round-off.
"""

from dataclasses import dataclass

import numpy as np

from .affinity import TSNE_JOINT, UMAP_FUZZY, AffinityMatrix, pairwise_sq_dist

Q_CLAMP = 1e-12  # floor for q inside the KL log


@dataclass(frozen=True)
class TsneKernelConfig:
    alpha: float = 1.0  # degrees of freedom of the t-distribution

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class UmapKernelConfig:
    a: float = 1.0
    b: float = 1.0
    clamp: float = 1e-12  # w is clipped to [clamp, 1 - clamp] inside logs

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"a and b must be positive, got a={self.a}, b={self.b}")
        if not 0 < self.clamp < 0.5:
            raise ValueError(f"clamp must lie in (0, 0.5), got {self.clamp}")


def compute_Q(Y, cfg: TsneKernelConfig = TsneKernelConfig()):
    """Heavy-tailed pairwise probabilities of the embedding.

    Returns (Q, kernel): kernel[i][j] = (1 + |y_i - y_j|^2)^(-(alpha+1)/2)
    with zero diagonal, and Q is the kernel normalized by its sum over
    all ordered pairs.
    """
    D2 = pairwise_sq_dist(Y)
    kernel = _t_kernel(D2, cfg.alpha)
    np.fill_diagonal(kernel, 0.0)
    Q = kernel / kernel.sum()
    return Q, kernel


def _t_kernel(D2, alpha):
    if alpha == 1.0:  # (1 + d2)^-1 without the generic pow
        return 1.0 / (1.0 + D2)
    return (1.0 + D2) ** (-(alpha + 1.0) / 2.0)


def kl_loss_grad(P: AffinityMatrix, Y, cfg: TsneKernelConfig = TsneKernelConfig()):
    """KL(P || Q) over the batch and its exact gradient in Y.

    Terms with p_ij = 0 contribute nothing (0 log 0 := 0) and q is
    floored at 1e-12 inside the log; pairs sitting on the floor carry no
    gradient, exactly as the clamped loss dictates.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if P.kind != TSNE_JOINT:
        raise ValueError(f"expected a {TSNE_JOINT} affinity, got {P.kind}")
    if Y.shape[0] != P.size:
        raise ValueError(f"Y has {Y.shape[0]} rows, affinity is {P.size}x{P.size}")
    Pm = P.values
    D2 = pairwise_sq_dist(Y)
    kernel = _t_kernel(D2, cfg.alpha)
    np.fill_diagonal(kernel, 0.0)
    S = kernel.sum()
    Q = kernel / S
    q_floored = np.maximum(Q, Q_CLAMP)

    pos = Pm > 0.0
    loss = float(np.sum(Pm[pos] * (np.log(Pm[pos]) - np.log(q_floored[pos]))))

    # dL/dq, zero where the floor is active
    G = np.where(pos & (Q > Q_CLAMP), -Pm / q_floored, 0.0)
    # q = kernel / S  =>  dL/dkernel = (G - sum(G*Q)) / S off the diagonal
    dL_dk = (G - np.sum(G * Q)) / S
    np.fill_diagonal(dL_dk, 0.0)
    # kernel = (1 + d2)^(-(alpha+1)/2)
    if cfg.alpha == 1.0:
        dk_dd2 = -kernel * kernel
    else:
        dk_dd2 = (-(cfg.alpha + 1.0) / 2.0) * (1.0 + D2) ** (-(cfg.alpha + 3.0) / 2.0)
    F = dL_dk * dk_dd2
    M = F + F.T
    dY = 2.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)
    return loss, dY


def compute_W(Y, cfg: UmapKernelConfig = UmapKernelConfig()):
    """Low-dimensional membership kernel w = (1 + a |y_i-y_j|^(2b))^(-1).

    Off-diagonal entries lie in (0, 1]; the diagonal is set to 0.
    """
    D2 = pairwise_sq_dist(Y)
    W = _umap_kernel(D2, cfg)
    np.fill_diagonal(W, 0.0)
    return W


def _umap_kernel(D2, cfg):
    if cfg.b == 1.0:
        return 1.0 / (1.0 + cfg.a * D2)
    return 1.0 / (1.0 + cfg.a * D2 ** cfg.b)


def ce_loss_grad(V: AffinityMatrix, Y, cfg: UmapKernelConfig = UmapKernelConfig()):
    """Fuzzy cross entropy CE(V || W) and its exact gradient in Y.

    w is clipped into [clamp, 1 - clamp] inside both log terms; v in
    {0, 1} switches off the corresponding term via 0 log 0 := 0.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if V.kind != UMAP_FUZZY:
        raise ValueError(f"expected a {UMAP_FUZZY} affinity, got {V.kind}")
    if Y.shape[0] != V.size:
        raise ValueError(f"Y has {Y.shape[0]} rows, affinity is {V.size}x{V.size}")
    Vm = V.values
    b = V.size
    off = ~np.eye(b, dtype=bool)
    D2 = pairwise_sq_dist(Y)
    W = _umap_kernel(D2, cfg)
    w_clipped = np.clip(W, cfg.clamp, 1.0 - cfg.clamp)

    attract = np.zeros_like(Vm)
    mask = off & (Vm > 0.0)
    attract[mask] = Vm[mask] * (np.log(Vm[mask]) - np.log(w_clipped[mask]))
    repel = np.zeros_like(Vm)
    mask = off & (Vm < 1.0)
    repel[mask] = (1.0 - Vm[mask]) * (np.log1p(-Vm[mask])
                                      - np.log1p(-w_clipped[mask]))
    loss = float(attract.sum() + repel.sum())

    # dL/dw, zero wherever the clip is active
    active = off & (W > cfg.clamp) & (W < 1.0 - cfg.clamp)
    G = np.where(active, -Vm / w_clipped + (1.0 - Vm) / (1.0 - w_clipped), 0.0)
    # w = (1 + a u^b)^(-1) with u the squared distance
    if cfg.b == 1.0:
        dw_du = np.where(active & (D2 > 0.0), -cfg.a * W * W, 0.0)
    else:
        u_safe = np.where(D2 > 0.0, D2, 1.0)  # masked-out pairs; avoids 0^(b-1)
        dw_du = np.where(active & (D2 > 0.0),
                         -cfg.a * cfg.b * u_safe ** (cfg.b - 1.0) * W * W, 0.0)
    F = G * dw_du
    M = F + F.T
    dY = 2.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)
    return loss, dY
