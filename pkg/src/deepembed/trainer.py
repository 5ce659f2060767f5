"""Mini-batch training: staged plans, feature-tap recursions, projection.

A run executes an ordered list of phases on a single parameter set and a
single Adam state.  Phases driven by raw data recompute their batch
affinities every epoch (reshuffling changes batch membership); phases
driven by a feature tap freeze the features with one inference pass at
phase start and compute batch affinities from those frozen rows.

Every source of randomness is keyed on (seed, global epoch), so running
a plan in one call or as a sequence of resumed calls produces
bit-identical parameters.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .affinity import (DegenerateRowError, PerplexityConfig, UmapGraphConfig,
                       fuzzy_V, tsne_affinity)
from .losses import TsneKernelConfig, UmapKernelConfig, ce_loss_grad, kl_loss_grad

RAW_SOURCE = "raw"


@dataclass(frozen=True)
class Phase:
    loss_kind: str  # "tsne" | "umap"
    affinity_source: str  # "raw" or a tap name
    epochs: int

    def __post_init__(self):
        if self.loss_kind not in ("tsne", "umap"):
            raise ValueError(f"loss_kind must be tsne or umap, got {self.loss_kind!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def label(self):
        return f"{self.loss_kind}/{self.affinity_source}"


def default_plan():
    """100 base epochs, three 50-epoch tap recursions, 100 refinement epochs."""
    return [
        Phase("tsne", RAW_SOURCE, 100),
        Phase("tsne", "dense2000", 50),
        Phase("tsne", "dense500", 50),
        Phase("tsne", "dense100", 50),
        Phase("umap", RAW_SOURCE, 100),
    ]


@dataclass
class TrainConfig:
    batch_size: int = 2500
    seed: int = 0
    perplexity: PerplexityConfig = field(default_factory=PerplexityConfig)
    umap_graph: UmapGraphConfig = field(default_factory=UmapGraphConfig)
    tsne_kernel: TsneKernelConfig = field(default_factory=TsneKernelConfig)
    umap_kernel: UmapKernelConfig = field(default_factory=UmapKernelConfig)
    plan: list = field(default_factory=default_plan)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 4:
            raise ValueError(f"batch_size must be >= 4, got {self.batch_size}")


@dataclass
class BatchPartition:
    permutation: np.ndarray
    batches: list  # (start, stop) ranges into the permutation


@dataclass
class EpochRecord:
    global_epoch: int
    phase_index: int
    phase_label: str
    epoch_in_phase: int
    mean_loss: float
    n_batches: int
    n_skipped: int
    seconds: float

    def line(self):
        return (f"epoch={self.global_epoch} phase={self.phase_index}:"
                f"{self.phase_label} phase_epoch={self.epoch_in_phase} "
                f"loss={self.mean_loss:.6f} batches={self.n_batches} "
                f"skipped={self.n_skipped} seconds={self.seconds:.2f}")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    phase_boundaries: list = field(default_factory=list)  # global epoch of each phase start

    def lines(self):
        return [r.line() for r in self.records]


@dataclass
class DreResult:
    params: nn.NetworkParams
    adam: nn.AdamState
    log: TrainLog
    epochs_done: int


def _epoch_rng(seed, global_epoch):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E0D,
                                                         int(global_epoch)]))


def make_epoch_batches(n, batch_size, rng) -> BatchPartition:
    """Shuffle 0..n-1 and slice into fixed-size batches.

    A trailing remainder shorter than batch_size is dropped for the
    epoch; the next epoch's reshuffle redraws membership, so coverage
    evens out over training.
    """
    if n < batch_size:
        raise ValueError(f"dataset of {n} rows is smaller than batch_size {batch_size}")
    perm = rng.permutation(n)
    n_batches = n // batch_size
    batches = [(i * batch_size, (i + 1) * batch_size) for i in range(n_batches)]
    return BatchPartition(permutation=perm, batches=batches)


def _batch_affinity(rows, phase: Phase, cfg: TrainConfig):
    if phase.loss_kind == "tsne":
        return tsne_affinity(rows, cfg.perplexity)
    return fuzzy_V(rows, cfg.umap_graph)


def _loss_grad(affinity, Y, phase: Phase, cfg: TrainConfig):
    if phase.loss_kind == "tsne":
        return kl_loss_grad(affinity, Y, cfg.tsne_kernel)
    return ce_loss_grad(affinity, Y, cfg.umap_kernel)


def frozen_tap_features(params: nn.NetworkParams, X, tap, batch_size):
    """One inference pass over the whole dataset, in batch-size chunks."""
    n = X.shape[0]
    dim = params.spec.tap_dim(tap)
    feats = np.empty((n, dim))
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        _, trace = nn.forward(params, X[lo:hi], mode="infer")
        feats[lo:hi] = nn.tap_features(trace, tap)
    return feats


def train_phase(params, adam, X, phase: Phase, cfg: TrainConfig, *,
                phase_index=0, start_epoch=0, log=None, sink=None):
    """Run one phase; mutates params/adam, returns the next global epoch.

    Degenerate-affinity batches are skipped with a logged warning; a
    phase in which every batch of every epoch degenerated is an error.
    """
    log = log if log is not None else TrainLog()
    n = X.shape[0]
    if phase.affinity_source != RAW_SOURCE and phase.affinity_source not in params.spec.taps:
        raise ValueError(f"phase affinity source {phase.affinity_source!r} is not "
                         f"a tap of the network (have {sorted(params.spec.taps)})")

    if phase.affinity_source == RAW_SOURCE:
        affinity_rows = X
    else:
        affinity_rows = frozen_tap_features(params, X, phase.affinity_source,
                                            cfg.batch_size)

    log.phase_boundaries.append(start_epoch)
    global_epoch = start_epoch
    effective_total = 0
    for epoch in range(phase.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, global_epoch)
        part = make_epoch_batches(n, cfg.batch_size, rng)
        losses = []
        skipped = 0
        for lo, hi in part.batches:
            ids = part.permutation[lo:hi]
            try:
                aff = _batch_affinity(affinity_rows[ids], phase, cfg)
            except DegenerateRowError as err:
                skipped += 1
                if sink is not None:
                    sink(f"warning: epoch {global_epoch} skipped a batch "
                         f"({err})")
                continue
            Y, trace = nn.forward(params, X[ids], mode="train")
            loss, dY = _loss_grad(aff, Y, phase, cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss in phase {phase_index} ({phase.label()}), "
                    f"epoch {global_epoch}: {loss}")
            grads = nn.backward(params, trace, dY)
            nn.adam_step(params, grads, adam)
            losses.append(loss)
        effective_total += len(losses)
        rec = EpochRecord(
            global_epoch=global_epoch, phase_index=phase_index,
            phase_label=phase.label(), epoch_in_phase=epoch,
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            n_batches=len(losses), n_skipped=skipped,
            seconds=time.perf_counter() - t0)
        log.records.append(rec)
        if sink is not None and (epoch % cfg.log_every == 0
                                 or epoch == phase.epochs - 1):
            sink(rec.line())
        global_epoch += 1
    if effective_total == 0:
        raise RuntimeError(f"phase {phase_index} ({phase.label()}) had no "
                           "effective batches: every batch degenerated")
    return global_epoch


def run_dre(X, cfg: TrainConfig, *, spec=None, params=None, adam=None,
            start_epoch=0, sink=None) -> DreResult:
    """Execute the staged plan on one parameter set.

    Parameters persist across phases (no reinitialization) and so does
    the Adam state.  Pass params/adam/start_epoch from a previous result
    to continue a run; the continuation is bit-identical to having run
    the concatenated plan in one call.
    """
    X = nn.as_matrix(X, "data")
    if not cfg.plan:
        raise ValueError("stage plan is empty")
    if params is None:
        if spec is None:
            spec = nn.NetworkSpec(input_dim=X.shape[1])
        params = nn.init_params(spec, cfg.seed)
    if X.shape[1] != params.spec.input_dim:
        raise ValueError(f"data has {X.shape[1]} columns, network wants "
                         f"{params.spec.input_dim}")
    if adam is None:
        adam = nn.init_adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                            epsilon=cfg.adam_epsilon)
    log = TrainLog()
    epoch = start_epoch
    for pi, phase in enumerate(cfg.plan):
        epoch = train_phase(params, adam, X, phase, cfg, phase_index=pi,
                            start_epoch=epoch, log=log, sink=sink)
    return DreResult(params=params, adam=adam, log=log, epochs_done=epoch)


def embed(params: nn.NetworkParams, X, batch_size=None):
    """Project rows with a single inference pass.

    Rows are independent: a row embeds identically whether alone or in
    any batch, because inference uses only running statistics.
    """
    X = nn.as_matrix(X, "data")
    if X.shape[1] != params.spec.input_dim:
        raise ValueError(f"data has {X.shape[1]} columns, network wants "
                         f"{params.spec.input_dim}")
    n = X.shape[0]
    chunk = batch_size or max(n, 1)
    out = np.empty((n, params.spec.output_dim))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        Y, _ = nn.forward(params, X[lo:hi], mode="infer")
        out[lo:hi] = Y
    return out
