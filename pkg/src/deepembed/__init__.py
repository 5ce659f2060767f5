"""Parametric embedding networks trained with t-SNE and UMAP losses."""

from .affinity import (AffinityMatrix, DegenerateRowError, PerplexityConfig,
                       UmapGraphConfig, affinities_from_features, fuzzy_V,
                       joint_P, pairwise_sq_dist, sigma_search, tsne_affinity,
                       umap_rho_sigma)
from .data_io import (Dataset, ModelArtifact, export_embedding,
                      export_scatter_svg, load_csv, load_idx, load_model,
                      normalize, save_model)
from .losses import (TsneKernelConfig, UmapKernelConfig, ce_loss_grad,
                     compute_Q, compute_W, kl_loss_grad)
from .metrics import (LabeledEmbedding, MetricsReport, continuity, full_report,
                      knn_table, neighborhood_hit, normalized_stress,
                      one_nn_accuracy, shepard_goodness, trustworthiness)
from .nn import (AdamState, ForwardTrace, NetworkParams, NetworkSpec,
                 adam_step, backward, forward, init_adam, init_params,
                 tap_features)
from .trainer import (Phase, TrainConfig, TrainLog, default_plan, embed,
                      make_epoch_batches, run_dre, train_phase)

__version__ = "0.1.0"
