"""Explanation-enhanced graph backbones with cross-attention-mixer fusion
for two-modality connectome classification."""

from . import autodiff, gradcheck
from .backbone import BackboneParams, backbone_forward, rggcn_layer, train_backbone
from .config import (
    ABLATION_ROWS,
    BackboneConfig,
    FinetuneConfig,
    FusionConfig,
    LossWeights,
    MaskConfig,
    PipelineConfig,
    loss_weight_grid,
    stage_rng,
)
from .data import (
    ConnectomeGraph,
    Subject,
    SyntheticSpec,
    build_graph,
    knn_sparsify,
    ldp_features,
    load_dataset,
    random_planted_spec,
    save_dataset,
    synthesize_dataset,
)
from .explain import (
    ExplanationReport,
    GlobalEdgeMask,
    apply_mask,
    finetune_backbone,
    learn_global_mask,
    top_connections,
)
from .fusion import (
    FusionBatch,
    FusionParams,
    connex_forward,
    cross_attention,
    mixer_layer,
    self_attention_encoder,
    unified_representation,
)
from .pipeline import (
    MetricsRow,
    cross_validate,
    joint_loss,
    metrics,
    predict,
    run_ablations,
    train_fusion,
    write_metrics_csv,
)
from .report import emit_connectivity_data

__version__ = "0.1.0"
