"""Semantic-region style rearrangement, multi-level feature alignment, and
domain-invariance analysis for domain-generalized segmentation at desk scale."""

from .stats import (
    EPS_STD,
    IGNORE,
    AbsentCategoryError,
    RegionStats,
    gap,
    present_categories,
    region_moments,
    region_ratio,
    resize_labels,
    sap,
    split_by_semantic,
)
from .srm import (
    DEFAULT_ALPHA,
    MixWeights,
    adain_transfer,
    rearrange,
    sample_mix_weights,
    synthesize_distribution,
)
from .mla import (
    DEFAULT_LAMBDA_MLA,
    AlignmentBreakdown,
    LayerAlignment,
    zero_breakdown,
    global_alignment,
    local_alignment,
    mla_loss,
    regional_alignment,
    style_eliminate,
)
from .objective import (
    DEFAULT_LAMBDA_PC,
    PROB_CLAMP,
    AllIgnoredError,
    LossBreakdown,
    js_consistency,
    task_loss,
    total_loss,
)
from .net import (
    DEEP_LAYERS,
    NetworkConfig,
    SegNet,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    gradcheck,
    load_checkpoint,
    neutral_pretrain,
    parameter_digest,
    poly_lr,
    check_finite,
    save_checkpoint,
    train,
)
from .invariance import (
    DEFAULT_GAMMA,
    EmptySetError,
    FeatureSampleSet,
    InvarianceReport,
    format_report_table,
    analyze,
    build_sample_sets,
    chamfer_distance,
    invariance_score,
)
from .data import (
    DomainSpec,
    LabelOutOfRangeError,
    MissingPairError,
    confusion_matrix,
    SegSample,
    default_domain_pair,
    generate_domain,
    load_dataset,
    make_pretrain_domains,
    miou,
    save_dataset,
)


from .config import RunConfig, load_config, parse_config_text, config_to_text

__all__ = [name for name in dir() if not name.startswith("_")]
