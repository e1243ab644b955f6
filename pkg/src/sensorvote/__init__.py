"""sensorvote: treat camera sensor settings as selectable inputs at test
time — capture a library of views, keep the captures whose feature statistics
sit closest to the source distribution, entropy-filter their augmentations,
and hard-vote the survivors."""

from .camera import (
    ExposureModel,
    Illumination,
    Scene,
    ae_protocol,
    auto_exposure,
    capture,
    exposure,
    illumination_presets,
    noiseless_model,
)
from .csa import CsaPolicy, capture_latency, capture_latency_seconds, csa1, csa2, csa3, select_candidates
from .domain import (
    AugmentedView,
    LayerStats,
    PhysicalView,
    PipelineParams,
    SensorConfig,
    SensorGrid,
    SourceStats,
    VoteSet,
    canonical_order,
    default_grid,
    retained_count,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentReport,
    export_report,
    run_benchmark,
    sweep,
)
from .pipeline import (
    AffinityScore,
    MethodDecision,
    affinity_score,
    aggregate_stats,
    augment_geometric,
    augment_photometric,
    confident_subset,
    entropy_filter,
    hard_vote,
    marginalized_vote,
    run_ae,
    run_confidence_only,
    run_mvp,
    select_top_k,
    shannon_entropy,
)
from .provider import (
    EmbeddingFileProvider,
    FeatureProvider,
    ProviderError,
    SyntheticProvider,
    SyntheticProviderModel,
    build_source_stats,
    load_embedding_provider,
)
from .synthworld import SignatureSpace, make_scenes

__version__ = "0.1.0"
