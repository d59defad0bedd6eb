"""patroldiff: change-detection tooling for repeat patrol imagery.

Library surface for building aligned target|reference composites, generating
cut-paste difference-detection training data, driving a vision-language
endpoint through two-pass inference, and scoring detections with per-sample
macro-F1.
"""

from .align import (
    Correspondence,
    MatchResult,
    RansacConfig,
    compose_pair,
    estimate_homography_dlt,
    estimate_homography_ransac,
    load_correspondences,
    match_features,
    retrieve_candidates,
    select_reference,
    warp_reference,
)
from .client import (
    MockOracle,
    MockOracleServer,
    ModelClient,
    ModelRequest,
    ModelResponse,
    OracleNoise,
    encode_image,
    mock_oracle_serve,
    parse_detections,
)
from .core import (
    AnomalyVocabulary,
    BBox,
    Homography,
    LabeledBox,
    RasterImage,
    SampleRecord,
    Telemetry,
    apply_homography,
    crop_with_margin,
    geo_mean_size,
    iou,
)
from .evaluation import (
    EvalCondition,
    emit_report,
    evaluate_run,
    filter_samples,
    macro_f1,
    match_sample,
    quartile_agreement,
    sample_f1,
)
from .synth import (
    MaskedObject,
    PerturbationConfig,
    PromptStyle,
    SynthRecord,
    build_prompt,
    generate_synth_dataset,
    paste_object,
    perturb_reference,
)
from .twopass import (
    export_finetune_records,
    run_pass1,
    run_pass2,
    single_pass_result,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyVocabulary",
    "BBox",
    "Correspondence",
    "EvalCondition",
    "Homography",
    "LabeledBox",
    "MaskedObject",
    "MatchResult",
    "MockOracle",
    "MockOracleServer",
    "ModelClient",
    "ModelRequest",
    "ModelResponse",
    "OracleNoise",
    "PerturbationConfig",
    "PromptStyle",
    "RansacConfig",
    "RasterImage",
    "SampleRecord",
    "SynthRecord",
    "Telemetry",
    "apply_homography",
    "build_prompt",
    "compose_pair",
    "crop_with_margin",
    "emit_report",
    "encode_image",
    "estimate_homography_dlt",
    "estimate_homography_ransac",
    "evaluate_run",
    "export_finetune_records",
    "filter_samples",
    "generate_synth_dataset",
    "geo_mean_size",
    "iou",
    "load_correspondences",
    "macro_f1",
    "match_features",
    "match_sample",
    "mock_oracle_serve",
    "parse_detections",
    "paste_object",
    "perturb_reference",
    "quartile_agreement",
    "retrieve_candidates",
    "run_pass1",
    "run_pass2",
    "sample_f1",
    "select_reference",
    "single_pass_result",
    "warp_reference",
    "__version__",
]
