"""Dual-encoder video-language pipeline.

A compact, fully testable implementation of a two-stream video
understanding stack: segment-wise frame sampling, a per-frame image
encoder plus a joint space-time video encoder, pooled vision-language
adapters feeding a byte-level causal LM, low-rank instruction tuning,
deterministic dataset annotation, and judged/choice benchmark scoring.
"""

from .adapter import (
    AdapterConfig,
    CnnPooler,
    PooledTokens,
    VisionLanguageAdapter,
    adaptive_bounds,
    pool_cnn,
    pool_spatial,
    pool_temporal,
)
from .annotate import (
    AuditLog,
    DenseDescription,
    HttpTextGenClient,
    MockTextGenClient,
    QAPair,
    QA_CATEGORIES,
    ValidationReport,
    annotate_video,
    default_client,
    validate_dataset,
)
from .encoders import (
    FeatureGrid,
    ImageEncoder,
    ImageEncoderSpec,
    VideoEncoder,
    VideoEncoderSpec,
    downsample_frames,
    frames_to_tensor,
)
from .errors import (
    ConfigError,
    ContextOverflowError,
    CoverageGapError,
    EmptyLossMaskError,
    InsufficientFramesError,
    ParseError,
    PipelineError,
    SchemaError,
    SegmentLengthError,
    ShapeMismatchError,
)
from .evalharness import (
    BenchmarkScore,
    EvalItem,
    JudgeCache,
    JudgeVerdict,
    ZeroshotScore,
    extract_choice_letter,
    mvbench_average,
    recompute_average,
    round_half_up,
    score_diverse,
    score_mvbench,
    score_vcgbench,
    score_zeroshot,
)
from .fusion import (
    BudgetReport,
    TokenBlock,
    TokenSequence,
    assemble_tokens,
    token_budget,
)
from .lm import (
    CausalLM,
    GenerationResult,
    LMConfig,
    LoraConfig,
    LoraLinear,
    apply_lora,
    decode_tokens,
    encode_text,
    generate,
    generate_text,
    lora_parameter_count,
    lora_parameters,
    make_turn,
    nll_loss,
)
from .media import (
    FrameArray,
    SceneList,
    SegmentPlan,
    VideoClipMeta,
    detect_scenes,
    open_video,
    plan_segments,
    sample_frames,
    select_keyframes,
    write_raw_tensor,
)
from .model import (
    MultimodalExample,
    PipelineConfig,
    VideoLanguageModel,
)
from .training import (
    GuardedOptimizer,
    InstructionSample,
    StageConfig,
    StageResult,
    TRAINABLE_GROUPS,
    build_optimizer,
    configure_stage,
    load_checkpoint,
    load_instruction_dataset,
    load_sampled_frames,
    lr_factor,
    run_stage,
    save_checkpoint,
    trainable_report,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AuditLog",
    "BenchmarkScore",
    "BudgetReport",
    "CausalLM",
    "CnnPooler",
    "ConfigError",
    "ContextOverflowError",
    "CoverageGapError",
    "DenseDescription",
    "EmptyLossMaskError",
    "EvalItem",
    "FeatureGrid",
    "FrameArray",
    "GenerationResult",
    "GuardedOptimizer",
    "HttpTextGenClient",
    "ImageEncoder",
    "ImageEncoderSpec",
    "InstructionSample",
    "InsufficientFramesError",
    "JudgeCache",
    "JudgeVerdict",
    "LMConfig",
    "LoraConfig",
    "LoraLinear",
    "MockTextGenClient",
    "MultimodalExample",
    "ParseError",
    "PipelineConfig",
    "PipelineError",
    "PooledTokens",
    "QAPair",
    "QA_CATEGORIES",
    "SceneList",
    "SchemaError",
    "SegmentLengthError",
    "SegmentPlan",
    "ShapeMismatchError",
    "StageConfig",
    "StageResult",
    "TRAINABLE_GROUPS",
    "TokenBlock",
    "TokenSequence",
    "ValidationReport",
    "VideoClipMeta",
    "VideoEncoder",
    "VideoEncoderSpec",
    "VideoLanguageModel",
    "VisionLanguageAdapter",
    "ZeroshotScore",
    "adaptive_bounds",
    "annotate_video",
    "apply_lora",
    "assemble_tokens",
    "build_optimizer",
    "configure_stage",
    "decode_tokens",
    "default_client",
    "detect_scenes",
    "downsample_frames",
    "encode_text",
    "extract_choice_letter",
    "frames_to_tensor",
    "generate",
    "generate_text",
    "load_checkpoint",
    "load_instruction_dataset",
    "load_sampled_frames",
    "lora_parameter_count",
    "lora_parameters",
    "lr_factor",
    "make_turn",
    "mvbench_average",
    "nll_loss",
    "open_video",
    "plan_segments",
    "pool_cnn",
    "pool_spatial",
    "pool_temporal",
    "recompute_average",
    "round_half_up",
    "run_stage",
    "sample_frames",
    "save_checkpoint",
    "score_diverse",
    "score_mvbench",
    "score_vcgbench",
    "score_zeroshot",
    "select_keyframes",
    "token_budget",
    "trainable_report",
    "validate_dataset",
    "write_raw_tensor",
]
