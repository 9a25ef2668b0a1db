"""Sketch-guided image generation via attention-aligned latent optimization.

A reference sketch is DDIM-inverted while its class-token cross-attention
maps are recorded; fresh-noise generation is then steered by gradient
descent on a symmetric-KL loss between those target maps and the live ones.
"""

from .attention import (
    TokenAttentionStack,
    build_target_stack,
    export_stack,
    extract_token_maps,
    load_stack,
    normalize_map,
)
from .backbone import (
    AttentionRecord,
    DenoiserBackbone,
    DenoiserOutput,
    SelfAttentionRecord,
    TextEmbedding,
    TinyDenoiser,
    load_backbone,
)
from .containers import Container, ContainerError, read_container, write_container
from .editing import (
    EditingConfig,
    ExemplarFeatures,
    export_exemplar,
    generate_with_exemplar,
    load_exemplar,
    record_exemplar,
)
from .guidance import (
    GuidanceConfig,
    alignment_loss,
    guided_denoise_step,
    optimize_latent,
    symmetric_kl,
)
from .inversion import (
    LatentTrajectory,
    NumericsError,
    conditioned_epsilon,
    export_trajectory,
    invert,
    load_trajectory,
    reconstruct,
)
from .analysis import (
    LatentStats,
    compare_distributions,
    domain_gap_study,
    latent_statistics,
    trace_report,
)
from .pipeline import (
    GenerationResult,
    PromptPair,
    RunConfig,
    RunManifest,
    build_prompts,
    decode_latent,
    encode_image,
    extract_reference_features,
    generate,
    save_result,
)
from .scheduler import (
    CLEAN_TIMESTEP,
    NoiseSchedule,
    cfg_epsilon,
    ddim_inverse_step,
    ddim_step,
    make_noise_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "CLEAN_TIMESTEP",
    "Container",
    "ContainerError",
    "DenoiserBackbone",
    "DenoiserOutput",
    "EditingConfig",
    "ExemplarFeatures",
    "GenerationResult",
    "GuidanceConfig",
    "LatentStats",
    "LatentTrajectory",
    "NoiseSchedule",
    "NumericsError",
    "PromptPair",
    "RunConfig",
    "RunManifest",
    "SelfAttentionRecord",
    "TextEmbedding",
    "TinyDenoiser",
    "TokenAttentionStack",
    "alignment_loss",
    "build_prompts",
    "build_target_stack",
    "cfg_epsilon",
    "compare_distributions",
    "conditioned_epsilon",
    "ddim_inverse_step",
    "ddim_step",
    "decode_latent",
    "domain_gap_study",
    "encode_image",
    "export_exemplar",
    "export_stack",
    "export_trajectory",
    "extract_reference_features",
    "extract_token_maps",
    "generate",
    "generate_with_exemplar",
    "guided_denoise_step",
    "invert",
    "latent_statistics",
    "load_backbone",
    "load_exemplar",
    "load_stack",
    "load_trajectory",
    "make_noise_schedule",
    "normalize_map",
    "optimize_latent",
    "read_container",
    "reconstruct",
    "record_exemplar",
    "save_result",
    "symmetric_kl",
    "trace_report",
    "write_container",
]
