"""Differentiable wavelet-domain style perturbation and style-orthogonal
query selection, plus a desk-scale detection-transformer harness that
exercises both under synthetic domain shift."""

from .numcore import (
    ChannelStats,
    ContractViolationError,
    LinearParams,
    RngStream,
    channel_stats,
    finite_diff_vjp_check,
    layer_normalize,
    linear_apply,
    load_feature_map,
    sample_gaussian,
    save_feature_map,
)
from .wavelet import SubBands, dwt2, dwt2_vjp, idwt2, idwt2_vjp, wavelet_backward
from .styleaug import (
    NoiseSample,
    WaveNPConfig,
    normalization_perturbation,
    sample_noise,
    wavenp_backward,
    wavenp_forward,
)
from .daqs import (
    DaqsParams,
    SelectionResult,
    StyleEmbedding,
    daqs_backward,
    daqs_forward,
    project_out_style,
    select_topk,
    style_embedding,
)

__version__ = "0.1.0"
