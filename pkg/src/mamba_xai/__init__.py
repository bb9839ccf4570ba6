"""Selective state-space layers viewed as hidden attention, with explainability tools."""
from .attention_view import (AttentionMatrix, QKHFactors, apply_alpha, approx_alpha_from_factors,
                             combine_bidirectional, factorize_qkh, inner_matrices,
                             materialize_alpha, materialize_all)
from .explain import RelevanceMap, mamba_attribution, raw_attention, rollout, upsample_bilinear
from .gradients import GradientRequest, backward
from .model import ModelState, ModelWeights, block_forward, init_weights, model_forward
from .ssm_core import (DiscreteSystem, S6Params, compute_ssm_params, scan_parallel,
                       scan_recurrent)
from .tensor_io import ModelConfig, TensorBundle, load_bundle, save_bundle

__version__ = "0.1.0"
