"""Attention fields on 3D Gaussian splats, head-role profiling and view-bias tools."""

from .bias_lab import DiscreteViewModel, classify_regime, coupling_C, posterior_mixture, preference_ratio
from .field import AttentionField, AttentionMap2D, accumulate_view, attn_kl_loss, render_attention
from .ham import SemanticGuidanceTree, WeightMatrices, accumulate_weights, load_sgt, modulate
from .pipeline import EditConfig, GenConfig, run_editing, run_generation
from .render import RenderConfig, render, render_backward
from .scene import Camera, Gaussian3D, GaussianCloud, build_view_ring
from .stack import BiasSpec, CAStack, TokenSet, ca_map, synth_biased_map

__version__ = "0.1.0"
