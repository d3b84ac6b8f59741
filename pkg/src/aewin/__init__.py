"""Axially expanded window attention and the hierarchical AEWin backbone."""

from .attention import (
    AewinConfig,
    AttentionWeights,
    BlockMode,
    aewin_forward,
    attention_reachability,
    psw_aewin_forward,
)
from .backbone import PRESETS, ModelSpec, init_weights, load_spec, model_forward, param_count

__version__ = "0.1.0"
