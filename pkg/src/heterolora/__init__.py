"""Heterogeneous LoRA allocation on a small numpy Transformer."""

from .adapters import (AdapterConfig, LoraAdapter, ModuleId, ShortcutAdapter, inject, lora_forward, lora_merge,
                       set_enabled)
from .autodiff import Tensor, finite_diff_check, no_grad
from .seeding import DEFAULT_SEEDS, set_global_seed
from .transformer import ModelConfig, Transformer, count_parameters, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
