"""Block-LoRA and LoRA adapters with exact-gradient training on a toy dual encoder."""

from .adapter import (AdapterConfig, BlockLoRAAdapter, FrozenLinear, LoRAAdapter, MergedLayer,
                      block_identity_check, count_params, forward_block, forward_lora,
                      init_adapter, merge, partition, unmerge)
from .cost import BoundInputs, bound_block, bound_lora, measured_mac_ratio, theoretical_macs
from .linalg import MacCounter

__all__ = [
    "AdapterConfig", "BlockLoRAAdapter", "BoundInputs", "FrozenLinear", "LoRAAdapter",
    "MacCounter", "MergedLayer", "block_identity_check", "bound_block", "bound_lora",
    "count_params", "forward_block", "forward_lora", "init_adapter", "measured_mac_ratio",
    "merge", "partition", "theoretical_macs", "unmerge",
]
