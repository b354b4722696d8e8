"""Multiply-accumulate estimation for a single forward pass.

Counts the dominant dense operations (convolutions and linear layers) via
forward hooks on one representative input. Counting conventions differ
between tools, so exported costs are best treated as exogenous and can be
overridden per stage at export time.
"""

from __future__ import annotations

import torch
from torch import nn


def _conv_macs(module: nn.modules.conv._ConvNd, output: torch.Tensor) -> int:
    kernel_ops = 1
    for k in module.kernel_size:
        kernel_ops *= k
    in_per_group = module.in_channels // module.groups
    return output.numel() * in_per_group * kernel_ops


def _linear_macs(module: nn.Linear, output: torch.Tensor) -> int:
    return (output.numel() // module.out_features) * module.in_features * module.out_features


def count_macs(model: nn.Module, example_input: torch.Tensor) -> float:
    """MACs of one forward pass on a single sample (batch dimension kept)."""
    total = 0

    def hook(module, _inputs, output):
        nonlocal total
        if isinstance(output, tuple):
            output = output[0]
        if isinstance(module, nn.modules.conv._ConvNd):
            total += _conv_macs(module, output)
        elif isinstance(module, nn.Linear):
            total += _linear_macs(module, output)

    handles = [
        m.register_forward_hook(hook)
        for m in model.modules()
        if isinstance(m, (nn.modules.conv._ConvNd, nn.Linear))
    ]
    try:
        model.eval()
        with torch.no_grad():
            model(example_input)
    finally:
        for h in handles:
            h.remove()
    batch = example_input.shape[0] if example_input.dim() > 0 else 1
    return float(total) / max(batch, 1)
