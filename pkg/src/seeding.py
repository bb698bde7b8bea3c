"""Seed derivation, seeded parameter initialization, and deterministic mode."""

import math

import numpy as np
import torch
from torch import nn


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 63-bit seed.

    Used so per-sample randomness is a pure function of (seed, epoch, index)
    regardless of iteration order or worker count.
    """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def make_generator(*keys: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*keys))
    return gen


def init_module_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Initialize every parameter of ``module`` from ``generator``.

    Convolution kernels: zero-mean uniform with fan-in bound sqrt(6 / fan_in);
    biases zero; normalization scale 1 and shift 0. Traversal follows
    ``named_modules`` order, so the same architecture and seed always give
    the same tensors.
    """
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Conv2d):
                fan_in = sub.in_channels // sub.groups * sub.kernel_size[0] * sub.kernel_size[1]
                bound = math.sqrt(6.0 / fan_in)
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.GroupNorm):
                if sub.weight is not None:
                    sub.weight.fill_(1.0)
                    sub.bias.zero_()
    return module


def set_deterministic(enabled: bool = True) -> None:
    """Toggle torch's deterministic kernels and disable cuDNN autotuning."""
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    torch.backends.cudnn.benchmark = False
    torch.backends.cudnn.deterministic = enabled
