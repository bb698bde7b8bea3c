"""Parameter counts, analytic FLOPs, and wall-clock latency of a model.

FLOP convention: one multiply-accumulate = 2 FLOPs. A convolution costs
2 * Kh * Kw * (Cin / groups) * Cout * Hout * Wout per sample, plus
Cout * Hout * Wout when it has a bias. Normalization, activation, pooling
and resize layers cost 1 FLOP per output element; the IGAM gated sum costs 4
(two products, two sums). Concatenation is free.
"""

import statistics
import time
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError
from .extractor import check_resolution
from .fusion import GatedSum, Resize
from .model import trainable_parameters

MIN_WARMUP = 3
MIN_REPEATS = 10

FLOP_CONVENTION = (
    "MAC=2 FLOPs; conv bias +1 FLOP per output element; "
    "norm/activation/pool/resize 1 FLOP per output element; gated sum 4 FLOPs per element"
)


@dataclass
class ProfileReport:
    params_millions: float
    frozen_params_millions: float
    gflops: float
    latency_ms_mean: float
    latency_ms_std: float
    input_size: list[int]
    device: str
    warmup: int
    repeats: int
    flop_convention: str = FLOP_CONVENTION

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(module: nn.Module, trainable: bool | None = None) -> int:
    """Parameter count; ``trainable`` True/False filters on requires_grad."""
    return sum(
        p.numel()
        for p in module.parameters()
        if trainable is None or p.requires_grad == trainable
    )


def conv_flops(conv: nn.Conv2d, output: torch.Tensor) -> int:
    kh, kw = conv.kernel_size
    out_elems = output.numel()
    flops = 2 * kh * kw * (conv.in_channels // conv.groups) * out_elems
    if conv.bias is not None:
        flops += out_elems
    return flops


def _elementwise(_module: nn.Module, output: torch.Tensor) -> int:
    return output.numel()


def _gated_sum(_module: nn.Module, output: torch.Tensor) -> int:
    return 4 * output.numel()


_FLOP_RULES = {
    nn.Conv2d: conv_flops,
    nn.GroupNorm: _elementwise,
    nn.ReLU: _elementwise,
    nn.Sigmoid: _elementwise,
    nn.MaxPool2d: _elementwise,
    nn.AvgPool2d: _elementwise,
    Resize: _elementwise,
    GatedSum: _gated_sum,
}


def count_flops(model: nn.Module, inputs: torch.Tensor) -> int:
    """Total FLOPs of one forward pass on ``inputs`` under FLOP_CONVENTION.

    Resize layers that short-circuit (sizes already equal) still count their
    output elements.
    """
    total = 0

    def hook(module, _inputs, output):
        nonlocal total
        total += _FLOP_RULES[type(module)](module, output)

    handles = [
        m.register_forward_hook(hook) for m in model.modules() if type(m) in _FLOP_RULES
    ]
    try:
        with torch.no_grad():
            model(inputs)
    finally:
        for h in handles:
            h.remove()
    return total


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def _check_counts(warmup: int, repeats: int) -> None:
    if warmup < MIN_WARMUP or repeats < MIN_REPEATS:
        raise ConfigError(
            f"latency needs warmup >= {MIN_WARMUP} and repeats >= {MIN_REPEATS}, "
            f"got warmup={warmup}, repeats={repeats}"
        )


def measure_latency(
    model: nn.Module, inputs: torch.Tensor, warmup: int = MIN_WARMUP, repeats: int = MIN_REPEATS
) -> tuple[float, float]:
    """Mean and standard deviation (ms) of ``repeats`` timed forwards.

    Raises:
        ConfigError: If warmup < MIN_WARMUP or repeats < MIN_REPEATS.
    """
    _check_counts(warmup, repeats)
    model.eval()
    device = inputs.device
    with torch.no_grad():
        for _ in range(warmup):
            model(inputs)
        _sync(device)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            model(inputs)
            _sync(device)
            times.append((time.perf_counter() - start) * 1000.0)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return statistics.fmean(times), std


def profile_model(
    model: nn.Module,
    input_size: tuple[int, int],
    warmup: int = MIN_WARMUP,
    repeats: int = MIN_REPEATS,
    device: str = "cpu",
) -> ProfileReport:
    """Profile a model on one (1, 3, H, W) zero input.

    Frozen parameters are those of modules that run: an extractor skipped in
    fusion mode ``none`` counts as 0.
    """
    _check_counts(warmup, repeats)
    h, w = input_size
    inputs = torch.zeros(1, 3, h, w, device=device)
    check_resolution(inputs)
    model = model.to(device).eval()

    trainable = sum(p.numel() for _, p in trainable_parameters(model))
    frozen = count_parameters(model) - trainable
    if getattr(model, "fusion_mode", None) == "none":
        frozen -= count_parameters(model.extractor)
    flops = count_flops(model, inputs)
    mean_ms, std_ms = measure_latency(model, inputs, warmup=warmup, repeats=repeats)
    return ProfileReport(
        params_millions=trainable / 1e6,
        frozen_params_millions=frozen / 1e6,
        gflops=flops / 1e9,
        latency_ms_mean=mean_ms,
        latency_ms_std=std_ms,
        input_size=[h, w],
        device=str(device),
        warmup=warmup,
        repeats=repeats,
    )
