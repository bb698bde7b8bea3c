"""Tests for parameter counts, analytic FLOPs and the profile report."""

from dataclasses import replace

import pytest
import torch
from torch import nn

from src.errors import BadResolution, ConfigError
from src.fusion import GatedSum
from src.model import build_model, trainable_parameters
from src.profiler import (
    FLOP_CONVENTION,
    MIN_REPEATS,
    MIN_WARMUP,
    count_flops,
    count_parameters,
    measure_latency,
    profile_model,
)


class TestCountFlops:
    def test_single_conv_hand_count(self):
        conv = nn.Conv2d(1, 1, 3, padding=1, bias=False)
        assert count_flops(conv, torch.zeros(1, 1, 4, 4)) == 288

    def test_bias_adds_one_per_output(self):
        conv = nn.Conv2d(1, 2, 3, padding=1, bias=True)
        assert count_flops(conv, torch.zeros(1, 1, 4, 4)) == 2 * 288 + 32

    def test_elementwise_layers(self):
        seq = nn.Sequential(nn.GroupNorm(1, 2), nn.ReLU())
        assert count_flops(seq.eval(), torch.zeros(1, 2, 3, 3)) == 36

    def test_gated_sum_is_four_per_element(self):
        class Wrapper(nn.Module):
            def __init__(self):
                super().__init__()
                self.combine = GatedSum()

            def forward(self, x):
                return self.combine(x, x, x, x)

        assert count_flops(Wrapper(), torch.zeros(1, 2, 2, 2)) == 32

    def test_monotone_in_resolution(self, tiny_model):
        small = count_flops(tiny_model.eval(), torch.zeros(1, 3, 64, 64))
        large = count_flops(tiny_model, torch.zeros(1, 3, 128, 128))
        assert 0 < small < large


class TestCountParameters:
    def test_pointwise_conv(self):
        assert count_parameters(nn.Conv2d(8, 4, 1)) == 36

    def test_trainable_filter(self):
        module = nn.Sequential(nn.Conv2d(8, 4, 1), nn.Conv2d(4, 4, 1))
        module[1].requires_grad_(False)
        assert count_parameters(module, trainable=True) == 36
        assert count_parameters(module, trainable=False) == 20


class TestMeasureLatency:
    def test_returns_mean_and_std(self):
        mean, std = measure_latency(nn.Conv2d(3, 3, 1), torch.zeros(1, 3, 8, 8))
        assert mean > 0.0 and std >= 0.0

    @pytest.mark.parametrize("warmup,repeats", [(MIN_WARMUP - 1, MIN_REPEATS), (MIN_WARMUP, MIN_REPEATS - 1), (0, 1)])
    def test_below_minimum_counts(self, warmup, repeats):
        with pytest.raises(ConfigError, match="repeats >= 10"):
            measure_latency(nn.Conv2d(3, 3, 1), torch.zeros(1, 3, 8, 8), warmup=warmup, repeats=repeats)


def _trainable(model) -> int:
    return sum(p.numel() for _, p in trainable_parameters(model))


class TestProfileModel:
    def test_report_fields(self, tiny_model):
        report = profile_model(tiny_model, (32, 32)).to_dict()
        for key in ("params_millions", "frozen_params_millions", "gflops", "latency_ms_mean", "latency_ms_std", "input_size"):
            assert key in report
        assert report["input_size"] == [32, 32]
        assert report["flop_convention"] == FLOP_CONVENTION
        assert report["frozen_params_millions"] > 0
        assert report["warmup"] >= 3 and report["repeats"] >= 10

    def test_minimum_counts_checked_before_profiling(self, tiny_model):
        with pytest.raises(ConfigError):
            profile_model(tiny_model, (32, 32), warmup=0, repeats=1)

    def test_none_mode_has_no_frozen_parameters(self, tiny_config):
        report = profile_model(build_model(replace(tiny_config, fusion_mode="none")), (32, 32))
        assert report.frozen_params_millions == 0.0

    def test_none_has_fewer_parameters_and_flops_than_igam(self, tiny_config):
        none = build_model(replace(tiny_config, fusion_mode="none")).eval()
        igam = build_model(tiny_config).eval()
        inputs = torch.zeros(1, 3, 32, 32)
        assert _trainable(none) < _trainable(igam)
        assert count_flops(none, inputs) < count_flops(igam, inputs)

    def test_flops_grow_with_resolution(self, tiny_model):
        small = count_flops(tiny_model.eval(), torch.zeros(1, 3, 256, 256))
        large = count_flops(tiny_model, torch.zeros(1, 3, 512, 512))
        assert small < large

    def test_bad_resolution(self, tiny_model):
        with pytest.raises(BadResolution):
            profile_model(tiny_model, (100, 100))
