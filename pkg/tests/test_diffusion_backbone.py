import math
import time

import pytest
import torch

from bench.synthetic import SHAPES
from core import ShapeError
from detector.diffusion_backbone import (
    ATT_KEYS,
    RES_KEYS,
    PromptEncoder,
    build_backbone,
    build_noise_schedule,
    forward_diffuse,
    multistep_timesteps,
)
from utils import seeded_rng


@pytest.fixture
def backbone(tiny_config):
    return build_backbone(tiny_config, SHAPES)


def test_zero_betas_keep_alpha_bar_at_one():
    schedule = build_noise_schedule(10, 0.0, 0.0, allow_degenerate=True)
    assert torch.equal(schedule.alpha_bars, torch.ones(10, dtype=torch.float64))


def test_zero_betas_need_the_degenerate_switch():
    with pytest.raises(ValueError):
        build_noise_schedule(10, 0.0, 0.0)


def test_constant_beta_running_product():
    schedule = build_noise_schedule(5, 0.1, 0.1)
    expected = 1.0
    for _ in range(3):
        expected *= 1.0 - 0.1
    assert schedule.alpha_bar(3) == pytest.approx(expected)
    assert schedule.alpha_bar(3) == pytest.approx(0.729)


def test_alpha_bar_strictly_decreasing():
    schedule = build_noise_schedule(1000, 1e-4, 0.02)
    assert bool((schedule.alpha_bars[1:] < schedule.alpha_bars[:-1]).all())


def test_alpha_bar_rejects_out_of_range_step():
    schedule = build_noise_schedule(10, 1e-4, 0.02)
    with pytest.raises(ValueError):
        schedule.alpha_bar(0)
    with pytest.raises(ValueError):
        schedule.alpha_bar(11)


def test_forward_diffuse_identity_without_noise_schedule():
    schedule = build_noise_schedule(4, 0.0, 0.0, allow_degenerate=True)
    x0 = torch.rand(2, 4, 8, 8)
    assert torch.equal(forward_diffuse(x0, 2, torch.randn(2, 4, 8, 8), schedule), x0)


def test_forward_diffuse_zero_noise_scales_input():
    schedule = build_noise_schedule(1000, 1e-4, 0.02)
    x0 = torch.rand(3, 5)
    out = forward_diffuse(x0, 100, torch.zeros(3, 5), schedule)
    assert torch.allclose(out, math.sqrt(schedule.alpha_bar(100)) * x0)


def test_forward_diffuse_variance_matches_closed_form():
    schedule = build_noise_schedule(1000, 1e-4, 0.02)
    noise = torch.randn(10_000, generator=seeded_rng(0, "mc"), dtype=torch.float64)
    out = forward_diffuse(torch.zeros(10_000, dtype=torch.float64), 300, noise, schedule)
    expected = 1.0 - schedule.alpha_bar(300)
    assert float(out.var()) == pytest.approx(expected, rel=0.05)


def test_forward_diffuse_shape_mismatch():
    schedule = build_noise_schedule(10, 1e-4, 0.02)
    with pytest.raises(ShapeError):
        forward_diffuse(torch.zeros(2, 3), 1, torch.zeros(3, 2), schedule)


def test_prompt_template_and_canonical_order():
    encoder = PromptEncoder(["car", "person", "bike"], text_dim=8, text_length=8, buckets=64, seed=0)
    a = encoder.encode_prompt(["car", "person"])
    b = encoder.encode_prompt(["person", "car", "car"])
    assert a.source_prompt == "a photo of car, person"
    assert torch.equal(a.tokens, b.tokens)
    assert torch.equal(a.pooled, b.pooled)


def test_empty_prompt_is_unconditional():
    encoder = PromptEncoder(["car"], text_dim=8, text_length=8, buckets=64, seed=0)
    empty = encoder.encode_prompt([])
    assert empty.source_prompt == ""
    assert torch.equal(empty.tokens, encoder.unconditional().tokens)
    assert not torch.equal(empty.tokens, encoder.encode_prompt(["car"]).tokens)


def test_unknown_class_name_rejected():
    encoder = PromptEncoder(["car"], text_dim=8, text_length=8, buckets=64, seed=0)
    with pytest.raises(ValueError, match="truck"):
        encoder.encode_prompt(["truck"])


def test_extract_features_group_counts_and_sizes(backbone):
    x = torch.rand(2, 3, 128, 128)
    raw = backbone.extract_features(x, 100, backbone.prompts.unconditional(), seeded_rng(0, "noise"))
    assert set(raw.res_groups) == set(RES_KEYS) and len(raw.res_groups) == 12
    assert set(raw.att_groups) == set(ATT_KEYS) and len(raw.att_groups) == 9
    widths = backbone.layer_widths()
    for (layer, _), tensor in raw.res_groups.items():
        side = 128 // (8 * 2 ** (layer - 1))
        assert tuple(tensor.shape) == (2, widths[layer - 1], side, side)
    for (layer, _), tensor in raw.att_groups.items():
        assert tensor.shape[-1] == 128 // (8 * 2 ** (layer - 1))


def test_extract_features_deterministic_under_fixed_noise(backbone):
    x = torch.rand(1, 3, 64, 64, generator=seeded_rng(1, "img"))
    cond = backbone.prompts.unconditional()
    first = backbone.extract_features(x, 100, cond, seeded_rng(5, "noise"))
    second = backbone.extract_features(x, 100, cond, seeded_rng(5, "noise"))
    for key in RES_KEYS:
        assert torch.equal(first.res_groups[key], second.res_groups[key])
    for key in ATT_KEYS:
        assert torch.equal(first.att_groups[key], second.att_groups[key])


def test_clean_latent_ignores_noise_stream(backbone):
    x = torch.rand(1, 3, 64, 64)
    cond = backbone.prompts.unconditional()
    a = backbone.extract_features(x, 100, cond, seeded_rng(1, "noise"), add_noise=False)
    b = backbone.extract_features(x, 100, cond, seeded_rng(2, "noise"), add_noise=False)
    assert torch.equal(a.res_groups[(1, 3)], b.res_groups[(1, 3)])


def test_one_denoiser_call_per_image(backbone):
    backbone.reset_counter()
    backbone.extract_features(torch.rand(3, 3, 64, 64), 100, backbone.prompts.unconditional(), seeded_rng(0, "n"))
    assert backbone.denoiser_calls == 3


def test_multistep_baseline_calls_denoiser_per_timestep(backbone):
    steps = multistep_timesteps(100, 4)
    assert steps == [100, 75, 50, 25]
    backbone.reset_counter()
    backbone.extract_features_multistep(
        torch.rand(2, 3, 64, 64), steps, backbone.prompts.unconditional(), seeded_rng(0, "n")
    )
    assert backbone.denoiser_calls == 8


def test_timestep_outside_schedule_rejected(backbone):
    with pytest.raises(ValueError):
        backbone.extract_features(torch.rand(1, 3, 64, 64), 0, backbone.prompts.unconditional(), seeded_rng(0, "n"))


def test_size_not_divisible_by_64_rejected(backbone):
    with pytest.raises(ShapeError):
        backbone.extract_features(torch.rand(1, 3, 96, 64), 100, backbone.prompts.unconditional(), seeded_rng(0, "n"))


def test_backbone_is_frozen(backbone):
    assert not any(p.requires_grad for p in backbone.parameters())
    backbone.train()
    assert not backbone.training


def test_forward_diffuse_is_linear_in_input_and_noise():
    schedule = build_noise_schedule(1000, 1e-4, 0.02)
    gen = seeded_rng(0, "linearity")
    x0, eps = torch.randn(1, 4, 8, 8, generator=gen), torch.randn(1, 4, 8, 8, generator=gen)
    scaled = forward_diffuse(2.5 * x0, 100, 2.5 * eps, schedule)
    assert torch.allclose(scaled, 2.5 * forward_diffuse(x0, 100, eps, schedule), atol=1e-5)


@pytest.mark.slow
def test_five_step_baseline_is_at_least_three_times_slower(backbone):
    x = torch.rand(2, 3, 256, 256, generator=seeded_rng(0, "img"))
    cond = backbone.prompts.unconditional()
    steps = multistep_timesteps(100, 5)

    def best_of(fn, repeats: int = 5) -> float:
        fn()
        times = []
        for _ in range(repeats):
            started = time.perf_counter()
            fn()
            times.append(time.perf_counter() - started)
        return min(times)

    single = best_of(lambda: backbone.extract_features(x, 100, cond, seeded_rng(0, "n")))
    multi = best_of(lambda: backbone.extract_features_multistep(x, steps, cond, seeded_rng(0, "n")))
    assert multi / single >= 3.0
