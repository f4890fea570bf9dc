"""
Tests for kforge.src.model
"""
import copy
import dataclasses

import numpy as np
import pytest
from box import Box
from hypothesis import given, settings
from hypothesis import strategies as st
from kforge.src.exceptions import ConfigValidationError, InvalidClassError, ShapeError
from kforge.src.graph import load_pyramid
from kforge.src.model import (
    ModelConfig,
    TruncationConfig,
    audit_batchnorm,
    block_schedule,
    build_model,
    criticize,
    estimate_center,
    frame_schedule,
    truncate,
    validate_model_config,
)
from kforge.src.tensor import RandomStreams, Tensor, grad_check, precision


def latents(config: ModelConfig, batch: int, seed: int = 0) -> Tensor:
    return RandomStreams(seed).normal("test.z", (batch, config.latent_dim))


def test_frame_schedule_ends_at_target():
    assert frame_schedule(64, 4) == [4, 8, 16, 32, 64]
    assert frame_schedule(10, 3) == [2, 3, 5, 10]


def test_ntu_block_schedule_upsamples_space_first():
    plans = block_schedule(ModelConfig(num_classes=60), load_pyramid("ntu25"))
    sizes = load_pyramid("ntu25").level_sizes
    resolutions = [(sizes[plans[0].level_in], plans[0].frames_in)] + [(sizes[p.level_out], p.frames_out) for p in plans]
    assert resolutions == [(1, 4), (5, 8), (11, 16), (25, 32), (25, 64)]
    assert [p.spatial for p in plans] == [True, True, True, False]
    assert plans[-1].out_channels == 3


def test_too_few_blocks_for_pyramid():
    with pytest.raises(ConfigValidationError):
        block_schedule(ModelConfig(num_classes=2, widths=(8, 8)), load_pyramid("ntu25"))


def test_generator_and_critic_shapes(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    discriminator = build_model("discriminator", tiny_config, seed=0)
    X = generator(latents(tiny_config, 2), [0, 2], noise_seed=1)
    assert X.shape == (2, 3, 8, 15)
    assert generator.output_shape == (3, 8, 15)
    assert criticize(discriminator, X, [0, 2]).shape == (2,)


def test_odd_frame_count(tiny_config):
    config = dataclasses.replace(tiny_config, frames=10)
    generator = build_model("generator", config, seed=0)
    assert generator(latents(config, 1), [1], noise_seed=0).shape == (1, 3, 10, 15)


def test_generator_rejects_bad_inputs(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    with pytest.raises(InvalidClassError):
        generator(latents(tiny_config, 1), [3], noise_seed=0)
    with pytest.raises(ShapeError):
        generator(latents(tiny_config, 2), [0], noise_seed=0)
    with pytest.raises(ShapeError):
        generator(Tensor(np.zeros((1, 5))), [0], noise_seed=0)
    with pytest.raises(ConfigValidationError):
        generator(latents(tiny_config, 1), [0])


def test_critic_rejects_wrong_skeleton(tiny_config):
    discriminator = build_model("discriminator", tiny_config, seed=0)
    with pytest.raises(ShapeError):
        discriminator(Tensor(np.zeros((1, 3, 8, 25))), [0])


def test_build_is_deterministic_per_seed(tiny_config):
    a = build_model("generator", tiny_config, seed=3).state_arrays()
    b = build_model("generator", tiny_config, seed=3).state_arrays()
    c = build_model("generator", tiny_config, seed=4).state_arrays()
    assert set(a) == set(b)
    for path in a:
        np.testing.assert_array_equal(a[path], b[path])
    assert any(not np.array_equal(a[path], c[path]) for path in a if a[path].any())


def test_same_noise_seed_same_sequence(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    generator.eval()
    z = latents(tiny_config, 2)
    np.testing.assert_array_equal(generator(z, [0, 1], noise_seed=5).data, generator(z, [0, 1], noise_seed=5).data)


def test_unknown_model_name(tiny_config):
    with pytest.raises(ConfigValidationError):
        build_model("transformer", tiny_config, seed=0)


def test_batchnorm_audit(tiny_config):
    config = dataclasses.replace(tiny_config, batchnorm="all")
    with pytest.raises(ConfigValidationError):
        build_model("generator", config, seed=0)
    generator = build_model("generator", config, seed=0, audit=False)
    # the final block never normalises
    assert len(audit_batchnorm(generator)) == 2
    compliant = build_model("generator", tiny_config, seed=0)
    discriminator = build_model("discriminator", tiny_config, seed=0)
    assert audit_batchnorm(compliant, discriminator) == []


def test_no_upsample_policy_skips_spatial_and_final_blocks(toy_config):
    config = dataclasses.replace(toy_config, batchnorm="no_upsample")
    generator = build_model("generator", config, seed=0)
    assert generator.blocks[0].norm is None
    assert generator.blocks[1].norm is None
    assert audit_batchnorm(generator) == []


def test_classifier_shapes(tiny_config):
    classifier = build_model("classifier", tiny_config, seed=0)
    X = Tensor(np.zeros((2, 3, 8, 15)))
    assert classifier(X).shape == (2, 3)
    assert classifier.features(X).shape == (2, classifier.feature_dim)


@pytest.mark.parametrize("seed", range(20))
def test_generator_gradients_match_finite_differences(toy_config, seed):
    with precision("float64"):
        generator = build_model("generator", toy_config, seed=seed)
        for block in generator.blocks:
            block.noise.weight.assign(np.full(block.noise.weight.shape, 0.3))
        z = latents(toy_config, 2, seed=seed + 100)
        target = np.random.default_rng(seed).standard_normal((2, 2, 4, 2))

        def fn():
            return (generator(z, [0, 1], noise_seed=seed) * target).sum()

        assert grad_check(fn, generator.parameters(), step=1e-7) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_critic_gradients_match_finite_differences(toy_config, seed):
    with precision("float64"):
        discriminator = build_model("discriminator", toy_config, seed=seed)
        X = Tensor(np.random.default_rng(seed).standard_normal((2, 2, 4, 2)), requires_grad=True)

        def fn():
            return criticize(discriminator, X, [1, 0]).sum()

        assert grad_check(fn, [X] + discriminator.parameters(), step=1e-7) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_generator_block_gradients_match_finite_differences(tiny_config, seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        generator = build_model("generator", tiny_config, seed=seed)
        block = generator.blocks[seed % len(generator.blocks)]
        block.noise.weight.assign(rng.standard_normal(block.noise.weight.shape))
        plan = block.plan
        size_in = generator.pyramid.levels[plan.level_in].size
        X = Tensor(rng.standard_normal((2, plan.in_channels, plan.frames_in, size_in)), requires_grad=True)
        size_out = generator.pyramid.levels[plan.level_out].size
        target = rng.standard_normal((2, plan.out_channels, plan.frames_out, size_out))
        noise = RandomStreams(seed)

        def fn():
            return (block(X, noise) * target).sum()

        assert grad_check(fn, [X] + block.parameters(), step=1e-7) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_discriminator_block_gradients_match_finite_differences(tiny_config, seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        discriminator = build_model("discriminator", tiny_config, seed=seed)
        block = discriminator.blocks[seed % len(discriminator.blocks)]
        size = discriminator.pyramid.levels[block.plan.level_out].size
        X = Tensor(rng.standard_normal((2, block.in_channels, block.plan.frames_out, size)), requires_grad=True)
        target = Tensor(rng.standard_normal(block(X).shape))

        def fn():
            return (block(X) * target).sum()

        assert grad_check(fn, [X] + block.parameters(), step=1e-7) < 1e-4


@pytest.mark.parametrize("batch", range(1, 9))
def test_output_shapes_for_every_batch_size(tiny_config, batch):
    generator = build_model("generator", tiny_config, seed=0)
    discriminator = build_model("discriminator", tiny_config, seed=0)
    labels = np.arange(batch) % tiny_config.num_classes
    X = generator(latents(tiny_config, batch, seed=batch), labels, noise_seed=batch)
    assert X.shape == (batch, 3, 8, 15)
    assert criticize(discriminator, X, labels).shape == (batch,)


@pytest.mark.parametrize("seed", range(5))
def test_critic_is_equivariant_to_batch_permutation(tiny_config, seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        discriminator = build_model("discriminator", tiny_config, seed=seed)
        X = rng.standard_normal((6, 3, 8, 15))
        labels = rng.integers(0, tiny_config.num_classes, 6)
        order = rng.permutation(6)
        scores = criticize(discriminator, Tensor(X), labels).data
        permuted = criticize(discriminator, Tensor(X[order]), labels[order]).data
    np.testing.assert_allclose(permuted, scores[order], rtol=1e-10, atol=1e-12)


def test_truncation_contract(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    center = estimate_center(generator, seed=0, samples=50)
    assert center.shape == (tiny_config.w_dim,)
    np.testing.assert_array_equal(center, estimate_center(generator, seed=0, samples=50))
    w = generator.map_latent(latents(tiny_config, 4), [0, 1, 2, 0])
    assert truncate(w, TruncationConfig(psi=1.0, center=center)) is w
    np.testing.assert_allclose(truncate(w, TruncationConfig(psi=0.0, center=center)).data, np.tile(center, (4, 1)), atol=1e-6)
    with pytest.raises(ConfigValidationError):
        TruncationConfig(psi=1.5)
    with pytest.raises(ConfigValidationError):
        truncate(w, TruncationConfig(psi=0.5))


def test_class_center_differs_from_global(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    assert not np.allclose(estimate_center(generator, 0, label=1, samples=20), estimate_center(generator, 0, samples=20))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0, allow_nan=False))
def test_truncation_scales_distance_to_center(psi):
    rng = np.random.default_rng(0)
    with precision("float64"):
        w = Tensor(rng.standard_normal((3, 5)))
        center = rng.standard_normal(5)
        out = truncate(w, TruncationConfig(psi=psi, center=center)).data
    np.testing.assert_allclose(out - center, psi * (w.data - center), atol=1e-12)


def test_model_config_validation():
    base = {
        "model": {
            "num_classes": 3,
            "pyramid": "h36m15",
            "channels": 3,
            "frames": 8,
            "widths": [6, 5, 4],
            "kernel_size": 3,
        }
    }
    validate_model_config(Box(base))
    for key, value in [
        ("pyramid", "nope"),
        ("channels", 4),
        ("kernel_size", 4),
        ("widths", [6, 5]),
        ("batchnorm", "sometimes"),
        ("frames", 0),
    ]:
        broken = Box(copy.deepcopy(base))
        broken.model[key] = value
        with pytest.raises(ConfigValidationError):
            validate_model_config(broken)
    broken = Box(copy.deepcopy(base))
    del broken.model["widths"]
    with pytest.raises(ConfigValidationError):
        validate_model_config(broken)
