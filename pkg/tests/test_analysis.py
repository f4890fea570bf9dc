"""
Tests for sampling and generator studies in kforge.src.analysis
"""
import numpy as np
import pytest
from box import Box
from kforge.src import analysis
from kforge.src.analysis import (
    conditioning_accuracy,
    generate_sequences,
    latents,
    silenced_noise,
    stochastic_variation,
    truncation_trend,
    validate_generate_config,
)
from kforge.src.exceptions import ConfigValidationError, InvalidClassError
from kforge.src.model import build_model, estimate_center
from kforge.src.tensor import Tensor, no_grad


@pytest.fixture
def noisy_generator(tiny_config):
    generator = build_model("generator", tiny_config, seed=0)
    for block in generator.blocks:
        block.noise.weight.assign(np.full(block.noise.weight.shape, 0.5))
    return generator


def test_psi_one_matches_untruncated_generation(noisy_generator):
    labels = [0, 1, 2, 1]
    X = generate_sequences(noisy_generator, labels, seed=3, psi=1.0, noise_seed=9)
    z = latents(noisy_generator, len(labels), seed=3)
    with no_grad():
        w = noisy_generator.map_latent(z, labels).data
        expected = np.concatenate([noisy_generator.synthesize(Tensor(w[i : i + 1]), 9).data for i in range(len(labels))])
    np.testing.assert_array_equal(X, expected)
    assert X.shape == (4, 3, 8, 15)


def test_psi_zero_collapses_each_class(noisy_generator):
    centers = {c: estimate_center(noisy_generator, 0, c, samples=20) for c in (0, 2)}
    X = generate_sequences(noisy_generator, [0, 0, 0, 2, 2], seed=1, psi=0.0, noise_seed=4, centers=centers)
    for i in (1, 2):
        np.testing.assert_array_equal(X[i], X[0])
    np.testing.assert_array_equal(X[4], X[3])
    assert not np.array_equal(X[0], X[3])


def test_center_samples_set_the_estimated_center(noisy_generator):
    coarse = generate_sequences(noisy_generator, [1, 1], seed=2, psi=0.0, noise_seed=4, center_samples=5)
    fine = generate_sequences(noisy_generator, [1, 1], seed=2, psi=0.0, noise_seed=4, center_samples=50)
    assert not np.allclose(coarse, fine)
    center = estimate_center(noisy_generator, 2, 1, samples=5)
    expected = generate_sequences(noisy_generator, [1, 1], seed=2, psi=0.0, noise_seed=4, centers={1: center})
    np.testing.assert_array_equal(coarse, expected)


def test_truncation_trend_forwards_center_samples(noisy_generator, monkeypatch):
    seen = []

    def recording_center(generator, seed, label=None, samples=1000):
        seen.append(samples)
        return estimate_center(generator, seed, label, samples)

    monkeypatch.setattr(analysis, "estimate_center", recording_center)
    truncation_trend(noisy_generator, seed=0, label=0, psis=(1.0, 0.0), num_latents=3, center_samples=7)
    assert seen == [7]


def test_unshared_noise_varies_per_row(noisy_generator):
    centers = {0: estimate_center(noisy_generator, 0, 0, samples=20)}
    X = generate_sequences(noisy_generator, [0, 0], seed=1, psi=0.0, noise_seed=4, centers=centers, shared_noise=False)
    assert not np.array_equal(X[0], X[1])


def test_generation_rejects_unknown_class(noisy_generator):
    with pytest.raises(InvalidClassError):
        generate_sequences(noisy_generator, [0, 3], seed=0)


def test_zero_noise_removes_stochastic_variation(noisy_generator):
    spread = stochastic_variation(noisy_generator, label=1, seed=2, realizations=5)
    assert spread.shape == (15,)
    assert np.all(spread > 0)
    silent = stochastic_variation(noisy_generator, label=1, seed=2, realizations=5, zero_noise=True)
    np.testing.assert_array_equal(silent, 0.0)
    np.testing.assert_array_equal(noisy_generator.blocks[0].noise.weight.data, 0.5)
    with pytest.raises(ConfigValidationError):
        stochastic_variation(noisy_generator, label=1, seed=2, realizations=1)


def test_silenced_noise_restores_weights_on_error(noisy_generator):
    with pytest.raises(RuntimeError):
        with silenced_noise(noisy_generator):
            assert not noisy_generator.blocks[1].noise.weight.data.any()
            raise RuntimeError("interrupted")
    np.testing.assert_array_equal(noisy_generator.blocks[1].noise.weight.data, 0.5)


def test_truncation_trend_reaches_zero_variance(noisy_generator):
    trend = truncation_trend(noisy_generator, seed=0, label=2, psis=(1.0, 0.5, 0.0), num_latents=6, center_samples=20)
    assert trend.psis == [1.0, 0.5, 0.0]
    assert trend.variances[0] > 0.0
    assert trend.variances[-1] == 0.0
    assert set(trend.to_dict()) == {"psis", "variances", "spearman", "non_increasing"}


def test_conditioning_accuracy_is_a_share(noisy_generator):
    bands = ((0.5, 0.9), (1.5, 1.9), (2.5, 2.9))
    accuracy = conditioning_accuracy(noisy_generator, bands, seed=0, per_class=2)
    assert 0.0 <= accuracy <= 1.0
    with pytest.raises(ConfigValidationError):
        conditioning_accuracy(noisy_generator, bands[:2], seed=0)


def test_generate_config_validation():
    validate_generate_config(Box({}))
    validate_generate_config(Box({"generate": {"psi": 0.7, "count": 10}}))
    for section in [{"psi": 1.2}, {"count": 0}, {"temperature": 1.0}]:
        with pytest.raises(ConfigValidationError):
            validate_generate_config(Box({"generate": section}))
