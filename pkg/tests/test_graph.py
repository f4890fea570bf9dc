"""
Tests for skeleton graphs and pyramids in kforge.src.graph
"""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from kforge.src.exceptions import GraphDefinitionError, ShapeError
from kforge.src.graph import (
    SkeletonSpec,
    build_pyramid,
    load_pyramid,
    load_pyramid_table,
    partition_and_normalize,
    skeleton_from_table,
    spatial_downsample,
    spatial_upsample,
    temporal_resample,
)
from kforge.src.tensor import Tensor, grad_check, precision


def chain(n: int, center: int = 0) -> SkeletonSpec:
    return SkeletonSpec(
        name=f"chain{n}",
        joint_names=tuple(f"j{i}" for i in range(n)),
        edges=tuple((i, i + 1) for i in range(n - 1)),
        center=center,
        root=center,
    )


@pytest.fixture
def chain3_table(tmp_path):
    table = {
        "skeleton_name": "chain3",
        "level_sizes": [2, 3],
        "joint_names": ["a", "b", "c"],
        "edges": [[[0, 1]], [[0, 1], [1, 2]]],
        "up_maps": [None, {"1": [0, 1]}],
        "keep_lists": [None, [0, 2]],
        "center_joint": 0,
        "root_joint": 0,
    }
    path = tmp_path / "chain3.json"
    path.write_text(json.dumps(table))
    return path


def brute_force_normalize(raw: np.ndarray) -> np.ndarray:
    out = np.zeros_like(raw)
    for p in range(raw.shape[0]):
        degrees = raw[p].sum(axis=1)
        for i in range(raw.shape[1]):
            for j in range(raw.shape[2]):
                di = degrees[i] if degrees[i] > 1e-12 else 1.0
                dj = degrees[j] if degrees[j] > 1e-12 else 1.0
                out[p, i, j] = raw[p, i, j] / np.sqrt(di * dj)
    return out


def test_two_joint_root_partition_is_identity():
    adjacency = partition_and_normalize(chain(2))
    np.testing.assert_array_equal(adjacency.normalized[0], np.eye(2))


def test_three_joint_chain_centripetal_entries():
    adjacency = partition_and_normalize(chain(3))
    expected = np.zeros((3, 3))
    expected[1, 0] = expected[2, 1] = 1.0
    np.testing.assert_array_equal(adjacency.raw[1], expected)
    np.testing.assert_allclose(adjacency.normalized[1], expected)
    centrifugal = np.zeros((3, 3))
    centrifugal[0, 1] = centrifugal[1, 2] = 1.0
    np.testing.assert_array_equal(adjacency.raw[2], centrifugal)


@pytest.mark.parametrize("name", ["ntu25", "h36m15", "toy2"])
def test_partitions_complete_and_normalized_on_every_level(name):
    for level in load_pyramid(name).levels:
        adjacency = level.adjacency
        A = level.spec.adjacency()
        np.testing.assert_array_equal(adjacency.raw.sum(axis=0), A + np.eye(level.size))
        np.testing.assert_allclose(adjacency.normalized, brute_force_normalize(adjacency.raw), atol=1e-12, rtol=0)
        assert adjacency.normalized.min() >= 0.0 and adjacency.normalized.max() <= 1.0


def test_bundled_level_sizes():
    assert load_pyramid("ntu25").level_sizes == (1, 5, 11, 25)
    assert load_pyramid("h36m15").level_sizes == (1, 2, 7, 15)
    assert load_pyramid("ntu25").finest.spec.num_joints == 25


def test_trivial_pyramid():
    spec = SkeletonSpec(name="dot", joint_names=("only",), edges=(), center=0, root=0)
    pyramid = build_pyramid(spec, [1])
    assert pyramid.level_sizes == (1,)
    np.testing.assert_array_equal(pyramid.levels[0].adjacency.raw.sum(axis=0), np.eye(1))


def test_invalid_skeletons_rejected():
    with pytest.raises(GraphDefinitionError):
        SkeletonSpec(name="split", joint_names=("a", "b", "c"), edges=((0, 1),), center=0, root=0)
    with pytest.raises(GraphDefinitionError):
        SkeletonSpec(name="loop", joint_names=("a", "b"), edges=((0, 0), (0, 1)), center=0, root=0)
    with pytest.raises(GraphDefinitionError):
        SkeletonSpec(name="far", joint_names=("a", "b"), edges=((0, 2),), center=0, root=0)
    with pytest.raises(GraphDefinitionError):
        build_pyramid(chain(3), [2, 2, 3])
    with pytest.raises(GraphDefinitionError):
        load_pyramid_table("does_not_exist")


def test_up_map_must_cover_introduced_vertices(chain3_table, tmp_path):
    table = json.loads(chain3_table.read_text())
    table["up_maps"][1] = {}
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps(table))
    parsed = load_pyramid_table(broken)
    with pytest.raises(GraphDefinitionError):
        build_pyramid(skeleton_from_table(parsed), parsed.level_sizes, parsed)


def test_upsample_averages_sources(chain3_table):
    pyramid = load_pyramid(str(chain3_table))
    X = np.array([[[1.0, 3.0]]])
    np.testing.assert_array_equal(spatial_upsample(X, pyramid, 0), [[[1.0, 2.0, 3.0]]])


def test_upsample_matches_up_map_table():
    pyramid = load_pyramid("ntu25")
    rng = np.random.default_rng(1)
    for l in range(len(pyramid) - 1):
        X = rng.standard_normal((2, 3, 4, pyramid.levels[l].size))
        Y = spatial_upsample(X, pyramid, l)
        finer = pyramid.levels[l + 1]
        for i, k in enumerate(finer.keep_list):
            np.testing.assert_array_equal(Y[..., k], X[..., i])
        for k, sources in finer.up_map.items():
            np.testing.assert_allclose(Y[..., k], np.mean([X[..., s] for s in sources], axis=0), atol=1e-12)


def test_constant_input_stays_constant_after_upsampling():
    pyramid = load_pyramid("h36m15")
    X = np.full((3, 5, 2), 0.7)
    np.testing.assert_allclose(spatial_upsample(X, pyramid, 1), 0.7, atol=1e-15)


@pytest.mark.parametrize("name", ["ntu25", "h36m15"])
def test_down_after_up_restores_input(name):
    pyramid = load_pyramid(name)
    rng = np.random.default_rng(0)
    for l in range(len(pyramid) - 1):
        X = rng.standard_normal((2, 3, 6, pyramid.levels[l].size))
        np.testing.assert_array_equal(spatial_downsample(spatial_upsample(X, pyramid, l), pyramid, l + 1), X)


def test_downsample_selects_keep_list():
    pyramid = load_pyramid("ntu25")
    X = np.random.default_rng(2).standard_normal((3, 4, 25))
    Y = spatial_downsample(X, pyramid, 3)
    assert Y.shape[-1] == 11
    for i, k in enumerate(pyramid.levels[3].keep_list):
        np.testing.assert_array_equal(Y[..., i], X[..., k])


def test_resampling_level_and_shape_errors():
    pyramid = load_pyramid("ntu25")
    with pytest.raises(ShapeError):
        spatial_downsample(np.zeros((1, 2, 1)), pyramid, 0)
    with pytest.raises(ShapeError):
        spatial_upsample(np.zeros((1, 2, 7)), pyramid, 1)
    with pytest.raises(ShapeError):
        temporal_resample(np.zeros((1, 4, 3)), 0)


def test_temporal_resample_endpoints_and_grid():
    X = np.array([[[0.0], [2.0]]])
    Y = temporal_resample(X, 4)
    np.testing.assert_allclose(Y[0, :, 0], [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0], atol=1e-15)
    assert temporal_resample(X, 2) is X


def test_constant_sequence_stays_constant():
    X = np.full((3, 64, 5), -1.25)
    np.testing.assert_allclose(temporal_resample(X, 50), -1.25, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=1, max_value=12),
    st.floats(-5, 5, allow_nan=False),
    st.floats(-5, 5, allow_nan=False),
)
def test_temporal_resample_is_linear(frames, new_frames, a, b):
    rng = np.random.default_rng(frames * 31 + new_frames)
    X, Y = rng.standard_normal((2, frames, 3)), rng.standard_normal((2, frames, 3))
    lhs = temporal_resample(a * X + b * Y, new_frames)
    rhs = a * temporal_resample(X, new_frames) + b * temporal_resample(Y, new_frames)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_resampling_gradients_on_tensors():
    pyramid = load_pyramid("h36m15")
    rng = np.random.default_rng(4)
    with precision("float64"):
        X = Tensor(rng.standard_normal((1, 2, 3, 7)), requires_grad=True)
        W = rng.standard_normal((1, 2, 5, 15))

        def fn():
            return (temporal_resample(spatial_upsample(X, pyramid, 2), 5) * W).sum()

        assert grad_check(fn, [X]) < 1e-6
