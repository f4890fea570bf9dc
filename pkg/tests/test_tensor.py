"""
Tests for the autodiff module in kforge.src.tensor
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from kforge.src.exceptions import GradientError, NonFiniteError, ShapeError
from kforge.src.tensor import (
    RandomStreams,
    Tensor,
    concat,
    einsum,
    exp,
    expand,
    get_default_dtype,
    grad,
    grad_check,
    leaky_relu,
    log,
    log_softmax,
    no_grad,
    precision,
    sqrt,
    take,
)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.sign(values) * (0.1 + np.abs(values))


def test_default_precision_switch():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


def test_grad_of_sum_of_squares():
    with precision("float64"):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        (g,) = grad((x * x).sum(), [x])
    np.testing.assert_allclose(g.data, [2.0, -4.0, 6.0])


def test_broadcast_gradients_keep_input_shapes():
    with precision("float64"):
        a = Tensor(np.ones((3, 1)), requires_grad=True)
        b = Tensor(np.arange(4.0).reshape(1, 4), requires_grad=True)
        ga, gb = grad((a * b).sum(), [a, b])
    assert ga.shape == (3, 1) and gb.shape == (1, 4)
    np.testing.assert_allclose(ga.data, np.full((3, 1), 6.0))
    np.testing.assert_allclose(gb.data, np.full((1, 4), 3.0))


def test_second_order_gradient():
    with precision("float64"):
        x = Tensor([0.5, 2.0], requires_grad=True)
        (g,) = grad((x**3).sum(), [x], create_graph=True)
        np.testing.assert_allclose(g.data, 3 * np.array([0.5, 2.0]) ** 2)
        (gg,) = grad(g.sum(), [x])
    np.testing.assert_allclose(gg.data, 6 * np.array([0.5, 2.0]))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_of_gradient_norm_matches_analytic(seed):
    values = _away_from_zero(np.random.default_rng(seed), 8)
    with precision("float64"):
        x = Tensor(values, requires_grad=True)
        (g,) = grad((x**3).sum(), [x], create_graph=True)
        norm = sqrt((g * g).sum())
        (gg,) = grad(norm, [x])
    expected = 18 * values**3 / np.linalg.norm(3 * values**2)
    np.testing.assert_allclose(gg.data, expected, rtol=1e-6, atol=1e-6)


def test_gradient_penalty_shape_second_order_matches_fd():
    # d/dw of (||d/dx (w·x)^2||^2), differentiated twice through the graph
    rng = np.random.default_rng(3)
    with precision("float64"):
        w = Tensor(rng.standard_normal(4), requires_grad=True)
        x = Tensor(rng.standard_normal(4), requires_grad=True)

        def penalty() -> Tensor:
            score = einsum("i,i->", w, x) ** 2
            (gx,) = grad(score, [x], create_graph=True)
            return (gx * gx).sum()

        assert grad_check(penalty, [w]) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_composite_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    with precision("float64"):
        a = Tensor(_away_from_zero(rng, (2, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        c = Tensor(np.abs(rng.standard_normal((2, 4))) + 0.5, requires_grad=True)

        def fn() -> Tensor:
            h = einsum("ij,jk->ik", leaky_relu(a, 0.2), b)
            h = concat([h, sqrt(c)], axis=1)
            h = take(h, np.array([[0, 2], [5, 7]]), axis=1)
            return (log_softmax(h.reshape(2, 4), axis=1) * exp(-c)).sum() + log(c).mean() / c.sum()

        assert grad_check(fn, [a, b, c]) < 1e-4


def test_expand_and_transpose_gradients():
    rng = np.random.default_rng(0)
    with precision("float64"):
        a = Tensor(rng.standard_normal((1, 3)), requires_grad=True)

        def fn() -> Tensor:
            return (expand(a, (4, 3)).transpose(1, 0) ** 2).sum()

        assert grad_check(fn, [a]) < 1e-6


def test_non_scalar_output_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError):
        grad(x * 2.0, [x])


def test_unused_input_raises_unless_allowed():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    with pytest.raises(GradientError):
        grad((x * 3.0).sum(), [y])
    (g,) = grad((x * 3.0).sum(), [y], allow_unused=True)
    np.testing.assert_array_equal(g.data, [0.0])


def test_non_finite_gradient_names_op_path():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError) as e_info:
            grad(log(x).sum(), [x])
    assert "log" in str(e_info.value)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.op == "leaf"


def test_einsum_needs_explicit_output():
    with pytest.raises(ShapeError):
        einsum("ij,jk", Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))


def test_take_rejects_out_of_range_index():
    with pytest.raises(ShapeError):
        take(Tensor(np.ones(3)), np.array([3]), axis=0)


def test_random_streams_are_keyed_by_name_and_counter():
    streams = RandomStreams(7)
    a = streams.normal("noise", (3, 2), counter=4).data
    np.testing.assert_array_equal(a, RandomStreams(7).normal("noise", (3, 2), counter=4).data)
    assert not np.array_equal(a, streams.normal("noise", (3, 2), counter=5).data)
    assert not np.array_equal(a, streams.normal("other", (3, 2), counter=4).data)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6),
    st.floats(-3, 3, allow_nan=False),
)
def test_gradient_is_linear_in_output_scale(values, scale):
    with precision("float64"):
        x = Tensor(np.array(values), requires_grad=True)
        (g1,) = grad((x * x).sum(), [x])
        (g2,) = grad(((x * x) * scale).sum(), [x])
    np.testing.assert_allclose(g2.data, scale * g1.data, atol=1e-9)
