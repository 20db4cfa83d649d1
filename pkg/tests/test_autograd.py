import itertools
from collections.abc import Mapping

import numpy as np
import pytest

from nerveseg.autograd import (
    Graph,
    Variable,
    backward,
    bce_loss,
    bilinear_upsample2d,
    concat_channels,
    conv2d,
    finite_diff_check,
    finite_diff_sweep,
    maxpool2d,
    prelu,
    residual_add,
    scale,
    sigmoid,
    transposed_conv2d,
    weighted_sum,
)
from nerveseg.exceptions import DomainError, ShapeError
from nerveseg.tensor import make_rng


def total(graph: Graph, x: Variable) -> Variable:
    return weighted_sum(x, graph.constant(np.ones(x.shape)))


def naive_conv(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int, dilation: int
) -> np.ndarray:
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w))
    for i, o, r, c in itertools.product(range(n), range(c_out), range(out_h), range(out_w)):
        acc = b[o]
        for ci, u, v in itertools.product(range(c_in), range(k), range(k)):
            acc += w[o, ci, u, v] * xp[i, ci, r * stride + u * dilation, c * stride + v * dilation]
        out[i, o, r, c] = acc
    return out


def test_conv_all_ones() -> None:
    g = Graph()
    out = conv2d(
        g.constant(np.ones((1, 1, 3, 3))),
        g.constant(np.ones((1, 1, 3, 3))),
        g.constant(np.zeros(1)),
        padding=1,
    )
    np.testing.assert_array_equal(out.value[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_delta_kernel_is_identity() -> None:
    x = make_rng(0).standard_normal((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    g = Graph()
    out = conv2d(g.constant(x), g.constant(w), g.constant(np.zeros(1)), padding=1)
    np.testing.assert_allclose(out.value, x, atol=1e-6)


def test_dilated_conv_of_delta() -> None:
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1
    g = Graph()
    out = conv2d(
        g.constant(x),
        g.constant(np.ones((1, 1, 3, 3))),
        g.constant(np.zeros(1)),
        padding=2,
        dilation=2,
    )
    expected = np.zeros((5, 5))
    expected[np.ix_([0, 2, 4], [0, 2, 4])] = 1
    np.testing.assert_array_equal(out.value[0, 0], expected)


def test_conv_matches_direct_summation() -> None:
    rng = make_rng(42)
    checked = 0
    while checked < 50:
        n, c_in, c_out = (int(v) for v in rng.integers(1, 4, size=3))
        n = min(n, 2)
        h, w = (int(v) for v in rng.integers(3, 10, size=2))
        dilation = int(rng.choice([1, 2, 4]))
        padding = int(rng.choice([0, 1, 2]))
        stride = int(rng.choice([1, 2]))
        span = 2 * dilation + 1
        if h + 2 * padding < span or w + 2 * padding < span:
            continue
        x = rng.standard_normal((n, c_in, h, w))
        weight = rng.standard_normal((c_out, c_in, 3, 3))
        bias = rng.standard_normal(c_out)
        g = Graph(dtype=np.float64)
        out = conv2d(
            g.constant(x), g.constant(weight), g.constant(bias), stride, padding, dilation
        )
        expected = naive_conv(x, weight, bias, stride, padding, dilation)
        np.testing.assert_allclose(out.value, expected, atol=1e-5)
        checked += 1


@pytest.mark.parametrize("alpha", [-1.5, 0.0, 2.5])
def test_conv_without_bias_is_homogeneous(alpha: float) -> None:
    rng = make_rng(8)
    x = rng.standard_normal((2, 3, 7, 7))
    weight = rng.standard_normal((4, 3, 3, 3))
    g = Graph(dtype=np.float64)
    zero = g.constant(np.zeros(4))
    out = conv2d(g.constant(x), g.constant(weight), zero, padding=2, dilation=2)
    scaled = conv2d(g.constant(alpha * x), g.constant(weight), zero, padding=2, dilation=2)
    np.testing.assert_allclose(scaled.value, alpha * out.value, atol=1e-12)


def test_conv_channel_mismatch() -> None:
    g = Graph()
    with pytest.raises(ShapeError):
        conv2d(
            g.constant(np.ones((1, 2, 4, 4))),
            g.constant(np.ones((1, 3, 3, 3))),
            g.constant(np.zeros(1)),
        )


def test_conv_bad_stride() -> None:
    g = Graph()
    with pytest.raises(DomainError):
        conv2d(
            g.constant(np.ones((1, 1, 4, 4))),
            g.constant(np.ones((1, 1, 3, 3))),
            g.constant(np.zeros(1)),
            stride=0,
        )


def test_conv_output_too_small() -> None:
    g = Graph()
    with pytest.raises(ShapeError):
        conv2d(
            g.constant(np.ones((1, 1, 4, 4))),
            g.constant(np.ones((1, 1, 3, 3))),
            g.constant(np.zeros(1)),
            dilation=4,
        )


def test_transposed_conv_single_pixel_stamp() -> None:
    g = Graph()
    kernel = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out = transposed_conv2d(
        g.constant(np.ones((1, 1, 1, 1))), g.constant(kernel), g.constant(np.zeros(1))
    )
    np.testing.assert_array_equal(out.value[0, 0], [[1, 2], [3, 4]])


def test_transposed_conv_tiles_do_not_overlap() -> None:
    g = Graph()
    out = transposed_conv2d(
        g.constant(np.ones((1, 1, 2, 2))),
        g.constant(np.ones((1, 1, 2, 2))),
        g.constant(np.zeros(1)),
    )
    np.testing.assert_array_equal(out.value, np.ones((1, 1, 4, 4)))


def test_transposed_conv_matches_scatter_add() -> None:
    rng = make_rng(5)
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((2, 1, 2, 2))
    expected = np.zeros((1, 1, 6, 6))
    for c, i, j, u, v in itertools.product(range(2), range(3), range(3), range(2), range(2)):
        expected[0, 0, 2 * i + u, 2 * j + v] += x[0, c, i, j] * w[c, 0, u, v]
    g = Graph(dtype=np.float64)
    out = transposed_conv2d(g.constant(x), g.constant(w), g.constant(np.zeros(1)))
    np.testing.assert_allclose(out.value, expected, atol=1e-5)


def test_transposed_conv_input_gradient_is_strided_conv() -> None:
    rng = make_rng(6)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, 2, 2))
    upstream = rng.standard_normal((2, 2, 8, 8))
    g = Graph(dtype=np.float64)
    out = transposed_conv2d(g.parameter(x, "x"), g.constant(w), g.constant(rng.standard_normal(2)))
    grads = backward(g, weighted_sum(out, g.constant(upstream)))

    h = Graph(dtype=np.float64)
    expected = conv2d(h.constant(upstream), h.constant(w), h.constant(np.zeros(3)), stride=2)
    np.testing.assert_allclose(grads["x"], expected.value, atol=1e-12)


def test_maxpool_values() -> None:
    g = Graph()
    small = maxpool2d(g.constant(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)))
    assert small.value.reshape(()) == 4
    ramp = maxpool2d(g.constant(np.arange(1.0, 17).reshape(1, 1, 4, 4)))
    np.testing.assert_array_equal(ramp.value[0, 0], [[6, 8], [14, 16]])


def test_maxpool_tie_routes_to_first_element() -> None:
    g = Graph()
    x = g.parameter(np.ones((1, 1, 4, 4)), "x")
    grads = backward(g, total(g, maxpool2d(x)))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(grads["x"][0, 0], expected)


def test_maxpool_odd_extent() -> None:
    g = Graph()
    with pytest.raises(ShapeError):
        maxpool2d(g.constant(np.ones((1, 1, 3, 4))))


def test_prelu_values() -> None:
    g = Graph()
    x = g.constant(np.array([3.0, -2.0]).reshape(1, 2, 1, 1))
    out = prelu(x, g.constant(np.array([0.7, 0.25])))
    np.testing.assert_allclose(out.value.ravel(), [3.0, -0.5])


def test_prelu_slope_gradient() -> None:
    values = -make_rng(2).uniform(0.5, 2.0, size=(2, 1, 3, 3))
    g = Graph(dtype=np.float64)
    out = prelu(g.constant(values), g.parameter(np.array([0.25]), "a"))
    grads = backward(g, total(g, out))
    np.testing.assert_allclose(grads["a"], [values.sum()], rtol=1e-6)


def test_prelu_slope_dims() -> None:
    g = Graph()
    with pytest.raises(ShapeError):
        prelu(g.constant(np.ones((1, 2, 1, 1))), g.constant(np.ones(3)))


def test_sigmoid_values() -> None:
    g = Graph()
    out = sigmoid(g.constant(np.array([0.0, 40.0, 1.0]).reshape(1, 3, 1, 1))).value.ravel()
    assert out[0] == 0.5
    assert abs(out[1] - 1.0) < 1e-6
    assert out[2] == pytest.approx(0.731059, abs=1e-6)


def test_bilinear_constant() -> None:
    g = Graph()
    out = bilinear_upsample2d(g.constant(np.full((1, 2, 3, 4), 2.5)))
    assert out.shape == (1, 2, 6, 8)
    np.testing.assert_allclose(out.value, 2.5, rtol=1e-6)


def test_bilinear_single_value() -> None:
    g = Graph()
    out = bilinear_upsample2d(g.constant(np.full((1, 1, 1, 1), 7.0)))
    np.testing.assert_allclose(out.value, np.full((1, 1, 2, 2), 7.0))


def test_bilinear_half_pixel_row() -> None:
    g = Graph()
    out = bilinear_upsample2d(g.constant(np.array([0.0, 1.0]).reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(out.value[0, 0, 0], [0, 0.25, 0.75, 1])


def test_concat_placement_and_gradient() -> None:
    g = Graph()
    a = g.parameter(np.full((1, 1, 2, 2), 2.0), "a")
    b = g.parameter(np.full((1, 1, 2, 2), 3.0), "b")
    out = concat_channels(a, b)
    assert np.all(out.value[:, 0] == 2) and np.all(out.value[:, 1] == 3)
    np.testing.assert_array_equal(out.value[:, :1], a.value)
    np.testing.assert_array_equal(out.value[:, 1:], b.value)
    grads = backward(g, total(g, out))
    np.testing.assert_array_equal(grads["a"], np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(grads["b"], np.ones((1, 1, 2, 2)))


def test_concat_extent_mismatch() -> None:
    g = Graph()
    with pytest.raises(ShapeError):
        concat_channels(g.constant(np.ones((1, 1, 2, 2))), g.constant(np.ones((1, 1, 2, 3))))


def test_residual_add() -> None:
    g = Graph()
    a = g.parameter(np.array([1.0, 2.0]).reshape(1, 2, 1, 1), "a")
    b = g.parameter(np.array([3.0, 4.0]).reshape(1, 2, 1, 1), "b")
    out = residual_add(a, b)
    np.testing.assert_array_equal(out.value.ravel(), [4, 6])
    upstream = np.array([0.5, -1.5]).reshape(1, 2, 1, 1)
    grads = backward(g, weighted_sum(out, g.constant(upstream)))
    np.testing.assert_array_equal(grads["a"], upstream)
    np.testing.assert_array_equal(grads["b"], upstream)

    zero = residual_add(a, g.constant(np.zeros((1, 2, 1, 1))))
    np.testing.assert_array_equal(zero.value, a.value)


def test_bce_confident_correct() -> None:
    g = Graph()
    loss = bce_loss(g.constant(np.full((1, 1, 1, 1), 40.0)), g.constant(np.ones((1, 1, 1, 1))))
    assert loss.value.reshape(()) < 1e-6


def test_bce_at_zero_logit() -> None:
    g = Graph()
    loss = bce_loss(g.constant(np.zeros((1, 1, 1, 1))), g.constant(np.ones((1, 1, 1, 1))))
    assert float(loss.value.reshape(())) == pytest.approx(0.693147, abs=1e-6)


def test_bce_gradient_at_zero_logits() -> None:
    target = np.array([0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 3)
    g = Graph()
    z = g.parameter(np.zeros((1, 1, 2, 3)), "z")
    grads = backward(g, bce_loss(z, g.constant(target)))
    np.testing.assert_allclose(grads["z"], (0.5 - target) / target.size, rtol=1e-6)


def test_bce_does_not_overflow() -> None:
    g = Graph()
    logits = g.constant(np.array([-1000.0, 1000.0]).reshape(1, 1, 1, 2))
    loss = bce_loss(logits, g.constant(np.array([1.0, 0.0]).reshape(1, 1, 1, 2)))
    assert np.isfinite(loss.value).all()


def test_bce_rejects_non_binary_target() -> None:
    g = Graph()
    with pytest.raises(DomainError):
        bce_loss(g.constant(np.zeros((1, 1, 2, 2))), g.constant(np.full((1, 1, 2, 2), 0.5)))


def test_backward_seed() -> None:
    g = Graph()
    p = g.parameter(np.full((1, 1, 1, 1), 3.0), "p")
    assert backward(g, p)["p"].reshape(()) == 1


def test_backward_accumulates_fan_out() -> None:
    g = Graph()
    p = g.parameter(np.full((1, 1, 1, 1), 3.0), "p")
    grads = backward(g, residual_add(p, p))
    assert grads["p"].reshape(()) == 2
    assert p.grad.reshape(()) == 2


def test_backward_needs_scalar_loss() -> None:
    g = Graph()
    p = g.parameter(np.ones((1, 1, 2, 2)), "p")
    with pytest.raises(ShapeError):
        backward(g, p)


def test_mixing_graphs_raises() -> None:
    a, b = Graph(), Graph()
    with pytest.raises(ShapeError):
        residual_add(a.constant(np.ones((1, 1, 1, 1))), b.constant(np.ones((1, 1, 1, 1))))


def test_finite_differences_exact_for_linear_graph() -> None:
    rng = make_rng(0)
    weights = rng.standard_normal((1, 2, 3, 3))

    def build(g: Graph, v: Mapping[str, Variable]) -> Variable:
        out = residual_add(scale(v["a"], 2.0), residual_add(v["b"], v["a"]))
        return weighted_sum(out, g.constant(weights))

    inputs = {"a": rng.standard_normal((1, 2, 3, 3)), "b": rng.standard_normal((1, 2, 3, 3))}
    assert finite_diff_check(build, inputs) <= 1e-9


def test_finite_differences_conv_prelu_bce() -> None:
    rng = make_rng(1)
    target = (rng.uniform(size=(2, 1, 5, 5)) < 0.5).astype(float)

    def build(g: Graph, v: Mapping[str, Variable]) -> Variable:
        hidden = prelu(conv2d(v["x"], v["w1"], v["b1"], padding=1), v["a"])
        logits = conv2d(hidden, v["w2"], v["b2"], padding=2, dilation=2)
        return bce_loss(logits, g.constant(target))

    inputs = {
        "x": rng.standard_normal((2, 1, 5, 5)),
        "w1": rng.standard_normal((3, 1, 3, 3)),
        "b1": rng.standard_normal(3),
        "a": np.full(3, 0.25),
        "w2": rng.standard_normal((1, 3, 3, 3)),
        "b2": rng.standard_normal(1),
    }
    assert finite_diff_check(build, inputs, h=1e-4) <= 1e-5


def test_finite_differences_excludes_maxpool_ties() -> None:
    def build(g: Graph, v: Mapping[str, Variable]) -> Variable:
        return total(g, maxpool2d(v["x"]))

    inputs = {"x": np.ones((1, 1, 2, 2))}
    assert finite_diff_check(build, inputs, skip_kinks=False) > 0.1
    assert finite_diff_check(build, inputs) == 0.0
    assert finite_diff_check(build, inputs, exclude=lambda *_: True, skip_kinks=False) == 0.0


def test_sweep_counts_compared_points() -> None:
    def build(g: Graph, v: Mapping[str, Variable]) -> Variable:
        return total(g, maxpool2d(v["x"]))

    assert finite_diff_sweep(build, {"x": np.ones((1, 1, 4, 4))}).points == 0
    distinct = {"x": make_rng(3).permutation(16).reshape(1, 1, 4, 4).astype(float)}
    result = finite_diff_sweep(build, distinct)
    assert result.points == 16
    assert result.max_rel_error <= 1e-9


def test_float64_graph_leaves_model_arrays_untouched() -> None:
    weights = np.ones((1, 1, 3, 3), dtype=np.float32)
    g = Graph(dtype=np.float64)
    w = g.parameter(weights, "w")
    assert w.value.dtype == np.float64
    assert weights.dtype == np.float32
