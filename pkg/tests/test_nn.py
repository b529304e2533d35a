import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, max_relative_error
from fedskip.errors import EmptyDatasetError, LayoutError, ShapeError
from fedskip.nn import (
    Batch,
    LayerKind,
    LayerSpec,
    ParameterVector,
    build_model,
    evaluate,
    forward,
    init_params,
    l2_norm,
    loss_and_grad,
    make_layout,
    sgd_step,
)


def _random_params(layers, seed, scale=0.5):
    p = init_params(layers, seed)
    rng = np.random.default_rng(seed + 1000)
    return p.with_values(rng.normal(scale=scale, size=len(p)))


def _fd_check(params, batch):
    _, grad = loss_and_grad(params, batch)
    numeric = central_difference(lambda v: loss_and_grad(params.with_values(v), batch)[0],
                                 params.values)
    return max_relative_error(grad.values, numeric)


class TestBuildModel:
    def test_har_mlp_count_matches_layer_arithmetic(self):
        p = build_model("har_mlp", 7)
        expected = (561 * 128 + 128) + (128 * 64 + 64) + (64 * 6 + 6)
        assert expected == 80_582
        assert len(p) == expected == sum(e.length for e in p.layout)

    def test_har_mlp_layers(self):
        kinds = [s.kind for s in build_model("har_mlp", 7).layers]
        assert kinds == [LayerKind.DENSE, LayerKind.RELU, LayerKind.DENSE, LayerKind.RELU,
                         LayerKind.DENSE, LayerKind.SOFTMAX]

    def test_mnist_cnn_first_conv(self):
        p = build_model("mnist_cnn", 7)
        assert p.layout[0].spec == LayerSpec.conv2d(16, 5, 5, 1)
        assert p.layout[0].length == 16 * 1 * 5 * 5 + 16 == 416
        # 28 -> 24 -> 12 -> 8 -> 4; 32 * 4 * 4 = 512 features into the head
        assert p.layout[-2].spec == LayerSpec.dense(512, 10)

    def test_deterministic(self):
        a = build_model("mnist_cnn", 7)
        b = build_model("mnist_cnn", 7)
        assert a.values.tobytes() == b.values.tobytes()
        assert build_model("mnist_cnn", 8).values.tobytes() != a.values.tobytes()

    def test_glorot_bounds_and_zero_bias(self):
        p = build_model("har_mlp", 3)
        w, b = p.unflatten()[0]
        limit = math.sqrt(6 / (561 + 128))
        assert np.abs(w).max() <= limit
        assert not b.any()


class TestParameterVector:
    def test_flatten_unflatten_roundtrip_bitwise(self):
        p = build_model("mnist_cnn", 1)
        again = ParameterVector.flatten(p.layers, p.unflatten())
        assert again.values.tobytes() == p.values.tobytes()
        assert again.layout == p.layout

    def test_layout_contiguous(self):
        layout = build_model("mnist_cnn", 1).layout
        pos = 0
        for entry in layout:
            assert entry.offset == pos
            pos += entry.length

    def test_bad_layout_rejected(self):
        layout = make_layout([LayerSpec.dense(2, 2)])
        with pytest.raises(LayoutError):
            ParameterVector(np.zeros(5), layout)

    def test_layer_spec_rejects_zero_dims(self):
        with pytest.raises(ValueError):
            LayerSpec.dense(0, 3)


class TestForward:
    def test_zero_dense_net_is_uniform(self):
        layers = [LayerSpec.dense(5, 7), LayerSpec.relu(), LayerSpec.dense(7, 4), LayerSpec.softmax()]
        p = init_params(layers, 0).with_values(np.zeros(5 * 7 + 7 + 7 * 4 + 4))
        out = forward(p, np.random.default_rng(0).normal(size=(3, 5)))
        np.testing.assert_array_equal(out, np.full((3, 4), 0.25))

    def test_rows_are_probabilities(self):
        p = build_model("mnist_cnn", 2)
        x = np.random.default_rng(2).random((5, 1, 28, 28))
        out = forward(p, x)
        assert out.min() >= 0 and out.max() <= 1
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_hand_computed_two_two_two(self):
        layers = [LayerSpec.dense(2, 2), LayerSpec.relu(), LayerSpec.dense(2, 2), LayerSpec.softmax()]
        w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.0, 0.5])
        w2 = np.array([[1.0, 0.0], [0.0, -1.0]])
        b2 = np.array([0.1, 0.0])
        p = ParameterVector.flatten(layers, [(w1, b1), (), (w2, b2), ()])
        # hidden = [1*1 + 2*0.5 + 0, 1*-1 + 2*2 + 0.5] = [2, 3.5]
        # logits = [2 + 0.1, -3.5]
        p0 = 1.0 / (1.0 + math.exp(-(2.1 - (-3.5))))
        out = forward(p, np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out, [[p0, 1 - p0]], rtol=0, atol=1e-15)

    def test_deterministic(self):
        p = build_model("har_mlp", 4)
        x = np.random.default_rng(4).normal(size=(6, 561))
        assert forward(p, x).tobytes() == forward(p, x).tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward(build_model("har_mlp", 0), np.zeros((2, 560)))
        with pytest.raises(ShapeError):
            forward(build_model("mnist_cnn", 0), np.zeros((2, 1, 3, 3)))

    def test_channelless_images_accepted(self):
        p = build_model("mnist_cnn", 0)
        x = np.random.default_rng(0).random((2, 28, 28))
        np.testing.assert_array_equal(forward(p, x), forward(p, x[:, None]))


class TestLossAndGrad:
    def test_uniform_output_loss_is_log_c(self):
        layers = [LayerSpec.dense(3, 5), LayerSpec.softmax()]
        p = init_params(layers, 0).with_values(np.zeros(20))
        loss, _ = loss_and_grad(p, Batch(np.ones((4, 3)), [0, 1, 2, 4]))
        assert abs(loss - math.log(5)) < 1e-6

    def test_saturated_correct_prediction(self):
        layers = [LayerSpec.dense(1, 2), LayerSpec.softmax()]
        p = ParameterVector.flatten(layers, [(np.zeros((1, 2)), np.array([50.0, -50.0])), ()])
        loss, grad = loss_and_grad(p, Batch(np.ones((1, 1)), [0]))
        assert 0 <= loss < 1e-6
        assert np.abs(grad.values).max() < 1e-6

    def test_grad_layout_matches(self):
        p = build_model("har_mlp", 0)
        _, g = loss_and_grad(p, Batch(np.zeros((2, 561)), [0, 5]))
        assert g.layout == p.layout

    def test_labels_out_of_range(self):
        with pytest.raises(ShapeError):
            loss_and_grad(build_model("har_mlp", 0), Batch(np.zeros((1, 561)), [6]))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_dense_mlp_matches_finite_differences(self, seed):
        layers = [LayerSpec.dense(6, 8), LayerSpec.relu(), LayerSpec.dense(8, 5),
                  LayerSpec.relu(), LayerSpec.dense(5, 3), LayerSpec.softmax()]
        p = _random_params(layers, seed)
        rng = np.random.default_rng(seed)
        batch = Batch(rng.normal(size=(4, 6)), rng.integers(0, 3, 4))
        assert _fd_check(p, batch) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1])
    def test_conv_maxpool_matches_finite_differences(self, seed):
        layers = [LayerSpec.conv2d(3, 3, 3, 2), LayerSpec.relu(), LayerSpec.maxpool2d(2, 2),
                  LayerSpec.conv2d(4, 2, 2, 3), LayerSpec.relu(), LayerSpec.maxpool2d(2, 2),
                  LayerSpec.flatten(), LayerSpec.dense(4, 3), LayerSpec.softmax()]
        p = _random_params(layers, seed)
        assert len(p) < 1000
        rng = np.random.default_rng(seed)
        batch = Batch(rng.normal(size=(3, 2, 8, 8)), rng.integers(0, 3, 3))
        assert _fd_check(p, batch) < 1e-4

    def test_odd_sized_pooling_input(self):
        # pooling a 3x3 map drops the last row and column
        layers = [LayerSpec.conv2d(2, 2, 2, 1), LayerSpec.relu(), LayerSpec.conv2d(2, 2, 2, 2),
                  LayerSpec.maxpool2d(2, 2), LayerSpec.flatten(), LayerSpec.dense(2, 2),
                  LayerSpec.softmax()]
        p = _random_params(layers, 5)
        rng = np.random.default_rng(5)
        batch = Batch(rng.normal(size=(2, 1, 5, 5)), [0, 1])
        assert _fd_check(p, batch) < 1e-4

    def test_table_cnn_head_matches_finite_differences(self):
        p = build_model("mnist_cnn", 9)
        rng = np.random.default_rng(9)
        batch = Batch(rng.random((2, 1, 28, 28)), [3, 7])
        _, grad = loss_and_grad(p, batch)
        # spot-check a strided subset of coordinates across every layer
        coords = np.unique(np.concatenate([np.arange(0, len(p), 97), [len(p) - 1]]))
        h = 1e-4
        for k in coords:
            v = p.values.copy()
            v[k] += h
            fp = loss_and_grad(p.with_values(v), batch)[0]
            v[k] -= 2 * h
            fm = loss_and_grad(p.with_values(v), batch)[0]
            num = (fp - fm) / (2 * h)
            assert max_relative_error([grad.values[k]], [num]) < 1e-4, k


class TestSgdAndNorm:
    def test_lr_zero_is_identity(self):
        p = build_model("har_mlp", 0)
        _, g = loss_and_grad(p, Batch(np.ones((1, 561)), [2]))
        assert sgd_step(p, g, 0.0).values.tobytes() == p.values.tobytes()

    def test_arithmetic(self):
        layout = make_layout([LayerSpec.dense(1, 1)])
        out = sgd_step(ParameterVector([1.0, 2.0], layout), ParameterVector([0.5, -1.0], layout), 0.1)
        np.testing.assert_allclose(out.values, [0.95, 2.1], rtol=0, atol=1e-15)

    def test_two_steps_equal_summed_step(self):
        layout = make_layout([LayerSpec.dense(1, 1)])
        p = ParameterVector([1.0, 0.0], layout)
        g1 = ParameterVector([0.25, 0.0], layout)
        g2 = ParameterVector([0.5, 0.0], layout)
        two = sgd_step(sgd_step(p, g1, 0.5), g2, 0.5)
        one = sgd_step(p, g1 + g2, 0.5)
        np.testing.assert_array_equal(two.values, one.values)

    def test_layout_mismatch(self):
        a = ParameterVector([1.0, 2.0], make_layout([LayerSpec.dense(1, 1)]))
        with pytest.raises(LayoutError):
            sgd_step(a, build_model("har_mlp", 0), 0.1)

    def test_norm_examples(self):
        assert l2_norm(np.array([3.0, 4.0])) == 5.0
        assert l2_norm(np.zeros(10)) == 0.0

    def test_norm_matches_naive_sum(self):
        v = np.random.default_rng(3).normal(size=1000)
        naive = math.sqrt(sum(float(x) * float(x) for x in v))
        assert abs(l2_norm(v) - naive) <= 1e-10 * naive

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 16, elements=st.floats(-1e6, 1e6)),
           arrays(np.float64, 16, elements=st.floats(-1e6, 1e6)))
    def test_triangle_inequality(self, a, b):
        assert l2_norm(a + b) <= l2_norm(a) + l2_norm(b) + 1e-9 * (1 + l2_norm(a) + l2_norm(b))


class _Data:
    def __init__(self, inputs, labels):
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = np.asarray(labels)


class TestEvaluate:
    def test_perfect_model(self):
        layers = [LayerSpec.dense(2, 2), LayerSpec.softmax()]
        p = ParameterVector.flatten(layers, [(np.eye(2) * 10, np.zeros(2)), ()])
        acc, loss = evaluate(p, _Data([[1, 0], [0, 1], [2, 0]], [0, 1, 0]))
        assert acc == 1.0 and loss >= 0

    def test_uniform_model_ties_go_to_lowest_index(self):
        layers = [LayerSpec.dense(2, 4), LayerSpec.softmax()]
        p = init_params(layers, 0).with_values(np.zeros(12))
        labels = np.repeat(np.arange(4), 5)
        acc, loss = evaluate(p, _Data(np.ones((20, 2)), labels))
        assert acc == 0.25
        assert abs(loss - math.log(4)) < 1e-12

    def test_accuracy_bounds(self):
        p = build_model("har_mlp", 1)
        rng = np.random.default_rng(1)
        acc, _ = evaluate(p, _Data(rng.normal(size=(30, 561)), rng.integers(0, 6, 30)))
        assert 0.0 <= acc <= 1.0

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            evaluate(build_model("har_mlp", 1), _Data(np.zeros((0, 561)), []))
