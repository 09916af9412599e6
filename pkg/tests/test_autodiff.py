"""Unit tests for the reverse-mode engine: every primitive gets a direct
value check and a finite-difference gradient check."""
import numpy as np
import pytest

from tsp_tta import autodiff as ad
from tsp_tta.autodiff import MaskError, Node, ShapeError

from helpers import check_gradients, max_rel_err


def _readout(node, rng):
    """Random rank-1 projection to a scalar, built from existing primitives."""
    m, n = node.value.shape if node.value.ndim == 2 else (1, node.value.shape[0])
    if node.value.ndim == 1:
        node = ad.reshape(node, (1, node.value.shape[0]))
    left = Node(rng.normal(size=(1, m)))
    right = Node(rng.normal(size=(n, 1)))
    return ad.sum_all(ad.matmul(ad.matmul(left, node), right))


class TestMatmul:
    def test_identity(self):
        a = Node(np.eye(2))
        b = Node(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert np.array_equal(ad.matmul(a, b).value, b.value)

    def test_projection(self):
        a = Node(np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = Node(np.array([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(ad.matmul(a, b).value, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Node(np.ones((2, 3))), Node(np.ones((2, 3))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-2, 2, (3, 3))
        b = rng.uniform(-2, 2, (3, 3))
        check_gradients(
            lambda leaves: ad.sum_all(ad.matmul(leaves[0], leaves[1])),
            [a, b],
            tol=1e-6,
        )


class TestSoftmax:
    def test_uniform_under_symmetry(self):
        out = ad.softmax(Node(np.zeros(3)), np.array([False, False, False]))
        assert np.allclose(out.value, 1.0 / 3.0, rtol=0, atol=1e-15)

    def test_single_survivor(self):
        out = ad.softmax(Node(np.array([5.0, 5.0])), np.array([False, True]))
        assert out.value[0] == 1.0
        assert out.value[1] == 0.0

    def test_all_masked_rejected(self):
        with pytest.raises(MaskError):
            ad.softmax(Node(np.zeros(2)), np.array([True, True]))

    def test_probability_vector_properties(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 9))
            mask = rng.random(n) < 0.4
            if mask.all():
                mask[int(rng.integers(0, n))] = False
            y = ad.softmax(Node(rng.uniform(-5, 5, n)), mask).value
            assert (y >= 0).all()
            assert abs(y.sum() - 1.0) <= 1e-12
            assert (y[mask] == 0.0).all()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, 6)
        mask = np.array([False, False, True, False, False, False])
        w = rng.normal(size=(6, 1))

        def make_loss(leaves):
            y = ad.softmax(leaves[0], mask)
            return ad.sum_all(ad.matmul(ad.reshape(y, (1, 6)), Node(w)))

        check_gradients(make_loss, [x], tol=1e-6)


class TestLayerNorm:
    def test_constant_vector_collapses_to_bias(self):
        out = ad.layer_norm(
            Node(np.full(4, 3.7)), Node(np.ones(4)), Node(np.zeros(4))
        )
        assert np.allclose(out.value, 0.0, atol=1e-12)

    def test_unit_variance_pair(self):
        out = ad.layer_norm(
            Node(np.array([1.0, -1.0])), Node(np.ones(2)), Node(np.zeros(2))
        )
        assert np.allclose(out.value, [1.0, -1.0], atol=1e-4)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-2, 2, (2, 8))
        gain = rng.uniform(0.5, 1.5, 8)
        bias = rng.uniform(-0.5, 0.5, 8)

        def make_loss(leaves):
            y = ad.layer_norm(leaves[0], leaves[1], leaves[2])
            return _readout(y, np.random.default_rng(0))

        check_gradients(make_loss, [x, gain, bias], tol=1e-5)


class TestElementwiseAndShapeOps:
    def test_add_values_and_gradient(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (2, 3))
        assert np.array_equal(ad.add(Node(a), Node(b)).value, a + b)
        check_gradients(
            lambda lv: _readout(ad.add(lv[0], lv[1]), np.random.default_rng(1)),
            [a, b],
            tol=1e-6,
        )

    def test_add_bias(self):
        x = np.zeros((2, 3))
        b = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(ad.add_bias(Node(x), Node(b)).value, [[1, 2, 3], [1, 2, 3]])
        rng = np.random.default_rng(2)
        check_gradients(
            lambda lv: _readout(ad.add_bias(lv[0], lv[1]), np.random.default_rng(3)),
            [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, 4)],
            tol=1e-6,
        )

    def test_mul_scalar(self):
        assert np.array_equal(ad.mul_scalar(Node(np.array([1.0, -2.0])), 3.0).value, [3, -6])
        check_gradients(
            lambda lv: _readout(ad.mul_scalar(lv[0], -1.7), np.random.default_rng(4)),
            [np.random.default_rng(5).uniform(-2, 2, (2, 2))],
            tol=1e-6,
        )

    def test_relu(self):
        assert np.array_equal(
            ad.relu(Node(np.array([-1.0, 0.0, 2.0]))).value, [0, 0, 2]
        )
        check_gradients(
            lambda lv: _readout(ad.relu(lv[0]), np.random.default_rng(6)),
            [np.random.default_rng(7).uniform(-2, 2, (3, 3)) + 0.01],
            tol=1e-6,
        )

    def test_log(self):
        assert np.allclose(ad.log(Node(np.array([1.0, np.e]))).value, [0.0, 1.0])
        check_gradients(
            lambda lv: _readout(ad.log(lv[0]), np.random.default_rng(8)),
            [np.random.default_rng(9).uniform(0.1, 2.0, (2, 3))],
            tol=1e-6,
        )

    def test_gather_rows_with_duplicates(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = ad.gather_rows(Node(x), [2, 0, 2])
        assert np.array_equal(out.value, [[5, 6], [1, 2], [5, 6]])
        check_gradients(
            lambda lv: _readout(
                ad.gather_rows(lv[0], [2, 0, 2]), np.random.default_rng(10)
            ),
            [x],
            tol=1e-6,
        )

    def test_concat_axes(self):
        a, b = np.ones((1, 2)), np.zeros((2, 2))
        assert ad.concat([Node(a), Node(b)], axis=0).value.shape == (3, 2)
        assert ad.concat([Node(a.T), Node(b)], axis=1).value.shape == (2, 3)
        rng = np.random.default_rng(11)
        check_gradients(
            lambda lv: _readout(ad.concat(lv, axis=0), np.random.default_rng(12)),
            [rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, (1, 3))],
            tol=1e-6,
        )

    def test_transpose(self):
        x = np.array([[1.0, 2.0, 3.0]])
        assert np.array_equal(ad.transpose(Node(x)).value, x.T)
        check_gradients(
            lambda lv: _readout(ad.transpose(lv[0]), np.random.default_rng(13)),
            [np.random.default_rng(14).uniform(-2, 2, (2, 4))],
            tol=1e-6,
        )

    def test_reshape(self):
        x = np.arange(6.0).reshape(2, 3)
        assert ad.reshape(Node(x), (3, 2)).value.shape == (3, 2)
        check_gradients(
            lambda lv: _readout(ad.reshape(lv[0], (3, 2)), np.random.default_rng(15)),
            [x],
            tol=1e-6,
        )

    def test_sum_and_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert float(ad.sum_all(Node(x)).value) == 10.0
        assert float(ad.mean_all(Node(x)).value) == 2.5
        check_gradients(lambda lv: ad.sum_all(lv[0]), [x], tol=1e-6)
        check_gradients(lambda lv: ad.mean_all(lv[0]), [x], tol=1e-6)


class TestMultiHeadAttention:
    def test_single_head_uniform_keys(self):
        # identical keys -> uniform attention -> output is the mean of values
        q = Node(np.ones((1, 2)))
        k = Node(np.ones((3, 2)))
        v = Node(np.array([[0.0, 3.0], [3.0, 0.0], [0.0, 0.0]]))
        out = ad.multi_head_attention(q, k, v, n_heads=1)
        assert np.allclose(out.value, [[1.0, 1.0]])

    def test_causal_mask_blocks_future(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        mask = np.triu(np.full((3, 3), -1e9), k=1)
        out = ad.multi_head_attention(Node(x), Node(x), Node(x), 2, mask).value
        # first row can only attend to itself
        assert np.allclose(out[0], x[0])

    def test_head_split_shape_guard(self):
        with pytest.raises(ShapeError):
            ad.multi_head_attention(
                Node(np.ones((2, 6))), Node(np.ones((2, 6))), Node(np.ones((2, 6))), 4
            )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        q = rng.uniform(-2, 2, (3, 4))
        k = rng.uniform(-2, 2, (5, 4))
        v = rng.uniform(-2, 2, (5, 4))
        mask = np.zeros((3, 5))
        mask[0, 4] = -1e9

        def make_loss(lv):
            y = ad.multi_head_attention(lv[0], lv[1], lv[2], 2, mask)
            return _readout(y, np.random.default_rng(22))

        check_gradients(make_loss, [q, k, v], tol=1e-6)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = Node(np.array([1.0, 2.0, 3.0]))
        ad.backward(ad.sum_all(p))
        assert np.array_equal(p.grad, np.ones(3))

    def test_sum_of_squares_gradient(self):
        p = Node(np.array([1.0, 2.0, 3.0]))
        row = ad.reshape(p, (1, 3))
        ad.backward(ad.sum_all(ad.matmul(row, ad.transpose(row))))
        assert np.allclose(p.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError):
            ad.backward(Node(np.ones(2)))

    def test_fanout_accumulates(self):
        p = Node(np.array([2.0]))
        y = ad.add(p, p)
        ad.backward(ad.sum_all(y))
        assert np.array_equal(p.grad, [2.0])

    def test_backward_is_linear(self):
        rng = np.random.default_rng(17)
        base = rng.uniform(-2, 2, (3, 3))
        alpha, beta = 0.7, -1.3

        def grad_of(weight_pair):
            p = Node(base.copy())
            l1 = ad.sum_all(ad.matmul(p, ad.transpose(p)))
            l2 = ad.mean_all(ad.relu(p))
            loss = ad.add(
                ad.mul_scalar(l1, weight_pair[0]), ad.mul_scalar(l2, weight_pair[1])
            )
            ad.backward(loss)
            return p.grad

        combo = grad_of((alpha, beta))
        ga = grad_of((1.0, 0.0))
        gb = grad_of((0.0, 1.0))
        assert np.abs(combo - (alpha * ga + beta * gb)).max() < 1e-10

    def test_grad_shapes_match_values(self):
        rng = np.random.default_rng(19)
        a = Node(rng.normal(size=(4, 3)))
        b = Node(rng.normal(size=(3, 2)))
        bias = Node(rng.normal(size=2))
        loss = ad.sum_all(ad.relu(ad.add_bias(ad.matmul(a, b), bias)))
        ad.backward(loss)
        for node in (a, b, bias):
            assert node.grad.shape == node.value.shape

    def test_no_grad_builds_no_graph(self):
        with ad.no_grad():
            out = ad.matmul(Node(np.ones((2, 2))), Node(np.ones((2, 2))))
        assert out.parents == ()
        assert ad.grad_enabled()


def test_forward_values_finite_on_finite_inputs():
    rng = np.random.default_rng(23)
    x = Node(rng.uniform(-2, 2, (4, 6)))
    y = ad.layer_norm(x, Node(np.ones(6)), Node(np.zeros(6)))
    y = ad.multi_head_attention(y, y, y, 2)
    y = ad.relu(y)
    assert np.isfinite(y.value).all()
