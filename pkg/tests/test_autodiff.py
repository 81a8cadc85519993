import numpy as np
import pytest

from wsnas import autodiff as ad
from wsnas.optim import Adam, AdamConfig, Sgd, SgdConfig

from gradcheck import max_relative_error, op_instances


def test_softmax_uniform_logits():
    g = ad.Graph()
    out = ad.softmax(g, ad.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_positive_and_normalized():
    rng = np.random.default_rng(3)
    g = ad.Graph()
    out = ad.softmax(g, ad.Tensor(rng.standard_normal((20, 7)) * 10))
    assert (out.data > 0).all()
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_zero_output_matches_edge_contract():
    g = ad.Graph()
    x = ad.Tensor(np.ones((2, 3, 5, 5)))
    assert ad.zero_output(g, x).data.shape == (2, 3, 5, 5)
    assert ad.zero_output(g, x, stride=2).data.shape == (2, 3, 3, 3)
    assert not ad.zero_output(g, x).data.any()


def test_conv2d_ones_against_hand_unrolled_oracle():
    # 1x1x4x4 ones, 3x3 ones kernel, zero padding 1: each output counts the
    # in-bounds neighbours, so corners are 4 and the interior is 9.
    g = ad.Graph()
    x = ad.Tensor(np.ones((1, 1, 4, 4)))
    w = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(g, x, w, padding=1).data[0, 0]

    oracle = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            acc = 0.0
            for u in range(3):
                for v in range(3):
                    ii, jj = i + u - 1, j + v - 1
                    if 0 <= ii < 4 and 0 <= jj < 4:
                        acc += 1.0
            oracle[i, j] = acc
    np.testing.assert_allclose(out, oracle, atol=0)
    assert out[1, 1] == 9 and out[0, 0] == 4


def test_conv2d_random_against_explicit_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    g = ad.Graph()
    out = ad.conv2d(g, ad.Tensor(x), ad.Tensor(w), stride=2).data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oracle = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    acc = 0.0
                    for c in range(3):
                        for u in range(3):
                            for v in range(3):
                                acc += xp[n, c, 2 * i + u, 2 * j + v] * w[o, c, u, v]
                    oracle[n, o, i, j] = acc
    np.testing.assert_allclose(out, oracle, atol=1e-12)


def test_backward_sum_gives_ones():
    g = ad.Graph()
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    g.backward(ad.tensor_sum(g, x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_mean_square():
    g = ad.Graph()
    x = ad.parameter([1.0, 2.0, 3.0])
    loss = ad.scalar_mul(g, ad.mean(g, ad.mul(g, x, x)), 0.5)
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [1 / 3, 2 / 3, 1.0], atol=1e-15)


def test_backward_rejects_non_scalar_loss():
    g = ad.Graph()
    x = ad.parameter(np.ones(3))
    y = ad.mul(g, x, x)
    with pytest.raises(ad.ShapeError):
        g.backward(y)


def test_gradient_accumulates_across_paths():
    # y = x*x + x uses x twice: grad must be 2x + 1
    g = ad.Graph()
    x = ad.parameter([1.5, -2.0])
    y = ad.add(g, ad.mul(g, x, x), x)
    g.backward(ad.tensor_sum(g, y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-15)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((4, 5))
    w1 = rng.standard_normal((5, 6)) * 0.7
    w2 = rng.standard_normal((6, 3)) * 0.7
    w3 = rng.standard_normal((3, 2)) * 0.7
    labels = rng.integers(0, 2, size=4)

    def build(g, t):
        h1 = ad.relu(g, ad.matmul(g, t[0], t[1]))
        h2 = ad.relu(g, ad.matmul(g, h1, t[2]))
        logits = ad.matmul(g, h2, t[3])
        loss = ad.cross_entropy_with_logits(g, logits, labels)
        return loss

    err = max_relative_error(build, [x0, w1, w2, w3], rng)
    assert err < 1e-4


@pytest.mark.parametrize("seed", [0, 1])
def test_every_op_passes_finite_difference_check(seed):
    rng = np.random.default_rng(seed)
    for name, build, arrays in op_instances(rng):
        err = max_relative_error(build, arrays, rng)
        assert err < 1e-4, f"{name}: max relative error {err:.3e}"


def test_shape_errors_name_the_op():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(g, ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(g, ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat(g, [ad.Tensor(np.ones((2, 2, 3, 3))), ad.Tensor(np.ones((2, 2, 4, 3)))])


def test_forward_and_backward_are_deterministic():
    def run():
        rng = np.random.default_rng(42)
        g = ad.Graph()
        x = ad.parameter(rng.standard_normal((2, 3, 8, 8)))
        w = ad.parameter(rng.standard_normal((4, 3, 3, 3)))
        out = ad.relu(g, ad.conv2d(g, x, w, stride=2))
        loss = ad.mean(g, out)
        g.backward(loss)
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_forward_op_dispatch_covers_spec_kinds():
    g = ad.Graph()
    x = ad.Tensor(np.ones((1, 2, 4, 4)))
    assert ad.forward_op(g, "relu", [x]).data.shape == (1, 2, 4, 4)
    assert ad.forward_op(g, "zero", [x], stride=2).data.shape == (1, 2, 2, 2)
    out = ad.forward_op(g, "add", [ad.Tensor([1.0]), ad.Tensor([2.0])])
    assert out.data[0] == 3.0
    with pytest.raises(ValueError, match="unknown op kind"):
        ad.forward_op(g, "fft", [x])


class TestSgd:
    def test_single_plain_step(self):
        p = ad.parameter([1.0])
        p.grad = np.array([1.0])
        Sgd([p], SgdConfig(lr=0.1, momentum=0.0, weight_decay=0.0)).step()
        np.testing.assert_allclose(p.data, [0.9], atol=1e-15)

    def test_two_momentum_steps_hand_iterated(self):
        p = ad.parameter([0.0])
        opt = Sgd([p], SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.0))
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-15)
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [-0.29], atol=1e-15)

    def test_pure_weight_decay(self):
        p = ad.parameter([2.0])
        p.grad = np.array([0.0])
        Sgd([p], SgdConfig(lr=1.0, momentum=0.0, weight_decay=0.1)).step()
        np.testing.assert_allclose(p.data, [1.8], atol=1e-15)

    def test_missing_grad_is_an_error(self):
        p = ad.parameter([1.0])
        with pytest.raises(ValueError, match="no gradient"):
            Sgd([p], SgdConfig(lr=0.1)).step()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SgdConfig(lr=-1.0)
        with pytest.raises(ValueError):
            SgdConfig(lr=0.1, momentum=1.0)


class TestAdam:
    def test_single_step_hand_iterated(self):
        p = ad.parameter([0.0])
        p.grad = np.array([1.0])
        opt = Adam([p], AdamConfig(lr=1e-3, beta1=0.9, beta2=0.999, weight_decay=0.0))
        opt.step()
        # m_hat = 1, v_hat = 1: step = lr / (1 + eps)
        np.testing.assert_allclose(p.data, [-1e-3 / (1 + 1e-8)], rtol=1e-12)

    def test_zero_grad_zero_decay_is_a_fixed_point(self):
        p = ad.parameter([0.7])
        opt = Adam([p], AdamConfig(lr=1e-2, weight_decay=0.0))
        for _ in range(5):
            p.grad = np.array([0.0])
            opt.step()
        np.testing.assert_allclose(p.data, [0.7], atol=1e-15)

    def test_single_step_opposes_gradient_sign(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            p = ad.parameter(rng.standard_normal(4))
            p.grad = rng.standard_normal(4)
            before = p.data.copy()
            Adam([p], AdamConfig(lr=1e-3, weight_decay=0.0)).step()
            moved = p.data - before
            assert (np.sign(moved) == -np.sign(p.grad)).all()

    def test_missing_grad_is_an_error(self):
        p = ad.parameter([1.0])
        with pytest.raises(ValueError, match="no gradient"):
            Adam([p], AdamConfig()).step()
