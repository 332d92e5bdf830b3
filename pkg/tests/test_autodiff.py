import numpy as np
import pytest

import swarmcbf.autodiff as ad
from swarmcbf.autodiff import Tensor, Tape, TapeError


def backward_of(build):
    """Run build() under a fresh tape and backprop its scalar output."""
    with Tape() as tape:
        out = build()
        tape.backward(out)
    return out


def test_relu_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    v = np.array([[1.0], [2.0], [3.0]])
    out = ad.matmul(Tensor(np.eye(3)), Tensor(v))
    assert np.array_equal(out.data, v)


def test_backward_sum_gives_ones():
    theta = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(theta))
    assert np.array_equal(theta.grad, [1.0, 1.0, 1.0])


def test_backward_squared_norm():
    theta = Tensor([1.0, 2.0], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(ad.mul(theta, theta)))
    assert np.allclose(theta.grad, [2.0, 4.0])


def test_relu_subgradient_zero_at_kink():
    x = Tensor([0.0], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(ad.relu(x)))
    assert x.grad[0] == 0.0


def test_norm2_subgradient_zero_at_origin():
    x = Tensor([[0.0, 0.0]], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(ad.norm2(x, axis=1, keepdims=True)))
    assert np.array_equal(x.grad, [[0.0, 0.0]])


def test_backward_on_empty_tape_raises():
    with pytest.raises(TapeError):
        with Tape() as tape:
            tape.backward(Tensor(1.0))


def test_single_backward_per_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
    tape.reset()
    assert len(tape) == 0


def test_gradient_accumulates_across_reuse():
    x = Tensor([3.0], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(ad.add(x, x)))
    assert x.grad[0] == 2.0


def test_no_tape_means_plain_numpy():
    x = Tensor([1.0], requires_grad=True)
    out = ad.mul(x, x)
    assert out.grad is None and x.grad is None


def test_gather_scatters_gradient():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    idx = np.array([0, 0, 2])
    backward_of(lambda: ad.tensor_sum(ad.gather(x, idx)))
    assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_segment_sum_values_and_empty_bucket():
    x = Tensor(np.array([[1.0], [2.0], [4.0]]))
    out = ad.segment_sum(x, np.array([0, 0, 2]), 3)
    assert np.array_equal(out.data, [[3.0], [0.0], [4.0]])


def test_clip_gradient_masks_outside():
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
    backward_of(lambda: ad.tensor_sum(ad.clip(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_linearity_of_backward():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    x_data = rng.normal(size=5)
    a, b = 2.5, -1.25

    def grad_of(scale_f, scale_g):
        x = Tensor(x_data, requires_grad=True)
        with Tape() as tape:
            f = ad.tensor_sum(ad.mul(Tensor(w), ad.mul(x, x)))
            g = ad.tensor_sum(ad.sin(x))
            loss = ad.add(ad.mul(scale_f, f), ad.mul(scale_g, g))
            tape.backward(loss)
        return x.grad

    combined = grad_of(a, b)
    expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
    assert np.allclose(combined, expected, atol=1e-12)


def test_grad_check_quadratic_tight():
    theta = Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)
    err = ad.grad_check(lambda: ad.tensor_sum(ad.mul(theta, theta)), [theta])
    assert err < 1e-7


def test_grad_check_constant_function():
    theta = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    err = ad.grad_check(lambda: ad.mul(ad.tensor_sum(ad.mul(theta, 0.0)), 1.0), [theta])
    assert err == 0.0


def test_grad_check_two_layer_mlp():
    rng = np.random.default_rng(4)
    W1 = Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=8) * 0.1, requires_grad=True)
    W2 = Tensor(rng.normal(size=(8, 1)) * 0.5, requires_grad=True)
    x = rng.normal(size=(4, 3))

    def f():
        h = ad.relu(ad.add(ad.matmul(Tensor(x), W1), b1))
        return ad.tensor_sum(ad.matmul(h, W2))

    err = ad.grad_check(f, [W1, b1, W2])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_grad_check_network_composites(seed):
    """Every op family the networks use, composed, against central FD."""
    rng = np.random.default_rng(seed)
    W = Tensor(rng.normal(size=(4, 6)) * 0.4, requires_grad=True)
    b = Tensor(rng.normal(size=6) * 0.2, requires_grad=True)
    g = Tensor(rng.normal(size=(6, 1)) * 0.4, requires_grad=True)
    feat = rng.normal(size=(7, 4))
    seg = np.array([0, 0, 1, 1, 1, 2, 2])

    def f():
        q = ad.relu(ad.add(ad.matmul(Tensor(feat), W), b))
        logits = ad.matmul(q, g)
        m = logits.data.max()
        e = ad.exp(ad.sub(logits, m))
        tot = ad.segment_sum(e, seg, 3)
        w = ad.div(e, ad.gather(tot, seg))
        agg = ad.segment_sum(ad.mul(w, q), seg, 3)
        return ad.tensor_sum(ad.mul(agg, agg))

    err = ad.grad_check(f, [W, b, g], max_coords=8, rng=rng)
    assert err < 1e-4
