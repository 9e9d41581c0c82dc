import numpy as np
import pytest

from layerlab import autodiff as ad
from layerlab.autodiff import GradTape, ShapeError, TapeError, Tensor


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(eye, m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_product():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    out = ad.matmul(a, b)
    np.testing.assert_allclose(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(a, b)


def test_matmul_backward_rules():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    with GradTape() as tape:
        out = ad.sum_all(ad.matmul(a, b))
        tape.backward(out)
    g = np.ones((2, 2), dtype=np.float32)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_backward_identity_derivative():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        tape.backward(x)
    np.testing.assert_array_equal(x.grad, [1.0])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        y = ad.sum_all(ad.mul(x, x))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_dead_relu():
    x = Tensor([-1.0], requires_grad=True)
    with GradTape() as tape:
        y = ad.sum_all(ad.relu(x))
        tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_backward_twice_is_an_error():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        y = ad.sum_all(ad.mul(x, x))
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)
    tape.reset()  # reset clears the used flag


def test_detached_leaf_gets_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    d = Tensor([5.0, 5.0])  # detached
    with GradTape() as tape:
        y = ad.sum_all(ad.mul(x, d))
        tape.backward(y)
    assert d.grad is None
    np.testing.assert_allclose(x.grad, [5.0, 5.0])


def test_grad_accumulates_across_reuse():
    # y = x*x + x -> dy/dx = 2x + 1, exercised through two uses of x
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = ad.sum_all(ad.add(ad.mul(x, x), x))
        tape.backward(y)
    np.testing.assert_allclose(x.grad, [7.0])


def test_bias_add_broadcast_backward():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    with GradTape() as tape:
        y = ad.sum_all(ad.add(a, b))
        tape.backward(y)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])
    np.testing.assert_allclose(a.grad, np.ones((4, 3)))


def test_grad_check_linear_map_is_exact():
    # dyadic values + power-of-two eps make every f32 evaluation exact, so
    # the central difference of a linear map carries no error at all
    rng = np.random.default_rng(0)
    w = (rng.integers(-8, 9, size=(4, 3)) / 4.0).astype(np.float32)

    def fn(x):
        return ad.sum_all(ad.matmul(x, Tensor(w)))

    x = Tensor((rng.integers(-8, 9, size=(2, 4)) / 2.0), requires_grad=True)
    assert ad.grad_check(fn, x, eps=0.5) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_two_layer_net(seed):
    rng = np.random.default_rng(seed)
    w1 = Tensor(rng.normal(size=(5, 4)).astype(np.float32) * 0.5)
    b1 = Tensor(rng.normal(size=4).astype(np.float32) * 0.1)
    w2 = Tensor(rng.normal(size=(4, 1)).astype(np.float32) * 0.5)

    def fn(x):
        h = ad.relu(ad.add(ad.matmul(x, w1), b1))
        return ad.sum_all(ad.matmul(h, w2))

    x = rng.normal(size=(3, 5)).astype(np.float32)
    # keep inputs away from relu kinks so central differences are clean
    pre = x @ w1.data + b1.data
    while np.any(np.abs(pre) < 1e-2):
        x = rng.normal(size=(3, 5)).astype(np.float32)
        pre = x @ w1.data + b1.data
    assert ad.grad_check(fn, Tensor(x, requires_grad=True)) < 1e-3


def test_grad_check_rejects_zero_eps():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.sum_all(t), Tensor([1.0], requires_grad=True), eps=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=(8, 8)).astype(np.float32)) for _ in range(3))
    left = ad.matmul(ad.matmul(a, b), c).data
    right = ad.matmul(a, ad.matmul(b, c)).data
    denom = np.maximum(1.0, np.abs(left))
    assert np.max(np.abs(left - right) / denom) < 1e-4


def test_independent_subgraphs_backward_is_concatenation():
    # d(sum f(a) + sum g(b)) gives each leaf the grad it gets when run alone
    a = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    b = Tensor([[2.0, 0.5]], requires_grad=True)
    with GradTape() as tape:
        y = ad.add(ad.sum_all(ad.mul(a, a)), ad.sum_all(ad.relu(b)))
        tape.backward(y)
    ga, gb = a.grad.copy(), b.grad.copy()

    a2 = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        tape.backward(ad.sum_all(ad.mul(a2, a2)))
    b2 = Tensor([[2.0, 0.5]], requires_grad=True)
    with GradTape() as tape:
        tape.backward(ad.sum_all(ad.relu(b2)))
    np.testing.assert_array_equal(ga, a2.grad)
    np.testing.assert_array_equal(gb, b2.grad)


def test_ops_without_tape_do_not_record():
    x = Tensor([1.0], requires_grad=True)
    y = ad.mul(x, x)
    assert y.grad is None and x.grad is None
