import math

import numpy as np
import pytest

from mixrank import autodiff as ad
from mixrank.autodiff import Tensor
from mixrank.errors import ContractError, NumericError, ShapeError

from conftest import assert_grad_close, fd_grad


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_zeros_annihilate(self, rng):
        z = Tensor(np.zeros((2, 3)))
        b = Tensor(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal((z @ b).data, np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_backward_formulas(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(Tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])

    def test_closed_form(self):
        out = Tensor([math.log(3.0), 0.0]).softmax()
        np.testing.assert_allclose(out.data, [0.75, 0.25], rtol=1e-12)

    def test_no_overflow(self):
        out = Tensor([1000.0, 0.0]).softmax()
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(scale=5.0, size=(4, 7)))
        sums = x.softmax().data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        shifted = x + rng.normal(size=(3, 1))
        np.testing.assert_allclose(Tensor(x).softmax().data,
                                   Tensor(shifted).softmax().data, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_power_rule(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_accumulation_without_zeroing(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x).sum().backward()
        first = x.grad.copy()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_idempotent_with_zeroing(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x).sum().backward()
        first = x.grad.copy()
        x.zero_grad()
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_composite_matches_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

        def loss():
            h = (Tensor(x.data) @ Tensor(w.data)).softmax()
            return float((h * h).sum().data)

        out = (x @ w).softmax()
        (out * out).sum().backward()
        assert_grad_close(x.grad, fd_grad(loss, x.data))
        assert_grad_close(w.grad, fd_grad(loss, w.data))


def _gradcheck(build, *leaves):
    """Backward grads of build(*leaves) vs central finite differences."""
    build(*leaves).backward()
    for leaf in leaves:
        numeric = fd_grad(lambda: float(build(*leaves).data), leaf.data)
        assert leaf.grad is not None
        assert_grad_close(leaf.grad, numeric)
        leaf.zero_grad()


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.swapaxes(-1, -2)).sum(),
    "softmax": lambda a, b: ((a.softmax() * b)).sum(),
    "exp": lambda a, b: (a.exp() * b).sum(),
    "sigmoid": lambda a, b: (a.sigmoid() * b).sum(),
    "tanh": lambda a, b: (a.tanh() * b).sum(),
    "silu": lambda a, b: (ad.silu(a) * b).sum(),
    "gelu": lambda a, b: (ad.gelu(a) * b).sum(),
    "narrow": lambda a, b: (a.narrow(-1, 1, 3) * b.narrow(-1, 0, 3)).sum(),
    "concat": lambda a, b: (ad.concat([a, b], axis=0).softmax()).sum(axis=0).mean(),
    "reshape": lambda a, b: (a.reshape(-1) * b.reshape(-1)).sum(),
    "mean": lambda a, b: (a.mean(axis=-1) * b.mean(axis=-1)).sum(),
    "clamp": lambda a, b: ((a.clamp_min(0.1) * b).sum()),
    "sqrt": lambda a, b: ((a * a + 1.0).sqrt() * b).sum(),
    "log": lambda a, b: ((a * a + 0.5).log() * b).sum(),
    "pow": lambda a, b: ((a * a + 0.3).pow(-0.5) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_check_per_op(name, rng):
    # extents <= 6, double precision, rel err < 1e-6
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    _gradcheck(OPS[name], a, b)


def test_gradient_check_embedding(rng):
    table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    ids = np.array([0, 2, 2, 5])

    def build(t):
        return (ad.embedding(t, ids).softmax()).sum(axis=0).mean()

    _gradcheck(build, table)


def test_gradient_check_broadcast_ops(rng):
    a = Tensor(rng.normal(size=(3, 1, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    _gradcheck(lambda x, y: (x * y + x / (y * y + 2.0)).sum(), a, b)


def test_gradient_check_batched_matmul(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    _gradcheck(lambda x, y: ((x @ y).softmax()).sum(), a, b)


def test_embedding_rejects_out_of_vocab(rng):
    table = Tensor(rng.normal(size=(4, 3)))
    with pytest.raises(ShapeError):
        ad.embedding(table, [0, 4])


def test_cosine_similarity_values(rng):
    a = Tensor([[1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(
        ad.cosine_similarity(a, a).data, [1.0, 1.0], rtol=1e-12)
    b = Tensor([[0.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_allclose(
        ad.cosine_similarity(a, b).data, [0.0, -1.0], atol=1e-12)
    with pytest.raises(NumericError):
        ad.cosine_similarity(a, Tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_non_finite_forward_is_error():
    with pytest.raises(NumericError):
        Tensor([1.0, np.inf])
    with pytest.raises(NumericError):
        Tensor([800.0]).exp()  # overflows double


def test_backward_visits_shared_subgraph_once(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = x * 2.0
    (y + y).sum().backward()  # diamond: grad must be 4, not 8
    np.testing.assert_allclose(x.grad, np.full(3, 4.0))


@pytest.mark.parametrize("seed", range(5))
def test_random_op_chain_matches_fd(seed):
    """Fuzz: a random composition of ops gradient-checks against FD."""
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    steps = [
        lambda t: t.softmax(),
        lambda t: ad.silu(t),
        lambda t: t.tanh(),
        lambda t: (t * t + 0.7).log(),
        lambda t: t.sigmoid(),
        lambda t: t * 1.5 - 0.3,
    ]
    picks = [int(i) for i in rng.integers(0, len(steps), size=4)]

    def build(x, y):
        t = x @ y  # (3, 3)
        for i in picks:
            t = steps[i](t)
        return (t * t).sum(axis=-1).mean()

    build(a, b).backward()
    for leaf in (a, b):
        numeric = fd_grad(lambda: float(build(a, b).data), leaf.data)
        assert_grad_close(leaf.grad, numeric, rtol=1e-5, atol=1e-8)
        leaf.zero_grad()
