import numpy as np
import pytest


def fd_grad(loss_fn, data: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of `loss_fn()` w.r.t. `data`, mutated in place."""
    grad = np.zeros_like(data)
    flat = data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = loss_fn()
        flat[i] = saved - eps
        down = loss_fn()
        flat[i] = saved
        grad_flat[i] = (up - down) / (2.0 * eps)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-6, atol: float = 1e-8) -> None:
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
