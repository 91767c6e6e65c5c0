import numpy as np
import pytest

from evocast import tensor as T


def numeric_grad(loss_fn, param, h=1e-5):
    """Central finite differences of a scalar-valued closure w.r.t. one tensor."""
    grad = np.zeros(param.data.size)
    for i in range(param.data.size):
        idx = np.unravel_index(i, param.data.shape)
        orig = param.data[idx]
        param.data[idx] = orig + h
        lp = loss_fn().item()
        param.data[idx] = orig - h
        lm = loss_fn().item()
        param.data[idx] = orig
        grad[i] = (lp - lm) / (2.0 * h)
    return grad.reshape(param.data.shape)


def grad_check(loss_fn, params, tol=1e-4, h=1e-5):
    """Compare tape gradients of ``loss_fn`` against finite differences.

    ``loss_fn`` must be a pure closure over ``params`` returning a scalar
    Tensor; it is re-invoked for the numeric side with no tape active.
    Returns the worst relative error seen.
    """
    T.zero_grads(params)
    with T.Tape() as tape:
        tape.backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(loss_fn, p, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 0.1)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.3e} on param shape {p.shape}"
    T.zero_grads(params)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
