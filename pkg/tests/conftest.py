import numpy as np
import pytest

from pylonloc import tensor_ops as T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grad_check(fn, arrays, rng, h=1e-5):
    """Max relative error between analytic and central-difference gradients of sum(fn(*arrays) * R)."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = fn(*[T.Tensor(a) for a in arrays])
    weights = rng.normal(size=out.shape)
    params = [T.Param(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    T.sum_all(T.mul(fn(*params), T.Tensor(weights))).backward()
    errors = []
    for i, p in enumerate(params):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return float((fn(*[T.Tensor(a) for a in args]).data * weights).sum())

        numeric = T.finite_difference_gradient(f, arrays[i].copy(), h)
        errors.append(T.relative_error(p.grad, numeric))
    return max(errors)


def circular_shift(x, dy, dx):
    return np.roll(x, (dy, dx), axis=(-2, -1))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
