import numpy as np
import pytest

from esa import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar `f` with respect to array `x` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f()
        flat[k] = orig - h
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return g


def fd_error(ad: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))


def check_op_grad(build, *arrays, h=1e-5, tol=1e-5, seed=0):
    """Compare tape gradients of ``sum(w * build(*tensors))`` with finite differences."""
    tensors = [T.Parameter(a, name=f"a{i}") for i, a in enumerate(arrays)]
    with T.Tape():
        out = build(*tensors)
        w = np.random.default_rng(seed).normal(size=out.shape)
        loss = (out * T.Tensor(w)).sum()
        grads = T.backward(loss, tensors)

    def value():
        return float(np.sum(build(*[T.Tensor(t.data) for t in tensors]).data * w))

    return max(fd_error(grads[t.name], numeric_grad(value, t.data, h)) for t in tensors)
