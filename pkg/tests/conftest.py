import numpy as np
import pytest

from scripts.phantom import PhantomSpec, generate_dataset, generate_phantom
from scripts.tensor_engine import Tape, Tensor, backward

FD_STEP = 1e-5


def numeric_grad(fn, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar fn(arr) with respect to every entry of arr."""
    arr = np.array(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        plus = fn(arr.copy())
        arr[idx] = orig - h
        minus = fn(arr.copy())
        arr[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(build, *arrays):
    """
    build(*tensors) -> scalar Tensor. Returns the tape gradient for each array.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    backward(loss, tape)
    return [t.grad for t in tensors]


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    yield np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    yield PhantomSpec(dims=(16, 64, 64), seed=3)


@pytest.fixture
def small_phantom(small_spec):
    yield generate_phantom(small_spec)


@pytest.fixture
def tmp_dataset(tmp_path, small_spec):
    out = tmp_path / "data"
    generate_dataset(5, out, small_spec, seed=11)
    yield out
