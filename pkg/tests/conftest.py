import numpy as np
import pytest

from gla.tensor import Tensor, backward


def numeric_grad(f, arr, h=1e-6):
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, n, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(build, tensors, h=1e-6, floor=1e-8):
    """Max elementwise relative error between autodiff and finite differences.

    ``build()`` returns the scalar loss Tensor from the current tensor values.
    ``floor`` bounds the denominator so entries near zero are judged on the
    finite-difference round-off scale rather than on their own magnitude.
    """
    for t in tensors:
        t.grad = None
    backward(build())
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, float(rel_error(ana, num, floor).max()))
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """A 2-frames-per-cell dataset (16 frames) for end-to-end tests."""
    from gla.config import ExperimentConfig
    from gla.experiment import generate

    root = tmp_path_factory.mktemp("tiny_data")
    cfg = ExperimentConfig(frames_per_cell=2, test_fraction=0.5)
    generate(cfg, root)
    return root


@pytest.fixture(scope="session")
def default_data(tmp_path_factory):
    """The dataset produced by the default configuration."""
    from gla.config import ExperimentConfig
    from gla.experiment import generate

    root = tmp_path_factory.mktemp("default_data")
    generate(ExperimentConfig(), root)
    return root
