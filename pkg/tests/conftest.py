from __future__ import annotations

import numpy as np
import pytest

from floodlora import tensor as T
from floodlora.data import SynthConfig, generate_synthetic
from floodlora.model import EncoderConfig
from floodlora.tensor import Tensor

from oracles import central_difference, relative_error, sample_indices

GRAD_SEEDS = range(20)
GRAD_TOL = 1e-4

# small but structurally complete encoder for fast model tests
TINY = EncoderConfig(d_model=16, n_heads=2, n_layers=2, patch_size=8, in_channels=4, image_size=32)


def gradcheck(fn, arrays, seed=0, n_coords=None, tol=GRAD_TOL):
    """Compare reverse-mode gradients of ``sum(fn(*xs) * R)`` with central differences.

    Returns the worst relative error over all inputs; ``n_coords`` samples that
    many coordinates per input instead of checking all of them.
    """
    rng = np.random.default_rng(10_000 + seed)
    xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*xs)
    weights = rng.normal(size=out.shape)
    T.backward(T.tsum(T.mul(out, weights)))

    def value():
        with T.no_grad():
            return float(np.sum(fn(*xs).data * weights))

    worst = 0.0
    for x in xs:
        idx = sample_indices(x.shape, n_coords, rng)
        num = np.array([central_difference(value, x.data, i) for i in idx])
        ana = np.array([x.grad[i] for i in idx])
        worst = max(worst, relative_error(ana, num, np.abs(x.grad).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    return generate_synthetic(SynthConfig(image_size=32, n_train=8, n_val=4, n_test=4, n_ood=4, seed=3), root)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_ds")
    return generate_synthetic(SynthConfig(n_train=16, n_val=8, n_test=8, n_ood=8, seed=11), root)
