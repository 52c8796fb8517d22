import os

# single-threaded BLAS keeps every numeric path bit-deterministic
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from sparsespike.data import make_glyphs
from sparsespike.network import AnnModel, NetworkSpec, Linear, Relu, preset_convnet
from sparsespike.tensor import Rng, Tensor


@pytest.fixture(scope="session")
def glyphs_small():
    return make_glyphs(0, 400, classes=4, size=16)


@pytest.fixture()
def rng():
    return Rng(0)


@pytest.fixture()
def tiny_mlp_spec():
    return NetworkSpec([Linear(2, bias=False), Relu(), Linear(2, bias=False)], (2,), 2)


def make_tiny_snn_fixture(seed=0, vth=0.9):
    """2-neuron, 2-layer spiking toy shared across BPTT oracle tests."""
    from sparsespike.snn import SnnModel

    spec = NetworkSpec([Linear(2, bias=False), Relu(), Linear(2, bias=False)], (2,), 2)
    gen = np.random.default_rng(seed)
    params = {
        "layer0.weight": Tensor(gen.normal(0, 1.2, (2, 2)).astype(np.float32), requires_grad=True),
        "layer2.weight": Tensor(gen.normal(0, 1.0, (2, 2)).astype(np.float32), requires_grad=True),
    }
    thresholds = {"vth0": Tensor(np.float32(vth), requires_grad=True)}
    return SnnModel(spec, params, {}, thresholds)


@pytest.fixture(scope="session")
def trained_convnet(glyphs_small):
    """A briefly trained dense glyph classifier reused by heavier tests."""
    from sparsespike.train import TrainConfig, pretrain_robust_ann

    model = AnnModel.initialize(preset_convnet((1, 16, 16), 4), Rng(11).spawn("init"))
    cfg = TrainConfig(epochs=3, batch_size=64, lr=0.05, loss="ce", schedule="cosine")
    pretrain_robust_ann(model, glyphs_small.x, glyphs_small.y, cfg, Rng(11))
    return model
