import numpy as np
import pytest
import torch

from rladlab.codec import CodecTrainConfig, train_codec
from rladlab.toydata import make_dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small source dataset shared by model-level tests."""
    root = tmp_path_factory.mktemp("data") / "source"
    return make_dataset(150, (0.8, 0.1, 0.1), "source", root, seed=101)


@pytest.fixture(scope="session")
def tiny_shifted(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "shifted"
    return make_dataset(24, (0.0, 0.0, 1.0), "shifted", root, seed=202)


@pytest.fixture(scope="session")
def tiny_codec(tiny_dataset, tmp_path_factory):
    """Quickly trained codec for mechanics tests (quality floor disabled;
    the 28 dB contract is exercised by the acceptance pipeline's codec)."""
    out = tmp_path_factory.mktemp("codec") / "codec.pt"
    cfg = CodecTrainConfig(epochs=3, lr=1e-3, seed=0, min_psnr=0.0, include_layout_renders=False)
    return train_codec(tiny_dataset, cfg, out=out)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
