import numpy as np
import pytest

from networks import DiscriminatorArch, GeneratorArch
from spcyclegan_core import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_train_config():
    """Small networks and patches so a training run finishes in seconds on CPU."""
    return TrainConfig(
        epochs_const=1,
        epochs_decay=1,
        patch_sizes={"xy": (16, 16), "xz": (16, 16), "yz": (16, 16)},
        generator=GeneratorArch(ngf=4, n_blocks=1, n_downsampling=2),
        discriminator=DiscriminatorArch(ndf=4, n_layers=2),
        pool_size=4,
        checkpoint_every=1,
        seed=7,
    )
