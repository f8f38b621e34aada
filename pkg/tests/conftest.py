import numpy as np
import pytest

from casplab import tensor as T
from casplab.rng import Rng
from casplab.vit import VitConfig, init_backbone

TINY = VitConfig(image_size=8, patch_size=4, channels=1, dim=8, depth=2, heads=2, mlp_ratio=2)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_backbone():
    return init_backbone(TINY, Rng(0, "init"))


@pytest.fixture
def micro_cfg():
    return VitConfig()


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def rand_images(n, cfg, seed=0):
    return Rng(seed, "images").uniform((n, cfg.channels, cfg.image_size, cfg.image_size), -1.0, 1.0)


SMALL_RUN = {
    "data": {"classes": 14, "per_class": 12, "size": 16, "source_classes": 4},
    "protocol": {"pretrain_count": 4, "base_count": 4, "sessions": 2, "ways": 3, "shots": 3},
    "model": {"image_size": 16, "patch_size": 8, "dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
    "pretrain": {"epochs": 2, "batch_size": 16},
    "train": {"epochs": 2, "batch_size": 8},
    "mtm": {"split_layer": 1},
}


def small_config(**sections):
    """Default config shrunk to a seconds-scale run, with optional section overrides."""
    from casplab.config import default_config, merge_config

    cfg = merge_config(default_config(), SMALL_RUN)
    return merge_config(cfg, sections) if sections else cfg


@pytest.fixture(scope="session")
def small_setup():
    """Dataset, resolved config and a pretrained backbone for the small run."""
    from casplab.config import resolve
    from casplab.harness.experiment import build_dataset, pretrain

    res = resolve(small_config(), 0)
    ds = build_dataset(res)
    return ds, res, pretrain(ds, res)
