import os

import numpy as np
import pytest
import torch

from ssc import data, superpixel

os.environ.setdefault("SSC_NUM_THREADS", str(min(4, os.cpu_count() or 1)))
torch.set_num_threads(min(4, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Eight 64x64 images, 3 classes, with masks and a superpixel cache."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    data.generate_synthetic_corpus(root, 8, 3, 64, seed=11)
    cache = root / "superpixels"
    cache.mkdir()
    for item in data.load_corpus(root):
        superpixel.save_superpixels(cache / f"{item.id}.sps", superpixel.segment_image(item.image))
    return root


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))
