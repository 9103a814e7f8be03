import numpy as np
import pytest
import torch

from imdistill.datasets import build_double_colored_mnist, write_synthetic_mnist


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_mnist(tmp_path_factory):
    """Synthetic IDX source plus a double-colored build of it."""
    root = tmp_path_factory.mktemp("mnist")
    write_synthetic_mnist(root / "idx", n_train=600, n_test=200, seed=0)
    manifest = build_double_colored_mnist(root / "idx", seed=0, out_dir=root / "colored")
    return root / "idx", manifest
