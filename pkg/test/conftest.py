import os
import sys

import numpy as np
import pytest
import torch

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir))

for relative in ("common", "pdg-check", "tools"):
    path = os.path.join(BASE_DIR, relative)
    if path not in sys.path:
        sys.path.insert(0, path)

from domain_data import DomainData  # noqa: E402
from kernel import KernelConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return KernelConfig()


@pytest.fixture
def two_domains(rng):
    """Two small labelled domains, three classes, both containing every class"""

    domains = []
    for domain_id in range(2):
        labels = rng.permutation(np.arange(12) % 3)
        features = rng.normal(size=(12, 4)) + 0.5 * domain_id
        domains.append(DomainData(domain_id, features, labels))
    return domains


@pytest.fixture(autouse=True)
def _torch_seed():
    # parameter initialization in tests that build networks directly
    torch.manual_seed(0)


# three 2-d domains of 12 samples and a network small enough for a few seconds of training
TINY_CONFIG = {
    "data": {
        "synthetic": {
            "n_domains": 3,
            "n_classes": 2,
            "dim": 2,
            "samples_per_domain": 12,
            "transforms": [{"rotation": 0.0}, {"rotation": 0.3}, {"rotation": 0.6}],
        }
    },
    "model": {"hidden": [4], "latent": 3, "metric_hidden": [3], "metric_out": 2},
    "train": {
        "iterations": 3,
        "batch_per_domain": 4,
        "n_pairs": 2,
        "pretrain_iterations": 5,
        "learning_rate": 0.001,
        "weights": {"t_passes": 2},
    },
    "held_out_domain": 2,
}


@pytest.fixture
def tiny_config():
    from experiment import config_from_dict

    return config_from_dict(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path):
    import yaml

    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path
