import os
import sys

import pytest
import yaml

sys.path.insert(0, os.path.dirname(__file__))

TINY = {
    "seed": 3,
    "synthetic": {"n_subjects": 8, "R": 8, "T": 70, "n_sites": 2},
    "window": {"window_length": 20, "stride": 10},
    "walk": {"l_max": 5, "walks_per_node": 2},
    "encoder": {"d": 8, "heads": 2, "layers": 1},
    "train": {"epochs": 1, "lr": 0.01, "batch_size": 16},
    "eval": {"protocol": "stratified2"},
    "plots": False,
}


@pytest.fixture
def tiny_config(tmp_path):
    """Path to a seconds-scale synthetic pipeline config."""
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path
