import os
from pathlib import Path

import numpy as np
import pytest

from medusa_lab import campaign as camp
from medusa_lab.numkit import Rng

REPO = Path(__file__).resolve().parents[1]
# trained encoders are cached here between test runs (keyed by spec hash)
CACHE = Path(os.environ.get("MEDUSA_LAB_TEST_CACHE", REPO / ".cache" / "encoders"))

TINY = {
    "corpus": {"height": 16, "width": 16, "blob_radius": [2.0, 3.0]},
    "encoders": [
        {"name": "a", "seed": 1, "hidden": 32, "patch": 4, "n_per_class": 40, "epochs": 200,
         "min_accuracy": 0.0},
        {"name": "b", "seed": 2, "hidden": 40, "patch": 4, "n_per_class": 40, "epochs": 200,
         "min_accuracy": 0.0},
        {"name": "c", "seed": 3, "hidden": 32, "patch": 2, "n_per_class": 40, "epochs": 200,
         "min_accuracy": 0.0},
        {"name": "g", "seed": 4, "tag": "general", "hidden": 32, "patch": 4, "n_per_class": 20,
         "epochs": 200, "min_accuracy": 0.0},
    ],
    "victims": ["a", "b"],
    "test_surrogates": ["c"],
    "kb_per_class": 20,
    "n_attack": 6,
    "target_pool_size": 6,
    "n_eval_per_class": 10,
    "eps_list": [8 / 255, 16 / 255],
    "headline_eps": 16 / 255,
    "attack": {"t_out": 2, "t_in": 2, "k_targets": 3},
    "seed": 5,
}


def tiny_config(**overrides):
    d = {**TINY, **overrides}
    return camp.CampaignConfig.from_dict(d)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_world(tiny_cfg, tmp_path_factory):
    return camp.build_world(tiny_cfg, tmp_path_factory.mktemp("tiny-encoders"))


@pytest.fixture(scope="session")
def tiny_campaign(tiny_cfg, tiny_world, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny-campaign")
    return camp.run_campaign(tiny_cfg, out, world=tiny_world), out


@pytest.fixture
def rng(request):
    return Rng(1234).child(request.node.name)


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
