import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cisformer.config import config_from_dict, deep_update  # noqa: E402

TINY = {
    "model": {
        "embed_dim": 32,
        "num_queries": 6,
        "backbone_channels": [8, 16, 32, 32],
        "encoder": {"num_layers": 1, "num_heads": 4, "num_sampling_points": 2, "embed_dim": 32, "ffn_dim": 64},
        "decoder": {"num_heads": 4, "ffn_dim": 64},
    },
    "optimizer": {"iterations": 4, "batch_size": 2, "checkpoint_every": 2, "lr": 1e-3},
    "loss": {"num_points": 64},
    "data": {"num_train": 4, "num_val": 2, "synthetic": {"image_size": 64}},
}


def tiny_dict(**delta) -> dict:
    return deep_update(TINY, delta)


@pytest.fixture
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield
