import json

import numpy as np
import pytest

from craniopy.config import build_config
from craniopy.synthetic import generate_synthetic, write_synthetic

# small but complete pipeline settings shared by the fast tests
SMALL_CONFIG = {
    "d_feat": 8,
    "d_g": 8,
    "hidden": 8,
    "d_embed": 8,
    "heads": 2,
    "k": 2,
    "batch_size": 4,
    "epochs": 2,
    "sinkhorn_iters": 20,
    "learning_rate": 1e-3,
}


def record_dict(identity, modality="A", view="front", n=4, split="train", width=100, height=100, **extra):
    data = {
        "id": identity,
        "modality": modality,
        "view": view,
        "split": split,
        "width": width,
        "height": height,
        "landmarks": [[5.0 * (i + 1), 3.0 * (i + 1), 1] for i in range(n)],
    }
    data.update(extra)
    return data


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return build_config(SMALL_CONFIG)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    """8 identities, 5 landmarks, d_feat = d_g = 8; 6 train and 2 val identities."""
    out = tmp_path_factory.mktemp("synthetic")
    data = generate_synthetic(8, 5, 8, seed=3, cross_modal_noise=0.05, d_g=8)
    write_synthetic(data, out, counts=(6, 2, 0), seed=3)
    return out
