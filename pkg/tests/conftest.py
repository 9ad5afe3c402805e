"""Session fixtures: one small trained model shared by pipeline-level tests."""

import sys
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acprank.data import generate_synthetic
from acprank.model import ACPConfig, ACPModel
from acprank.train import TrainConfig, train

SMALL_BLOCKS = (8, 12, 16)


def train_small_model(train_set, seed=0, use_refinement=True, epochs=25):
    model = ACPModel(
        ACPConfig(block_dims=SMALL_BLOCKS, d=32, h=4, n_layers=2, n_mem=4,
                  p_d=0.1, p_attn=0.1, use_refinement=use_refinement),
        seed=seed)
    cfg = TrainConfig(K=100, l1=12, l2=4, gamma=1.0, lr=1e-3, weight_decay=5e-4,
                      warmup_epochs=3, warmup_factor=0.1, epochs=epochs,
                      batch_size=32, seed=seed)
    result = train(model, train_set, cfg)
    return model, result


@pytest.fixture(scope="session")
def small_bench():
    """Small trained setup: 30 train / 20 test identities, 8 images each."""
    train_set, query, gallery = generate_synthetic(
        30, 20, 8, n_cameras=4, block_dims=SMALL_BLOCKS, intra_noise=0.3,
        distractor_rate=0.2, seed=0)
    model, result = train_small_model(train_set, seed=0)
    return SimpleNamespace(train=train_set, query=query, gallery=gallery,
                           model=model, train_result=result)
