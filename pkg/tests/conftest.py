from dataclasses import dataclass

import numpy as np
import pytest

from stprompt.backbone import BackboneConfig, BackboneModel
from stprompt.pipeline.phases import ForecastTask, TrainConfig, pretrain
from stprompt.shiftlab.synthetic import SyntheticSpec, gen_synthetic
from stprompt.stdata import normalize, split_chronological

TINY = dict(n_nodes=4, d_hidden=8, d_skip=8, d_embed=4, layers=1)


def make_task(n_nodes=4, n_steps=700, tun_tail=150, seed=0, noise=0.05):
    data, _ = gen_synthetic(SyntheticSpec(n_nodes=n_nodes, n_steps=n_steps, period=24, noise_std=noise, seed=seed))
    norm = normalize(data)
    splits = split_chronological(n_steps, tun_tail=tun_tail)
    return ForecastTask(norm.data, norm.data, splits, norm.mean, norm.std)


@dataclass
class Trained:
    task: ForecastTask
    model: BackboneModel
    result: object


@pytest.fixture(scope="session")
def trained():
    task = make_task()
    model = BackboneModel(BackboneConfig(**TINY), seed=0)
    cfg = TrainConfig(lr=1e-2, epochs=12, patience=4, optimizer="adam", curriculum=False)
    return Trained(task, model, pretrain(model, task, cfg))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
