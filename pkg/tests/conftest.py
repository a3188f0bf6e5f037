import numpy as np
import pytest
import torch

from lcseg import ModelConfig, TrainConfig, train
from lcseg.synth import PhantomConfig, build_cohort

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cohort():
    """7 cases, 3 flat classes, 32^3: shared by training/inference/CLI tests."""
    cfg = PhantomConfig(grid=(32, 32, 32), n_coarse=3, seed=5)
    return build_cohort(cfg, 7, (3, 1, 1, 2), repeats=1)


@pytest.fixture(scope="session")
def fine_cohort():
    """4 cases with a 2-coarse / 2-children-each hierarchy."""
    cfg = PhantomConfig(grid=(32, 32, 32), n_coarse=2, fine_split={1: 2, 2: 2}, seed=9)
    return build_cohort(cfg, 4, (1, 1, 1, 1), repeats=1)


def _quick_train(cohort, head, epochs=3, seed=2):
    split = cohort.splits[0]
    ids = tuple(cohort.class_ids())
    mcfg = ModelConfig((32, 32, 32), head,
                       out_channels=len(ids) if head == "baseline" else 1, seed=1)
    tcfg = TrainConfig(epochs=epochs, head=head, lr=1e-3, seed=seed, val_interval=2,
                       class_ids=ids)
    return train(tcfg, mcfg, cohort, split)


@pytest.fixture(scope="session")
def lcs_checkpoint(small_cohort):
    """A briefly trained conditioned-head checkpoint (not converged)."""
    return _quick_train(small_cohort, "lcs")


@pytest.fixture(scope="session")
def baseline_checkpoint(small_cohort):
    return _quick_train(small_cohort, "baseline")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
