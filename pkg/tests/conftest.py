import numpy as np
import pytest
import torch

from twsc.config import ExperimentConfig
from twsc.data import Dataset, synthesize_digit_images, write_synthetic_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """512 train / 128 test synthetic digits, in memory."""
    train, _ = synthesize_digit_images(512, seed=100)
    test, _ = synthesize_digit_images(128, seed=101)
    return Dataset.from_arrays(train, test, tag="unit")


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """A canonical-size synthetic corpus on disk (ingestable)."""
    out = tmp_path_factory.mktemp("corpus")
    write_synthetic_corpus(out, seed=7)
    return out


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """Fast two-way config for unit tests of the training loop."""
    return ExperimentConfig().replace(batch_size=16, epochs=1, train_subset=32,
                                      epoch_eval_images=0)


def rand_images(n: int, side: int = 28, seed: int = 0) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.uniform(0.0, 1.0, size=(n, side, side, 1)).astype(np.float32)
