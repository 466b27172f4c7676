import numpy as np
import pytest
import torch

# Single-threaded torch keeps reductions deterministic run to run.
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
