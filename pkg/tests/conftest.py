import numpy as np
import pytest
import torch

from replaytriplet.buffer import ReplayBuffer
from replaytriplet.gridworld import GridSpec
from replaytriplet.latentmodel import EncoderDecoder

# 8x8 images: one square of 2px moving 2px over 4 cells
TINY_SPEC = GridSpec(num_squares=1, square_size_px=2, step_px=2, grid_cells_per_axis=4, image_side_px=8)


def make_tiny_model(latent_dim=2, seed=0, dtype=torch.float64) -> EncoderDecoder:
    torch.manual_seed(seed)
    model = EncoderDecoder(image_side=8, in_channels=1, latent_dim=latent_dim, conv_channels=(4, 4), hidden_dim=16)
    # perturb the log-std head so gradient checks exercise it
    with torch.no_grad():
        model.log_std_head.weight.normal_(0, 0.1)
        model.log_std_head.bias.normal_(0, 0.1)
    return model.to(dtype)


@pytest.fixture
def tiny_spec():
    return TINY_SPEC


@pytest.fixture
def tiny_model():
    return make_tiny_model()


def buffer_from_states(spec, states):
    states = np.asarray(states).reshape(len(states), spec.num_squares, 2)
    n = len(states)
    return ReplayBuffer(spec, states, np.zeros(n), -np.ones(n), states, np.zeros(n, dtype=int), np.arange(n))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
