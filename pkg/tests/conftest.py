"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest
import torch

from tempretinex.data_io import Frame, FrameSequence


def random_image(rng, h=16, w=16, low=0.0, high=1.0):
    """Random float32 HxWx3 array in [low, high]."""
    return (low + (high - low) * rng.random((h, w, 3))).astype(np.float32)


def random_tensor(rng, n=1, c=3, h=16, w=16, low=0.0, high=1.0):
    arr = low + (high - low) * rng.random((n, c, h, w))
    return torch.from_numpy(arr.astype(np.float32))


def make_sequence(rng, n_frames=3, h=16, w=16, name="seq"):
    frames = [Frame(random_image(rng, h, w), index=i) for i in range(n_frames)]
    return FrameSequence(name, frames)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    # keep runs deterministic and cheap on shared CI boxes
    torch.set_num_threads(1)
    yield
