"""Small networks and synthetic data shared by the unit tests."""

from __future__ import annotations

import numpy as np

from admmprune import nn
from admmprune.data import Dataset

TOY = nn.Architecture(input_shape=(1, 10, 10), conv=((4, 3), (6, 3)), dense=(8,), num_classes=3)


def toy_data(n=48, seed=0):
    """Three-class problem: the label counts how many image halves have a positive sum."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 10, 10))
    y = (x[:, 0, :5].sum(axis=(1, 2)) > 0).astype(int) + (x[:, 0, 5:].sum(axis=(1, 2)) > 0)
    return Dataset(x, y)
