"""Synthetic streams used by the shipped configs and the test-suite."""

from __future__ import annotations

import numpy as np


def two_blobs(n: int, *, seed: int = 0, separation: float = 6.0, scale: float = 1.0, dim: int = 2):
    """Two isotropic Gaussian blobs with one labeled example each.

    Returns ``(points, train_labels, true_labels)``. The first two rows are
    the labeled seeds (class ``"pos"`` then ``"neg"``); every other row has
    training label None. Classes alternate so both blobs fill evenly.
    """
    rng = np.random.default_rng(seed)
    centers = np.zeros((2, dim))
    centers[0, 0] = -separation / 2
    centers[1, 0] = separation / 2
    classes = np.arange(n) % 2
    points = centers[classes] + scale * rng.standard_normal((n, dim))
    points[:2] = centers[:2]
    truth = ["pos" if c == 0 else "neg" for c in classes]
    train = [truth[i] if i < 2 else None for i in range(n)]
    return points, train, truth
