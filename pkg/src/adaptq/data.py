"""The desk task: three interleaved noisy spirals in the plane."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 3


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def head(self, n: int) -> "Split":
        return Split(self.x[:n], self.y[:n])


@dataclass
class DeskTask:
    train: Split
    val: Split
    test: Split


def spirals(n: int, rng: np.random.Generator, noise: float = 0.04, turns: float = 1.25) -> Split:
    """``n`` points, classes balanced up to one point, order shuffled.

    Class ``c`` follows ``r = t``, ``theta = 2*pi*(turns*t + c/3)`` for
    ``t ~ U(0.05, 1)``, plus isotropic Gaussian noise of std ``noise``.
    """
    y = np.arange(n) % N_CLASSES
    t = rng.uniform(0.05, 1.0, size=n)
    theta = 2 * np.pi * (turns * t + y / N_CLASSES)
    x = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
    x = x + rng.normal(0.0, noise, size=x.shape)
    perm = rng.permutation(n)
    return Split(x[perm], y[perm].astype(np.int64))


def desk_task(
    seed: int = 0, n_train: int = 3000, n_val: int = 500, n_test: int = 1000, noise: float = 0.04
) -> DeskTask:
    rng = np.random.default_rng(seed)
    train = spirals(n_train, rng, noise)
    val = spirals(n_val, rng, noise)
    test = spirals(n_test, rng, noise)
    return DeskTask(train, val, test)
