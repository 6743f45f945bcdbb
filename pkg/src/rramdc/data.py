"""Desk-scale classification data.

The default task is scikit-learn's bundled 8x8 handwritten digits (1797
images, 10 classes), split 80/20 with a fixed stratified shuffle and
standardized with training-set statistics. It ships with scikit-learn, so
runs need no download.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    name: str = "digits"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_test[:n_test], self.y_test[:n_test], self.name)


def load_digits(split_seed: int = 0, test_fraction: float = 0.2) -> Dataset:
    from sklearn.datasets import load_digits as _load
    from sklearn.model_selection import train_test_split

    raw = _load()
    x = raw.images.astype(np.float64)[:, None, :, :] / 16.0
    y = raw.target.astype(np.int64)
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_fraction, random_state=split_seed, stratify=y)
    mean, std = x_tr.mean(), x_tr.std()
    return Dataset((x_tr - mean) / std, y_tr, (x_te - mean) / std, y_te, "digits")


def synthetic(n_train: int = 256, n_test: int = 128, shape=(1, 8, 8), classes: int = 10, seed: int = 0) -> Dataset:
    """Gaussian class-prototype images; cheap stand-in for unit tests."""
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((classes,) + tuple(shape))

    def draw(n):
        y = rng.integers(0, classes, n)
        return protos[y] + 0.8 * rng.standard_normal((n,) + tuple(shape)), y

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    return Dataset(xtr, ytr, xte, yte, "synthetic")


DATASETS = {"digits": load_digits, "synthetic": synthetic}


def get_dataset(name: str) -> Dataset:
    try:
        return DATASETS[name]()
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield mini-batches, shuffled when ``rng`` is given. Trailing singleton batches are dropped."""
    idx = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
    for start in range(0, len(x), batch_size):
        sel = idx[start : start + batch_size]
        if len(sel) < 2:
            break
        yield x[sel], y[sel]
