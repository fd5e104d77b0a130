"""Batch-means estimators shared by the sampling, moment and ensemble code."""

import numpy as np

N_BATCHES = 20


def batch_slices(n_points, n_batches=N_BATCHES):
    """Contiguous, near-equal batch boundaries (fixed for a given size)."""
    n_batches = max(1, min(n_batches, n_points))
    edges = np.linspace(0, n_points, n_batches + 1).round().astype(int)
    return [slice(edges[i], edges[i + 1]) for i in range(n_batches)]


def weighted_mean(values, weights=None):
    values = np.asarray(values, dtype=float)
    if weights is None:
        return values.mean(axis=0)
    w = np.asarray(weights, dtype=float)
    return np.tensordot(w / w.sum(), values, axes=(0, 0))


def batch_means(values, weights=None, n_batches=N_BATCHES):
    """Mean over the first axis and its batch-means standard error.

    Batches are contiguous blocks, so samples stored chain by chain (or
    trajectory by trajectory) give independent batches.
    """
    values = np.asarray(values, dtype=float)
    mean = weighted_mean(values, weights)
    slices = batch_slices(values.shape[0], n_batches)
    if len(slices) < 2:
        return mean, np.full(np.shape(mean), np.inf)
    bm = np.array([weighted_mean(values[s], None if weights is None else weights[s]) for s in slices])
    if weights is None:
        sizes = np.array([s.stop - s.start for s in slices], dtype=float)
    else:
        sizes = np.array([np.sum(weights[s]) for s in slices], dtype=float)
    frac = sizes / sizes.sum()
    # unequal batch sizes: weighted spread of batch means around the overall mean
    var = np.tensordot(frac, (bm - mean) ** 2, axes=(0, 0)) * len(slices) / (len(slices) - 1)
    stderr = np.sqrt(var / len(slices))
    return mean, stderr
