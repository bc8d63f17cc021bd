"""Density clustering over binary/categorical sequence vectors.

Sequence vectors are compared positionwise (Hamming distance), which directly
measures whether two masks appear and disappear together, or match the same
masks over time. DBSCAN follows the classic conventions: neighborhoods are
inclusive (distance <= eps) and count the point itself; border points join
the first core cluster that reaches them, with items processed in index
order, so results are deterministic.
"""

from __future__ import annotations

from collections import deque
from typing import Callable, Sequence

import numpy as np

NOISE = -1


def hamming_distance(a, b) -> int:
    """Number of positions where two equal-length sequences differ."""
    av = np.asarray(a)
    bv = np.asarray(b)
    if av.shape != bv.shape:
        raise ValueError(f"sequence lengths differ: {av.shape} vs {bv.shape}")
    return int(np.count_nonzero(av != bv))


def _pairwise_distances(items: np.ndarray, metric: Callable | None) -> np.ndarray:
    n = len(items)
    if metric is None:
        # vectorized Hamming over the stacked (n, T) array
        return np.count_nonzero(items[:, None, :] != items[None, :, :], axis=2)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = metric(items[i], items[j])
    return dist


def dbscan(
    items: Sequence,
    eps: float,
    min_pts: int,
    metric: Callable | None = None,
) -> np.ndarray:
    """Cluster sequence vectors; returns per-item labels with NOISE == -1.

    Cluster ids are contiguous from 0 in order of discovery. ``metric``
    defaults to Hamming distance.
    """
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts must be >= 1, got {min_pts}")
    n = len(items)
    if n == 0:
        return np.zeros(0, dtype=int)
    stacked = np.stack([np.asarray(item) for item in items])
    if stacked.ndim != 2:
        raise ValueError("items must be equal-length 1-D sequences")

    dist = _pairwise_distances(stacked, metric)
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    UNSET = -2
    labels = np.full(n, UNSET, dtype=int)
    cluster = 0
    for i in range(n):
        if labels[i] != UNSET or not core[i]:
            continue
        labels[i] = cluster
        queue = deque(neighbors[i])
        while queue:
            j = queue.popleft()
            if labels[j] != UNSET:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(neighbors[j])
        cluster += 1
    labels[labels == UNSET] = NOISE
    return labels
