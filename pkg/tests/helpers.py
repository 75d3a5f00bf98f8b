"""Shared oracles and gradient checking used by unit and acceptance tests."""

import itertools

import numpy as np
import torch
from scipy import ndimage

from hairlatent.core import SemanticLabel
from hairlatent.superpixels import StyleRegionSet


def directional_fd_check(fn, x0: torch.Tensor, n_dirs: int = 10, h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between autograd and central differences along random directions."""
    x = x0.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach()
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_dirs):
            d = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
            d /= d.norm()
            fd = (fn(x0 + h * d) - fn(x0 - h * d)).item() / (2 * h)
            ad = float((grad * d).sum())
            denom = max(abs(ad), abs(fd), 1e-300)
            worst = max(worst, abs(ad - fd) / denom)
    return worst


def brute_force_tracking(prev: StyleRegionSet, curr: StyleRegionSet) -> tuple:
    """Permutation minimizing total centroid distance, by enumeration."""
    n = len(prev)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(np.linalg.norm(prev.centroids[i] - curr.centroids[perm[i]]) for i in range(n))
        if cost < best_cost - 1e-12:
            best, best_cost = perm, cost
    return best


def brute_force_objective(labels: np.ndarray, src_hair: np.ndarray, aligned: np.ndarray, hair: int,
                          background: int) -> np.ndarray:
    """Nearest-keep-pixel fill by explicit pairwise distances (ties → smaller class)."""
    keep = ~src_hair & ~aligned
    out = labels.copy()
    out[aligned] = hair
    ky, kx = np.nonzero(keep)
    for y, x in zip(*np.nonzero(src_hair & ~aligned)):
        if len(ky) == 0:
            out[y, x] = background
            continue
        d2 = (ky - y) ** 2 + (kx - x) ** 2
        near = d2 == d2.min()
        out[y, x] = labels[ky[near], kx[near]].min()
    return out


def random_label_case(rng, max_size: int = 16, n_classes: int = 16, hair: int = 13):
    h, w = rng.integers(1, max_size + 1, size=2)
    labels = rng.integers(0, n_classes, size=(h, w))
    src_hair = labels == hair
    # grow the source hair blob a little so it carries other labels too
    src_hair |= rng.random((h, w)) < 0.2
    if rng.random() < 0.5:
        src_hair = ndimage.binary_dilation(src_hair)
    aligned = rng.random((h, w)) < rng.uniform(0, 0.5)
    return SemanticLabel(labels, n_classes), src_hair, aligned


def region_set(centroids: np.ndarray, shape=(8, 8), masks=None) -> StyleRegionSet:
    n = len(centroids)
    if masks is None:
        masks = np.zeros((n,) + shape, dtype=bool)
        flat = masks.reshape(n, -1)
        for i in range(n):
            flat[i, i] = True
    return StyleRegionSet(masks, np.arange(n), np.asarray(centroids, dtype=np.float64))
