"""Masked SLIC over hair pixels and step-to-step region tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from skimage.color import rgb2lab
from sklearn.base import BaseEstimator, ClusterMixin

from .core import N_STYLE, BinaryMask, as_numpy

log = logging.getLogger(__name__)


class EmptyRegionError(ValueError):
    """The hair mask has no pixels to segment."""


@dataclass(frozen=True)
class StyleRegionSet:
    masks: np.ndarray  # N×H×W bool, pairwise disjoint
    labels: np.ndarray  # N ints
    centroids: np.ndarray  # N×5 in scaled (x, y, L, a, b) space
    step: int = 0
    energies: tuple = ()

    def __len__(self) -> int:
        return len(self.labels)

    def label_map(self) -> np.ndarray:
        """H×W map of region labels, −1 outside every region."""
        out = np.full(self.masks.shape[1:], -1, dtype=np.int64)
        for lab, m in zip(self.labels, self.masks):
            out[m] = lab
        return out

    def union(self) -> np.ndarray:
        return self.masks.any(axis=0)


def _pixel_features(img, ys, xs, spatial_scale: float) -> np.ndarray:
    lab = rgb2lab(np.clip(as_numpy(img).astype(np.float64), 0.0, 1.0))
    return np.column_stack([xs * spatial_scale, ys * spatial_scale, lab[ys, xs]])


def _grid_seeds(mask: np.ndarray, ys, xs, n: int, step: float, rng) -> tuple:
    """Initial centres: hair-pixel indices plus the (y, x) positions they start from.

    Grid centres keep their exact sub-pixel position (rounding them to pixels
    would break the symmetry of regular layouts); farthest-point fill-ins sit
    on their pixel.
    """
    index = -np.ones(mask.shape, dtype=np.int64)
    index[ys, xs] = np.arange(len(ys))
    y0, x0 = ys.min(), xs.min()
    gy = np.arange(y0 + step / 2 - 0.5, ys.max() + 1, step)
    gx = np.arange(x0 + step / 2 - 0.5, xs.max() + 1, step)
    found = {}
    for y in gy:
        for x in gx:
            r, c = int(np.floor(y + 0.5)), int(np.floor(x + 0.5))
            if 0 <= r < mask.shape[0] and 0 <= c < mask.shape[1] and index[r, c] >= 0:
                found.setdefault(int(index[r, c]), (y, x))
    seeds = list(found)
    if len(seeds) > n:
        seeds = sorted(rng.choice(seeds, size=n, replace=False).tolist())
    positions = [found[i] for i in seeds]
    # too few grid points inside the mask: add farthest pixels
    pts = np.column_stack([ys, xs]).astype(np.float64)
    while len(seeds) < n:
        if seeds:
            d = np.min(((pts[:, None, :] - pts[seeds][None]) ** 2).sum(-1), axis=1)
        else:
            d = ((pts - pts.mean(0)) ** 2).sum(-1)
        d[seeds] = -1.0
        seeds.append(int(np.argmax(d)))
        positions.append(tuple(pts[seeds[-1]]))
    return np.asarray(seeds, dtype=np.int64), np.asarray(positions, dtype=np.float64)


def _kmeans(feats: np.ndarray, centroids: np.ndarray, iters: int):
    energies = []
    assign = None
    for _ in range(iters):
        d2 = ((feats[:, None, :] - centroids[None]) ** 2).sum(-1)
        new_assign = d2.argmin(axis=1)
        dmin = d2[np.arange(len(feats)), new_assign]
        energy = float(dmin.sum())
        if energies and energy > energies[-1] * (1 + 1e-9) + 1e-9:
            raise AssertionError(f"k-means energy increased: {energies[-1]} -> {energy}")
        energies.append(energy)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(len(centroids)):
            members = assign == k
            if members.any():
                centroids[k] = feats[members].mean(axis=0)
            else:
                # reseed an empty cluster at the worst-fit pixel; energy unchanged
                worst = int(np.argmax(dmin))
                centroids[k] = feats[worst]
                dmin[worst] = 0.0
    return new_assign, centroids, energies


def _fragments(label_img: np.ndarray, n: int) -> list:
    """(size, first index, label, mask) of every non-largest component of every region."""
    out = []
    for k in range(n):
        comps, count = ndimage.label(label_img == k)
        if count <= 1:
            continue
        sizes = np.bincount(comps.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        for c in range(1, count + 1):
            if c != keep:
                frag = comps == c
                out.append((int(frag.sum()), int(np.flatnonzero(frag)[0]), k, frag))
    out.sort(key=lambda t: (t[0], t[1]))
    return out


def _enforce_connectivity(label_img: np.ndarray, feat_img: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Merge every non-largest fragment of a region into its nearest adjacent region.

    Repeated until stable: a merge can strand a fragment whose only link to
    its new region was another fragment. Fragments with no hair neighbours
    (isolated islands of the mask) stay where they are.
    """
    out = label_img.copy()
    n = len(centroids)
    for _ in range(4 * n + 4):
        changed = False
        for _, _, k, frag in _fragments(out, n):
            if not (out[frag] == k).all():
                continue
            ring = ndimage.binary_dilation(frag) & ~frag & (out >= 0)
            neighbours = np.unique(out[ring])
            neighbours = neighbours[neighbours != k]
            if len(neighbours) == 0:
                continue
            mean = feat_img[frag].mean(axis=0)
            d = ((centroids[neighbours] - mean) ** 2).sum(-1)
            out[frag] = neighbours[int(np.argmin(d))]
            changed = True
        if not changed:
            break
    return out


def slic_hair(img, hair_mask, n_regions: int = N_STYLE, compactness: float = 10.0, iters: int = 10,
              seed: int = 0, step: int = 0) -> StyleRegionSet:
    """Cluster the pixels under ``hair_mask`` into ``n_regions`` style regions.

    Pixels are embedded as (c·x/S, c·y/S, L, a, b) with S = sqrt(|hair|/n)
    and c the compactness, then clustered by Lloyd iterations started from a
    grid inside the mask. Every centre competes for every hair pixel, which
    keeps the k-means energy monotone.
    """
    mask = hair_mask.bool if isinstance(hair_mask, BinaryMask) else np.asarray(hair_mask, dtype=bool)
    if n_regions < 1:
        raise ValueError(f"n_regions must be >= 1, got {n_regions}")
    ys, xs = np.nonzero(mask)
    area = len(ys)
    if area == 0:
        raise EmptyRegionError("hair mask is empty")
    if n_regions > area:
        raise ValueError(f"n_regions={n_regions} exceeds the {area} hair pixels")

    grid_step = np.sqrt(area / n_regions)
    feats = _pixel_features(img, ys, xs, compactness / grid_step)
    rng = np.random.default_rng(seed)
    seeds, positions = _grid_seeds(mask, ys, xs, n_regions, grid_step, rng)
    init = feats[seeds].copy()
    init[:, 0] = positions[:, 1] * compactness / grid_step
    init[:, 1] = positions[:, 0] * compactness / grid_step
    assign, centroids, energies = _kmeans(feats, init, iters)

    label_img = np.full(mask.shape, -1, dtype=np.int64)
    label_img[ys, xs] = assign
    feat_img = np.zeros(mask.shape + (5,))
    feat_img[ys, xs] = feats
    label_img = _enforce_connectivity(label_img, feat_img, centroids)

    masks = np.stack([label_img == k for k in range(n_regions)])
    for k in range(n_regions):
        if masks[k].any():
            centroids[k] = feat_img[masks[k]].mean(axis=0)
    return StyleRegionSet(masks, np.arange(n_regions), centroids, step, tuple(energies))


def track_style_regions(prev: StyleRegionSet, curr: StyleRegionSet) -> StyleRegionSet:
    """Relabel ``curr`` one-to-one onto ``prev`` by minimum total centroid distance.

    The result is ordered like ``prev`` and carries its labels, so region i of
    the output continues region i of ``prev``.
    """
    if len(prev) != len(curr):
        raise ValueError(f"region counts differ: {len(prev)} vs {len(curr)}")
    cost = np.linalg.norm(prev.centroids[:, None, :] - curr.centroids[None], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    order = cols[np.argsort(rows)]
    return StyleRegionSet(
        masks=curr.masks[order],
        labels=np.array(prev.labels, copy=True),
        centroids=curr.centroids[order],
        step=curr.step,
        energies=curr.energies,
    )


class SLICHair(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`slic_hair`.

    ``fit(img, hair_mask)`` stores ``regions_``, ``labels_`` (−1 outside the
    mask) and ``energies_``.
    """

    def __init__(self, n_regions=N_STYLE, compactness=10.0, iters=10, seed=0):
        self.n_regions = n_regions
        self.compactness = compactness
        self.iters = iters
        self.seed = seed

    def fit(self, X, y=None, hair_mask=None):
        mask = hair_mask if hair_mask is not None else y
        if mask is None:
            raise ValueError("a hair mask is required")
        self.regions_ = slic_hair(X, mask, self.n_regions, self.compactness, self.iters, self.seed)
        self.labels_ = self.regions_.label_map()
        self.energies_ = self.regions_.energies
        return self

    def fit_predict(self, X, y=None, hair_mask=None):
        return self.fit(X, y, hair_mask=hair_mask).labels_


def region_overlay(regions: StyleRegionSet) -> np.ndarray:
    """H×W×3 colour-coded label image for debug output."""
    rng = np.random.default_rng(7)
    colors = rng.random((max(len(regions), 1), 3)) * 0.8 + 0.2
    out = np.zeros(regions.masks.shape[1:] + (3,))
    for i, m in enumerate(regions.masks):
        out[m] = colors[i]
    return out
