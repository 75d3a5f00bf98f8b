"""Differentiable objectives used by the alignment, inpainting and blending stages.

All image arguments are H×W×C tensors and feature extractors are callables
returning a list of H'×W'×C activations, so any extractor (including a plain
``lambda x: [x]``) can be plugged in.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import N_KEYPOINTS, BinaryMask, DimensionError, SemanticLabel, check_same_shape, downsample_mask

log = logging.getLogger(__name__)


def _heat(h):
    return h.heatmaps if hasattr(h, "heatmaps") else h


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    data = mask.data if isinstance(mask, BinaryMask) else mask
    return torch.from_numpy(np.array(data, dtype=np.float64)).to(like.dtype)


def pose_loss(h_src, h_gen) -> torch.Tensor:
    """Mean squared difference between two 68-channel keypoint heatmaps."""
    a, b = _heat(h_src), _heat(h_gen)
    check_same_shape(a, b, "keypoint heatmaps")
    if a.shape[0] != N_KEYPOINTS:
        raise DimensionError(f"expected {N_KEYPOINTS} heatmap channels, got {a.shape[0]}")
    return ((a - b) ** 2).mean()


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """Unnormalized Gram matrix vᵀv of an H×W×C activation."""
    if features.ndim != 3:
        raise DimensionError(f"features must be H×W×C, got {tuple(features.shape)}")
    v = features.reshape(-1, features.shape[-1])
    return v.T @ v


def _style_from_features(fa: list, fb: list) -> torch.Tensor:
    if len(fa) != len(fb):
        raise DimensionError(f"extractors returned {len(fa)} vs {len(fb)} layers")
    terms = []
    for a, b in zip(fa, fb):
        if a.shape[-1] != b.shape[-1]:
            raise DimensionError(f"channel mismatch {a.shape[-1]} vs {b.shape[-1]}")
        terms.append(((gram_matrix(a) - gram_matrix(b)) ** 2).mean())
    return torch.stack(terms).mean()


def style_loss(img_a: torch.Tensor, img_b: torch.Tensor, feat) -> torch.Tensor:
    """Layer-averaged mean squared Gram difference.

    Gram matrices are C×C whatever the spatial size, so the two images may
    differ in height and width (cropped style regions rely on this).
    """
    if img_a.ndim != 3 or img_b.ndim != 3 or img_a.shape[-1] != img_b.shape[-1]:
        raise DimensionError(f"incompatible images {tuple(img_a.shape)} and {tuple(img_b.shape)}")
    return _style_from_features(feat(img_a), feat(img_b))


def _masked_crop(img: torch.Tensor, mask: np.ndarray, crop: bool) -> torch.Tensor:
    masked = img * torch.as_tensor(mask, dtype=img.dtype)[..., None]
    if not crop:
        return masked
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return masked[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def local_style_matching_loss(i_trg, i_gen, regions_trg, regions_gen, feat, crop: bool = True) -> torch.Tensor:
    """Sum of per-region style losses over index-aligned style regions."""
    if len(regions_trg) != len(regions_gen):
        raise DimensionError(f"region counts differ: {len(regions_trg)} vs {len(regions_gen)}")
    total = i_gen.new_zeros(())
    for i, (m_t, m_g) in enumerate(zip(regions_trg.masks, regions_gen.masks)):
        if not m_t.any() or not m_g.any():
            log.warning("style region %d is empty; its term is skipped", i)
            continue
        total = total + style_loss(_masked_crop(i_trg, m_t, crop), _masked_crop(i_gen, m_g, crop), feat)
    return total


def regularization_loss(delta_w: torch.Tensor) -> torch.Tensor:
    return (delta_w**2).mean()


def masked_perceptual_loss(img_a, img_b, mask, feat) -> torch.Tensor:
    """Layer-averaged masked L1 feature distance, normalized by activation size."""
    check_same_shape(img_a, img_b, "images")
    m = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    if tuple(m.shape) != tuple(img_a.shape[:2]):
        raise DimensionError(f"mask {tuple(m.shape)} does not match image {tuple(img_a.shape[:2])}")
    terms = []
    for fa, fb in zip(feat(img_a), feat(img_b)):
        mi = downsample_mask(m, fa.shape[0], fa.shape[1])
        mi = torch.as_tensor(mi, dtype=fa.dtype)[..., None]
        terms.append((mi * (fa - fb)).abs().sum() / fa.numel())
    return torch.stack(terms).mean()


def hair_style_loss(i_trg, i_out, m_trg_hair, m_out_hair, feat) -> torch.Tensor:
    """Style loss between the two hair-masked images (no cropping)."""
    a = i_trg * _mask_tensor(m_trg_hair, i_trg)[..., None]
    b = i_out * _mask_tensor(m_out_hair, i_out)[..., None]
    return style_loss(a, b, feat)


def segmentation_ce_loss(s_obj, probs: torch.Tensor, region=None, eps: float = 1e-12) -> torch.Tensor:
    """Mean pixel-wise negative log-likelihood of the objective labels.

    ``region`` optionally restricts the mean to a binary mask.
    """
    labels = s_obj.data if isinstance(s_obj, SemanticLabel) else np.asarray(s_obj)
    if probs.ndim != 3 or tuple(probs.shape[1:]) != tuple(labels.shape):
        raise DimensionError(f"heatmap {tuple(probs.shape)} does not match labels {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= probs.shape[0]:
        raise ValueError(f"labels must lie in [0, {probs.shape[0]})")
    idx = torch.from_numpy(np.array(labels, dtype=np.int64))[None]
    picked = probs.gather(0, idx)[0].clamp_min(eps)
    nll = -torch.log(picked)
    if region is None:
        return nll.mean()
    sel = torch.from_numpy(np.array(region.data if isinstance(region, BinaryMask) else region, dtype=bool))
    if not sel.any():
        return nll.sum() * 0.0
    return nll[sel].mean()


def _scalar(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossBreakdown:
    """Named loss terms, their weights and the weighted total."""

    terms: dict
    weights: dict = field(default_factory=dict)
    total: torch.Tensor = None

    def __post_init__(self):
        if self.total is None:
            self.total = sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items())

    def values(self) -> dict:
        return {k: _scalar(v) for k, v in self.terms.items()}

    def check(self, rtol: float = 1e-9) -> None:
        recomposed = sum(self.weights.get(k, 1.0) * _scalar(v) for k, v in self.terms.items())
        total = _scalar(self.total)
        if abs(recomposed - total) > rtol * abs(total) + 1e-300:
            raise AssertionError(f"loss total {total} != weighted sum {recomposed}")
        for k, v in self.terms.items():
            if _scalar(v) < 0:
                raise AssertionError(f"loss term {k} is negative: {_scalar(v)}")

    def row(self, step: int) -> dict:
        out = {"step": step}
        out.update(self.values())
        out["total"] = _scalar(self.total)
        return out
