"""Blending: mix the inpainted source and aligned target latents, compose F, render."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import extract_hair_mask
from .backends.ports import Ports
from .core import BinaryMask, DimensionError, LatentCode, MaskTriplet, check_same_shape, downsample_triplet
from .embedding import LEARNING_RATE, check_finite
from .losses import LossBreakdown, hair_style_loss, masked_perceptual_loss

log = logging.getLogger(__name__)

BLEND_STEPS = 400


def _vectors(w):
    return w.vectors if isinstance(w, LatentCode) else w


def blend_latents(w_inpaint, w_align, w_weight, convex: bool = False) -> torch.Tensor:
    """``w_inpaint + w_weight ⊙ w_align`` (or the convex mix when ``convex``).

    ``w_weight`` may be L×D or L×1 (one scalar per layer).
    """
    a, b = _vectors(w_inpaint), _vectors(w_align)
    check_same_shape(a, b, "latent codes")
    if w_weight.ndim != 2 or w_weight.shape[0] != a.shape[0] or w_weight.shape[1] not in (1, a.shape[1]):
        raise DimensionError(f"blend weight {tuple(w_weight.shape)} incompatible with latents {tuple(a.shape)}")
    if convex:
        return (1 - w_weight) * a + w_weight * b
    return a + w_weight * b


def compose_final_f(f_align: torch.Tensor, f_blend: torch.Tensor, f_src: torch.Tensor, masks) -> torch.Tensor:
    """Per-cell mix of the three F tensors by F-resolution (hair, blend, keep) masks.

    ``masks`` is a 3×h×w array or tensor, broadcast over channels.
    """
    check_same_shape(f_align, f_blend, "F tensors")
    check_same_shape(f_align, f_src, "F tensors")
    m = masks if isinstance(masks, torch.Tensor) else torch.from_numpy(np.array(masks, dtype=np.float64))
    m = m.to(f_src.dtype)
    if m.shape[0] != 3 or tuple(m.shape[1:]) != tuple(f_src.shape[:2]):
        raise DimensionError(f"masks {tuple(m.shape)} do not match F tensor {tuple(f_src.shape)}")
    m = m[..., None]
    return m[0] * f_align + m[1] * f_blend + m[2] * f_src


@dataclass
class BlendResult:
    w_weight: torch.Tensor
    w_blend: LatentCode
    f_final: torch.Tensor
    image: torch.Tensor
    history: list = field(default_factory=list)


@dataclass
class BlendConfig:
    steps: int = BLEND_STEPS
    lambda_hair_percept: float = 1.0
    lambda_hair_style: float = 1.0
    lr: float = LEARNING_RATE
    convex: bool = False
    per_layer: bool = False


def optimize_blend(w_inpaint: LatentCode, w_align: LatentCode, f_src: torch.Tensor, i_src, i_align, i_trg,
                   masks: MaskTriplet, m_trg_hair: BinaryMask, ports: Ports,
                   cfg: BlendConfig | None = None) -> BlendResult:
    """Optimize the blending weight; everything else is held fixed.

    Objective: keep-region perceptual loss against the source, hair-region
    perceptual loss against the aligned target and a hair style loss against
    the original target, whose output hair mask is re-read every step.
    """
    cfg = cfg or BlendConfig()
    if cfg.steps < 1:
        raise ValueError(f"blending steps must be >= 1, got {cfg.steps}")
    g, feat, seg = ports.generator, ports.extractor, ports.segmenter
    m = g.split
    a = w_inpaint.vectors.detach()
    b = w_align.vectors.detach()
    check_same_shape(a, b, "latent codes")
    f_src = f_src.detach()
    i_src, i_align, i_trg = i_src.detach(), i_align.detach(), i_trg.detach()
    f_masks = torch.as_tensor(downsample_triplet(masks, f_src.shape[0], f_src.shape[1]), dtype=f_src.dtype)
    with torch.no_grad():
        f_align = g.features(b[:m])

    width = 1 if cfg.per_layer else a.shape[1]
    w_weight = torch.zeros(a.shape[0], width, dtype=a.dtype, requires_grad=True)
    opt = torch.optim.Adam([w_weight], lr=cfg.lr)
    weights = {"keep_percept": 1.0, "hair_percept": cfg.lambda_hair_percept, "hair_style": cfg.lambda_hair_style}
    history = []

    def render():
        w_blend = blend_latents(a, b, w_weight, cfg.convex)
        f_final = compose_final_f(f_align, g.features(w_blend[:m]), f_src, f_masks)
        return w_blend, f_final, g.synthesize_from(f_final, w_blend[m:])

    def evaluate(step):
        w_blend, f_final, img = render()
        out_hair = extract_hair_mask(img.detach(), seg, ports.hair_class)
        terms = {
            "keep_percept": masked_perceptual_loss(i_src, img, masks.keep, feat),
            "hair_percept": masked_perceptual_loss(i_align, img, masks.hair, feat),
            "hair_style": hair_style_loss(i_trg, img, m_trg_hair, out_hair, feat),
        }
        bd = LossBreakdown(terms, weights)
        check_finite(bd.total, "blend", step)
        history.append(bd.row(step))
        return bd, w_blend, f_final, img

    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        bd, *_ = evaluate(step)
        bd.total.backward()
        opt.step()
    with torch.no_grad():
        _, w_blend, f_final, img = evaluate(cfg.steps)
    if history[-1]["total"] > history[0]["total"]:
        log.warning("blending ended above its initial loss (%.4g > %.4g)", history[-1]["total"], history[0]["total"])
    return BlendResult(w_weight.detach().clone(), LatentCode(w_blend.detach(), w_inpaint.split),
                       f_final.detach(), img.detach(), history)
