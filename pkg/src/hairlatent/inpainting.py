"""Source inpainting: objective label construction and CE-guided latent optimization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from .backends.ports import Ports
from .core import (
    BACKGROUND_CLASS,
    HAIR_CLASS,
    BinaryMask,
    LatentCode,
    SemanticLabel,
    check_same_shape,
)
from .embedding import LEARNING_RATE, check_finite
from .losses import segmentation_ce_loss

log = logging.getLogger(__name__)

INPAINT_STEPS = 140


@dataclass(frozen=True)
class ObjectiveLabel:
    label: SemanticLabel
    inpaint_region: BinaryMask
    keep_region: BinaryMask

    def __post_init__(self):
        if (self.inpaint_region.bool & self.keep_region.bool).any():
            raise ValueError("inpaint and keep regions overlap")


def nearest_label_fill(labels: np.ndarray, sources: np.ndarray, n_classes: int, fallback: int) -> np.ndarray:
    """Label of the nearest source pixel (Euclidean) for every pixel.

    Equidistant sources of different classes resolve to the smaller class
    index. Without any source pixel every output is ``fallback``.
    """
    if not sources.any():
        return np.full(labels.shape, fallback, dtype=np.int64)
    best = np.full(labels.shape, np.inf)
    out = np.full(labels.shape, fallback, dtype=np.int64)
    for c in range(n_classes):
        sel = sources & (labels == c)
        if not sel.any():
            continue
        dist = distance_transform_edt(~sel)
        closer = dist < best
        best[closer] = dist[closer]
        out[closer] = c
    return out


def build_objective_label(s_src: SemanticLabel, src_hair: BinaryMask, aligned_hair: BinaryMask,
                          hair_class: int = HAIR_CLASS, background_class: int = BACKGROUND_CLASS) -> ObjectiveLabel:
    """Target semantics for the inpainting stage.

    Keep pixels copy the source labels, pixels under the aligned hair become
    hair, and pixels uncovered by removing the source hair take the label of
    the nearest keep pixel (background if nothing is kept).
    """
    check_same_shape(s_src.data, src_hair.data, "label map and source hair mask")
    check_same_shape(src_hair.data, aligned_hair.data, "hair masks")
    src, hair = src_hair.bool, aligned_hair.bool
    keep = ~src & ~hair
    inpaint = src & ~hair
    if (s_src.data[keep] == hair_class).any():
        raise ValueError("source hair mask does not cover every hair-labelled pixel")

    out = s_src.data.copy()
    out[hair] = hair_class
    if inpaint.any():
        filled = nearest_label_fill(s_src.data, keep, s_src.n_classes, background_class)
        out[inpaint] = filled[inpaint]
    return ObjectiveLabel(SemanticLabel(out, s_src.n_classes), BinaryMask(inpaint), BinaryMask(keep))


@dataclass
class InpaintResult:
    w_inpaint: LatentCode
    image: torch.Tensor
    history: list = field(default_factory=list)


def inpaint_source(w_src: LatentCode, s_obj: ObjectiveLabel, ports: Ports, steps: int = INPAINT_STEPS,
                   m: int | None = None, lr: float = LEARNING_RATE, restrict_to_inpaint: bool = False) -> InpaintResult:
    """Optimize the first ``m`` vectors of ``w_src`` so the segmenter sees ``s_obj``."""
    if steps < 1:
        raise ValueError(f"inpainting steps must be >= 1, got {steps}")
    g, seg = ports.generator, ports.segmenter
    m = g.split if m is None else m
    if not 1 <= m < w_src.n_layers:
        raise ValueError(f"m must satisfy 1 <= m < L, got {m}")
    region = s_obj.inpaint_region if restrict_to_inpaint else None
    fixed = w_src.vectors[m:].detach().clone()
    coarse = w_src.vectors[:m].detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([coarse], lr=lr)
    history = []

    def evaluate(step):
        probs = seg.segment_probs(g.synthesize(torch.cat([coarse, fixed], dim=0)))
        loss = segmentation_ce_loss(s_obj.label, probs, region)
        check_finite(loss, "inpaint", step)
        history.append({"step": step, "ce": loss.item(), "total": loss.item()})
        return loss

    for step in range(steps):
        opt.zero_grad(set_to_none=True)
        evaluate(step).backward()
        opt.step()
    with torch.no_grad():
        evaluate(steps)
    if history[-1]["ce"] > history[0]["ce"]:
        log.warning("inpainting ended above its initial CE (%.4g > %.4g)", history[-1]["ce"], history[0]["ce"])

    w = LatentCode(torch.cat([coarse.detach(), fixed], dim=0), w_src.split)
    with torch.no_grad():
        image = g.synthesize(w.vectors)
    return InpaintResult(w, image, history)
