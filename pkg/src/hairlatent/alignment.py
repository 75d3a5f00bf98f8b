"""Target-hair alignment: move the target's coarse latents to the source pose."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from .backends.ports import Ports
from .core import N_STYLE, SPLIT_INDEX, BinaryMask, LatentCode, check_image
from .embedding import LEARNING_RATE, check_finite
from .losses import LossBreakdown, local_style_matching_loss, pose_loss, regularization_loss
from .superpixels import StyleRegionSet, slic_hair, track_style_regions

log = logging.getLogger(__name__)


@dataclass
class AlignmentConfig:
    steps: int = 100
    m: int = SPLIT_INDEX
    lambda_lsm: float = 1.0
    lambda_reg: float = 1.0
    lr: float = LEARNING_RATE
    n_regions: int = N_STYLE
    compactness: float = 10.0
    slic_iters: int = 10
    seed: int = 0
    use_lsm: bool = True
    use_reg: bool = True
    rematch_target: bool = False
    strict_reg: bool = False  # skip the regularizer at the first update, as printed
    crop_regions: bool = True
    save_every: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"alignment steps must be >= 1, got {self.steps}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")


@dataclass
class AlignmentResult:
    w_align: LatentCode
    image: torch.Tensor
    hair_mask: BinaryMask
    history: list = field(default_factory=list)  # LossBreakdown rows
    regions: list = field(default_factory=list)  # (step, StyleRegionSet) for save_every
    snapshots: list = field(default_factory=list)  # (step, image) for save_every


def extract_hair_mask(img, seg, hair_class: int) -> BinaryMask:
    """Pixels whose most probable class is ``hair_class``."""
    return seg.segment_labels(img).mask_of(hair_class)


class _RegionTracker:
    """Per-step style regions of the generated image, chained from the target's."""

    def __init__(self, anchor: StyleRegionSet, cfg: AlignmentConfig):
        self.anchor = anchor
        self.prev = anchor
        self.cfg = cfg

    def update(self, img: torch.Tensor, hair: BinaryMask, step: int) -> StyleRegionSet | None:
        n = len(self.anchor)
        if hair.area() < max(n, 1):
            log.warning("step %d: generated hair has %d pixels; LSM term skipped", step, hair.area())
            return None
        cfg = self.cfg
        curr = slic_hair(img.detach(), hair, n, cfg.compactness, cfg.slic_iters, cfg.seed, step)
        ref = self.anchor if cfg.rematch_target else self.prev
        tracked = track_style_regions(ref, curr)
        self.prev = tracked
        return tracked


def align_target_hair(w_trg: LatentCode, i_trg, h_src, ports: Ports,
                      cfg: AlignmentConfig | None = None) -> AlignmentResult:
    """Optimize the first ``cfg.m`` vectors of ``w_trg`` toward the source keypoints.

    Objective per step: pose + λ_lsm·LSM + λ_reg·reg, where the regularizer
    penalizes the change from the previous iterate. Hair masks and style
    regions of the generated image are recomputed each step and held
    constant for that step's gradient. ``history`` holds one breakdown per
    optimizer step plus a final evaluation at the returned code.
    """
    cfg = cfg or AlignmentConfig()
    g, seg, feat = ports.generator, ports.segmenter, ports.extractor
    if cfg.m >= w_trg.n_layers:
        raise ValueError(f"m={cfg.m} must be smaller than L={w_trg.n_layers}")
    i_trg = check_image(i_trg, g.resolution).to(g.dtype)
    h_src = h_src.heatmaps.detach() if hasattr(h_src, "heatmaps") else h_src.detach()

    fixed = w_trg.vectors[cfg.m :].detach().clone()
    coarse = w_trg.vectors[: cfg.m].detach().clone().requires_grad_(True)
    prev_coarse = coarse.detach().clone()
    weights = {"pose": 1.0}
    if cfg.use_lsm:
        weights["lsm"] = cfg.lambda_lsm
    if cfg.use_reg:
        weights["reg"] = cfg.lambda_reg

    tracker = None
    if cfg.use_lsm:
        trg_hair = extract_hair_mask(i_trg, seg, ports.hair_class)
        n = min(cfg.n_regions, trg_hair.area())
        if n < cfg.n_regions:
            log.warning("target hair has %d pixels; using %d style regions", trg_hair.area(), n)
        if n >= 1:
            anchor = slic_hair(i_trg, trg_hair, n, cfg.compactness, cfg.slic_iters, cfg.seed)
            tracker = _RegionTracker(anchor, cfg)
        else:
            log.warning("target image has no hair; LSM disabled")

    opt = torch.optim.Adam([coarse], lr=cfg.lr)
    history, saved, snapshots = [], [], []

    def evaluate(step: int):
        w = torch.cat([coarse, fixed], dim=0)
        img = g.synthesize(w)
        if cfg.save_every and step % cfg.save_every == 0:
            snapshots.append((step, img.detach().clone()))
        terms = {"pose": pose_loss(h_src, ports.keypoints.extract(img))}
        if cfg.use_lsm:
            regions = None
            if tracker is not None:
                hair = extract_hair_mask(img.detach(), seg, ports.hair_class)
                regions = tracker.update(img, hair, step)
            if regions is not None:
                terms["lsm"] = local_style_matching_loss(
                    i_trg, img, tracker.anchor, regions, feat, crop=cfg.crop_regions
                )
                if cfg.save_every and step % cfg.save_every == 0:
                    saved.append((step, regions))
            else:
                terms["lsm"] = img.new_zeros(())
        if cfg.use_reg:
            if step == 0 or (step == 1 and cfg.strict_reg):
                terms["reg"] = img.new_zeros(())
            else:
                delta = torch.cat([coarse - prev_coarse, torch.zeros_like(fixed)], dim=0)
                terms["reg"] = regularization_loss(delta)
        bd = LossBreakdown(terms, weights)
        check_finite(bd.total, "align", step)
        return bd

    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        bd = evaluate(step)
        history.append(bd.row(step))
        bd.total.backward()
        prev_coarse = coarse.detach().clone()
        opt.step()

    final = evaluate(cfg.steps)
    history.append(final.row(cfg.steps))
    if history[-1]["total"] > history[0]["total"]:
        log.warning("alignment ended above its initial loss (%.4g > %.4g)", history[-1]["total"], history[0]["total"])

    w_align = LatentCode(torch.cat([coarse.detach(), fixed], dim=0), w_trg.split)
    with torch.no_grad():
        image = g.synthesize(w_align.vectors)
    hair = extract_hair_mask(image, seg, ports.hair_class)
    return AlignmentResult(w_align, image, hair, history, saved, snapshots)
