import logging

import numpy as np
import pytest
import torch

from hairlatent.alignment import AlignmentConfig, align_target_hair, extract_hair_mask
from hairlatent.core import LatentCode
from hairlatent.losses import LossBreakdown

# reference self-alignment run (seeds 0, 1, 4; 100 steps): ‖w_align − w_trg‖ = 0 exactly,
# because every term and its gradient vanish at the start
EPS_SELF = 1e-9


@pytest.fixture(scope="module")
def pair(toy):
    g = toy.generator
    w_trg = LatentCode(g.sample_latent(7), g.split)
    with torch.no_grad():
        i_trg = g.synthesize(w_trg.vectors)
        i_src = g.synthesize(g.sample_latent(4))
    return w_trg, i_trg, toy.keypoints.extract(i_src)


def test_config_validation():
    with pytest.raises(ValueError):
        AlignmentConfig(steps=0)
    with pytest.raises(ValueError):
        AlignmentConfig(m=0)
    assert AlignmentConfig().m == 6 and AlignmentConfig().n_regions == 5


def test_short_alignment(toy, pair):
    w_trg, i_trg, h_src = pair
    r = align_target_hair(w_trg, i_trg, h_src, toy, AlignmentConfig(steps=12, m=3))
    assert torch.equal(r.w_align.vectors[3:], w_trg.vectors[3:])
    assert len(r.history) == 13
    assert set(r.history[0]) == {"step", "pose", "lsm", "reg", "total"}
    assert r.history[0]["reg"] == 0.0
    assert r.history[-1]["total"] < r.history[0]["total"]
    for row in r.history:
        total = torch.tensor(row["total"], dtype=torch.float64)
        LossBreakdown({k: row[k] for k in ("pose", "lsm", "reg")}, total=total).check()
    assert torch.equal(r.image, toy.generator.synthesize(r.w_align.vectors).detach())
    assert r.hair_mask == extract_hair_mask(r.image, toy.segmenter, toy.hair_class)


def test_strict_reg_skips_first_update(toy, pair):
    w_trg, i_trg, h_src = pair
    r = align_target_hair(w_trg, i_trg, h_src, toy, AlignmentConfig(steps=3, m=3, strict_reg=True))
    assert r.history[0]["reg"] == r.history[1]["reg"] == 0.0
    assert r.history[2]["reg"] > 0.0


@pytest.mark.parametrize("flags,absent", [({"use_lsm": False}, "lsm"), ({"use_reg": False}, "reg")])
def test_ablations_drop_terms(toy, pair, flags, absent):
    w_trg, i_trg, h_src = pair
    r = align_target_hair(w_trg, i_trg, h_src, toy, AlignmentConfig(steps=2, m=3, **flags))
    assert absent not in r.history[0]


def test_self_alignment_fixed_point(toy):
    g = toy.generator
    w = LatentCode(g.sample_latent(0), g.split)
    with torch.no_grad():
        img = g.synthesize(w.vectors)
    r = align_target_hair(w, img, toy.keypoints.extract(img), toy, AlignmentConfig(steps=10, m=3))
    assert r.history[0]["pose"] <= 1e-12
    assert (r.w_align.vectors - w.vectors).norm().item() <= EPS_SELF


def test_save_every_collects_snapshots(toy, pair):
    w_trg, i_trg, h_src = pair
    r = align_target_hair(w_trg, i_trg, h_src, toy, AlignmentConfig(steps=4, m=3, save_every=2))
    assert [s for s, _ in r.snapshots] == [0, 2, 4]
    assert all(len(reg) == 5 for _, reg in r.regions)


def test_m_too_large(toy, pair):
    w_trg, i_trg, h_src = pair
    with pytest.raises(ValueError):
        align_target_hair(w_trg, i_trg, h_src, toy, AlignmentConfig(steps=1, m=8))


def test_bald_target_disables_lsm(toy, pair, caplog):
    w_trg, _, h_src = pair
    flat = torch.full((64, 64, 3), 0.85, dtype=torch.float64)  # no hair-coloured pixel
    with caplog.at_level(logging.WARNING):
        r = align_target_hair(w_trg, flat, h_src, toy, AlignmentConfig(steps=1, m=3))
    assert "no hair" in caplog.text
    assert r.history[0]["lsm"] == 0.0


def test_extract_hair_mask_extremes(toy):
    class AllHair:
        n_classes = 16

        def segment_labels(self, img):
            from hairlatent.core import SemanticLabel

            return SemanticLabel(np.full(img.shape[:2], 13))

    img = torch.zeros(4, 4, 3)
    assert extract_hair_mask(img, AllHair(), 13).area() == 16
    assert extract_hair_mask(img, AllHair(), 1).area() == 0
