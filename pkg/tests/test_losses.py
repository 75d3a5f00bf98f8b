import logging
import math

import numpy as np
import pytest
import torch
from helpers import directional_fd_check, region_set

from hairlatent.core import BinaryMask, DimensionError, SemanticLabel
from hairlatent.losses import (
    LossBreakdown,
    gram_matrix,
    hair_style_loss,
    local_style_matching_loss,
    masked_perceptual_loss,
    pose_loss,
    regularization_loss,
    segmentation_ce_loss,
    style_loss,
)

ident = lambda x: [x]  # noqa: E731


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_pose_loss_zero_and_offset():
    h = torch.rand(68, 8, 8, dtype=torch.float64)
    assert pose_loss(h, h).item() == 0.0
    assert pose_loss(h, h + 0.3).item() == pytest.approx(0.09, abs=1e-15)
    with pytest.raises(DimensionError):
        pose_loss(h, h[:, :4])
    with pytest.raises(DimensionError):
        pose_loss(h[:5], h[:5])


def test_gram_examples():
    assert torch.equal(gram_matrix(torch.zeros(3, 3, 4, dtype=torch.float64)), torch.zeros(4, 4, dtype=torch.float64))
    assert gram_matrix(torch.ones(2, 2, 1, dtype=torch.float64)).tolist() == [[4.0]]
    with pytest.raises(DimensionError):
        gram_matrix(torch.zeros(4, 4))


def test_style_loss_examples(toy, toy_images):
    a, b = toy_images[0], toy_images[1]
    assert style_loss(a, a, toy.extractor).item() == 0.0
    assert style_loss(a, b, toy.extractor).item() == style_loss(b, a, toy.extractor).item()
    assert style_loss(t([[[1.0], [0.0]]]), t([[[0.0], [1.0]]]), ident).item() == 0.0
    # different spatial sizes are allowed (cropped patches)
    assert style_loss(a[:10, :20], b[:30, :7], toy.extractor).item() > 0
    with pytest.raises(DimensionError):
        style_loss(a, b[..., :2], toy.extractor)


def test_style_loss_hand_value():
    a = t([[[1.0, 2.0]]])  # 1×1×2
    b = t([[[0.0, 1.0]]])
    # G_a = [[1,2],[2,4]], G_b = [[0,0],[0,1]] → mean of squared diffs = (1+4+4+9)/4
    assert style_loss(a, b, ident).item() == pytest.approx(4.5)


def test_lsm_identical_is_zero(toy, toy_images):
    img = toy_images[0]
    masks = np.zeros((2, 64, 64), bool)
    masks[0, :20, :20] = True
    masks[1, 30:50, 10:60] = True
    regions = region_set(np.zeros((2, 5)), masks=masks)
    assert local_style_matching_loss(img, img, regions, regions, toy.extractor).item() == 0.0


def test_lsm_is_additive_over_regions(toy, toy_images):
    a, b = toy_images[0], toy_images[1].clone()
    b[:20, :20] = a[:20, :20]  # region 1 identical on both sides
    masks = np.zeros((2, 64, 64), bool)
    masks[0, 2:18, 3:17] = True
    masks[1, 30:50, 10:60] = True
    regions = region_set(np.zeros((2, 5)), masks=masks)
    lsm = local_style_matching_loss(a, b, regions, regions, toy.extractor).item()
    m = torch.as_tensor(masks[1], dtype=torch.float64)[..., None]
    alone = style_loss((a * m)[30:50, 10:60], (b * m)[30:50, 10:60], toy.extractor).item()
    assert lsm == pytest.approx(alone, rel=1e-12)
    assert lsm > 0


def test_lsm_skips_empty_region(toy, toy_images, caplog):
    a, b = toy_images[0], toy_images[1]
    masks = np.zeros((2, 64, 64), bool)
    masks[0, 5:20, 5:20] = True
    empty = masks.copy()
    empty[0] = False
    masks[1, 30:40, 30:40] = empty[1, 30:40, 30:40] = True
    with caplog.at_level(logging.WARNING):
        val = local_style_matching_loss(a, b, region_set(np.zeros((2, 5)), masks=masks),
                                        region_set(np.zeros((2, 5)), masks=empty), toy.extractor)
    assert "empty" in caplog.text
    m = torch.as_tensor(masks[1], dtype=torch.float64)[..., None]
    expected = style_loss((a * m)[30:40, 30:40], (b * m)[30:40, 30:40], toy.extractor)
    assert val.item() == pytest.approx(expected.item(), rel=1e-12)


def test_lsm_count_mismatch():
    r2, r3 = region_set(np.zeros((2, 5))), region_set(np.zeros((3, 5)))
    with pytest.raises(DimensionError):
        local_style_matching_loss(torch.zeros(8, 8, 3), torch.zeros(8, 8, 3), r2, r3, ident)


def test_regularization_examples():
    assert regularization_loss(torch.zeros(18, 512)).item() == 0.0
    assert regularization_loss(torch.ones(18, 512, dtype=torch.float64)).item() == 1.0


def test_masked_perceptual_examples(toy, toy_images):
    a, b = toy_images[0], toy_images[1]
    ones, zeros = BinaryMask.ones(64, 64), BinaryMask.zeros(64, 64)
    assert masked_perceptual_loss(a, a, ones, toy.extractor).item() == 0.0
    assert masked_perceptual_loss(a, b, zeros, toy.extractor).item() == 0.0
    val = masked_perceptual_loss(t([[[3.0]], [[5.0]]]), t([[[1.0]], [[5.0]]]), BinaryMask(np.array([[1], [0]])), ident)
    assert val.item() == 1.0
    with pytest.raises(DimensionError):
        masked_perceptual_loss(a, b, BinaryMask.ones(32, 32), toy.extractor)
    with pytest.raises(DimensionError):
        masked_perceptual_loss(a, b[:32], ones, toy.extractor)


def test_hair_style_examples(toy, toy_images):
    a, b = toy_images[0], toy_images[1]
    m = toy.segmenter.segment_labels(a).mask_of(toy.hair_class)
    z = BinaryMask.zeros(64, 64)
    assert hair_style_loss(a, a, m, m, toy.extractor).item() == 0.0
    assert hair_style_loss(a, a, z, z, toy.extractor).item() == 0.0
    assert hair_style_loss(a, b, m, m, toy.extractor).item() > 0


def test_segmentation_ce_examples():
    lab = SemanticLabel(np.random.default_rng(0).integers(0, 16, (6, 5)))
    onehot = torch.nn.functional.one_hot(torch.from_numpy(np.array(lab.data)), 16).permute(2, 0, 1).double()
    assert segmentation_ce_loss(lab, onehot).item() <= 1e-9
    uniform = torch.full((16, 6, 5), 1 / 16, dtype=torch.float64)
    assert segmentation_ce_loss(lab, uniform).item() == pytest.approx(math.log(16), abs=1e-12)
    assert segmentation_ce_loss(lab, uniform).item() == pytest.approx(2.7726, abs=1e-4)
    with pytest.raises(ValueError):
        segmentation_ce_loss(np.full((6, 5), 16), torch.ones(16, 6, 5, dtype=torch.float64) / 16)
    with pytest.raises(DimensionError):
        segmentation_ce_loss(lab, uniform[:, :3])


def test_segmentation_ce_region():
    lab = np.zeros((2, 2), dtype=np.int64)
    probs = torch.tensor([[[0.5, 1.0], [1.0, 1.0]], [[0.5, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    region = BinaryMask(np.array([[1, 0], [0, 0]]))
    assert segmentation_ce_loss(lab, probs, region).item() == pytest.approx(math.log(2))
    assert segmentation_ce_loss(lab, probs).item() == pytest.approx(math.log(2) / 4)


def test_loss_breakdown():
    bd = LossBreakdown({"a": torch.tensor(2.0, dtype=torch.float64), "b": torch.tensor(3.0, dtype=torch.float64)},
                       {"a": 1.0, "b": 0.5})
    assert bd.total.item() == 3.5
    bd.check()
    assert bd.row(4) == {"step": 4, "a": 2.0, "b": 3.0, "total": 3.5}
    with pytest.raises(AssertionError):
        LossBreakdown({"a": torch.tensor(-1.0)}).check()
    with pytest.raises(AssertionError):
        LossBreakdown({"a": torch.tensor(1.0)}, total=torch.tensor(2.0)).check()


def test_quick_gradient_check_through_generator(toy, toy_images):
    g = toy.generator
    w0 = g.sample_latent(2)
    target = toy_images[0]
    err = directional_fd_check(lambda w: style_loss(target, g.synthesize(w), toy.extractor), w0, n_dirs=2)
    assert err <= 1e-4
