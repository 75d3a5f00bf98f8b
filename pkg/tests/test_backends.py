import numpy as np
import pytest
import torch

from hairlatent.backends import GeneratorPort, Ports, make_toy_backend
from hairlatent.backends.toy import PALETTE, SKIN_CLASS, keypoint_template
from hairlatent.core import N_CLASSES, N_KEYPOINTS, DimensionError


def test_ports_bundle(toy):
    assert isinstance(toy, Ports)
    assert isinstance(toy.generator, GeneratorPort)
    assert toy.resolution == 64 and toy.dtype == torch.float64
    g = toy.generator
    assert (g.n_layers, g.latent_dim, g.split) == (8, 64, 3)


def test_synthesize_deterministic_and_in_range(toy):
    g = toy.generator
    w = g.sample_latent(3)
    a, b = g.synthesize(w), make_toy_backend().generator.synthesize(w)
    assert torch.equal(a, b)
    assert a.shape == (64, 64, 3)
    assert a.min() >= 0 and a.max() <= 1


def test_factorization_identity(toy):
    g = toy.generator
    w = g.sample_latent(5)
    direct = g.synthesize(w)
    via_f = g.synthesize_from(g.features(w[: g.split]), w[g.split :])
    assert torch.equal(direct, via_f)
    assert tuple(g.features(w[: g.split]).shape) == tuple(g.f_shape)


def test_synthesize_is_smooth(toy):
    g = toy.generator
    w = g.sample_latent(1)
    d = torch.randn_like(w)
    base = g.synthesize(w)
    diffs = [(g.synthesize(w + eps * d) - base).abs().max().item() for eps in (1e-3, 1e-4)]
    assert diffs[0] < 1e-1
    assert diffs[1] == pytest.approx(diffs[0] / 10, rel=0.05)


def test_generator_dimension_errors(toy):
    g = toy.generator
    with pytest.raises(DimensionError):
        g.synthesize(torch.zeros(7, 64, dtype=torch.float64))
    with pytest.raises(DimensionError):
        g.synthesize_from(torch.zeros(3, 3, 3, dtype=torch.float64), torch.zeros(5, 64, dtype=torch.float64))


def test_different_backend_seed_changes_weights():
    a = make_toy_backend(seed=0).generator
    b = make_toy_backend(seed=1).generator
    w = a.sample_latent(0)
    assert not torch.equal(a.synthesize(w), b.synthesize(w))


def test_extractor_layers(toy, toy_images):
    feats = toy.extractor(toy_images[0])
    assert len(feats) == toy.extractor.n_layers == 4
    assert [f.shape[:2] for f in feats] == [(64, 64), (32, 32), (16, 16), (8, 8)]
    # any input size, down to a single pixel
    assert len(toy.extractor(torch.rand(1, 1, 3, dtype=torch.float64))) == 4
    assert toy.extractor(torch.rand(5, 3, 3, dtype=torch.float64))[-1].shape[:2] == (1, 1)


def test_segmenter_probabilities(toy, toy_images):
    for img in list(toy_images.values()) + [torch.full((64, 64, 3), 0.3, dtype=torch.float64)]:
        p = toy.segmenter.segment_probs(img)
        assert p.shape == (N_CLASSES, 64, 64)
        np.testing.assert_allclose(p.sum(0).numpy(), 1.0, atol=1e-6)


def test_segmenter_constant_image_is_smooth_and_deterministic(toy):
    img = torch.full((64, 64, 3), 0.3, dtype=torch.float64)
    p1, p2 = toy.segmenter.segment_probs(img), toy.segmenter.segment_probs(img)
    assert torch.equal(p1, p2)
    # neighbouring pixels differ only slightly: a smooth positional prior
    assert (p1[:, 1:] - p1[:, :-1]).abs().max() < 0.05
    assert (p1[:, :, 1:] - p1[:, :, :-1]).abs().max() < 0.05


def test_segmenter_finds_toy_hair(toy, toy_images):
    labels = toy.segmenter.segment_labels(toy_images[0])
    assert labels.mask_of(toy.hair_class).area() > 50
    assert labels.mask_of(SKIN_CLASS).area() > 50


def test_segmenter_shape_error(toy):
    with pytest.raises(DimensionError):
        toy.segmenter.segment_probs(torch.zeros(32, 32, 3, dtype=torch.float64))


def _blob(dx=0, dy=0):
    img = torch.zeros(64, 64, 3, dtype=torch.float64)
    img[20 + dy : 40 + dy, 22 + dx : 38 + dx] = torch.tensor(PALETTE[1], dtype=torch.float64)
    return img


def test_keypoint_channels_share_mass(toy):
    h = toy.keypoints.extract(_blob())
    assert h.heatmaps.shape == (N_KEYPOINTS, 64, 64)
    mass = h.heatmaps.sum(dim=(1, 2))
    np.testing.assert_allclose(mass.numpy(), mass[0].item(), rtol=1e-9)


def test_keypoints_translate_with_content(toy):
    kp = toy.keypoints
    ca, cb = kp.centers(_blob()), kp.centers(_blob(dx=3, dy=2))
    np.testing.assert_allclose((cb - ca)[:, :2].numpy(), np.tile([3.0, 2.0], (N_KEYPOINTS, 1)), atol=1e-4)
    a, b = kp.extract(_blob()), kp.extract(_blob(dx=3, dy=2))
    # bump argmax is the pixel-rounded centre, so it moves with it to within a pixel
    shift = b.keypoints3d[:, :2] - a.keypoints3d[:, :2]
    assert np.abs(shift - [3.0, 2.0]).max() <= 1.0
    assert np.abs(b.keypoints3d[:, :2] - cb[:, :2].numpy()).max() <= 0.5 + 1e-9
    np.testing.assert_allclose(b.keypoints3d[:, 2], a.keypoints3d[:, 2], atol=1e-6)


def test_keypoints_deterministic(toy, toy_images):
    a = toy.keypoints.extract(toy_images[1])
    b = toy.keypoints.extract(toy_images[1])
    assert torch.equal(a.heatmaps, b.heatmaps)
    assert np.array_equal(a.keypoints3d, b.keypoints3d)


def test_keypoint_template_jaw():
    t = keypoint_template()
    assert t.shape == (N_KEYPOINTS, 3)
    jaw_x = t[:17, 0]
    assert np.all(np.diff(jaw_x) > 0)  # jawline runs left to right
