"""Deterministic, smooth stand-ins for the pretrained networks.

The toy generator is a seeded stack: a layout layer that draws soft head and
hair ellipses from the first style vector, style-modulated residual
convolutions (3×3 before the split, 1×1 after, with 2× upsampling in the first
fine layers) and a palette output layer that colours each soft class region.
Each style vector drives exactly one layer, so splitting the stack after layer
``split - 1`` gives an exact F/S factorization. The segmenter and
keypoint heads are closed-form smooth functions of pixel colour and position.
Everything runs in float64 on the CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F

from ..core import (
    BACKGROUND_CLASS,
    CLASS_NAMES,
    HAIR_CLASS,
    N_CLASSES,
    N_KEYPOINTS,
    DimensionError,
    KeypointHeatmap,
)
from .ports import (
    FeatureExtractorPort,
    GeneratorPort,
    KeypointExtractorPort,
    Ports,
    SegmenterPort,
)

DTYPE = torch.float64


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    resolution: int = 64
    n_layers: int = 8
    latent_dim: int = 64
    split: int = 3
    channels: int = 16
    f_resolution: int = 32
    n_mean_samples: int = 10_000
    keypoint_sigma: float = 2.0
    feature_scale: float = 0.05


def _hwc_to_nchw(img: torch.Tensor) -> torch.Tensor:
    return img.permute(2, 0, 1).unsqueeze(0)


def _nchw_to_hwc(x: torch.Tensor) -> torch.Tensor:
    return x.squeeze(0).permute(1, 2, 0)


# Palette entries: background, skin, hair. Kept away from 0 and 1 so the
# mixed colour plus texture residual stays inside [0, 1].
PALETTE = ((0.55, 0.60, 0.70), (0.85, 0.65, 0.55), (0.32, 0.24, 0.16))
# per-entry colour jitter driven by the output style vector; hair varies most
PALETTE_JITTER = (0.05, 0.05, 0.12)
SKIN_CLASS = CLASS_NAMES.index("skin")


class ToyGenerator(GeneratorPort):
    """Layout layer, residual style convolutions, palette output layer.

    Layer 0 draws soft head/hair ellipses whose pose and size are smooth
    functions of the first style vector. Layers 1..L-2 are style-modulated
    residual convolutions: 3×3 before the F split, 1×1 after it, with the
    first fine layers upsampling bilinearly to the output resolution. The last layer mixes a three-colour
    palette with a small texture residual.
    """

    def __init__(self, cfg: ToyConfig):
        n_up = int(round(math.log2(cfg.resolution / cfg.f_resolution)))
        if cfg.f_resolution * 2**n_up != cfg.resolution:
            raise ValueError(f"resolution {cfg.resolution} is not f_resolution·2^k")
        if not 1 <= cfg.split < cfg.n_layers:
            raise ValueError(f"split must satisfy 1 <= m < L, got {cfg.split}")
        n_fine = cfg.n_layers - cfg.split - 1
        if n_fine < n_up:
            raise ValueError(f"need {n_up} fine layers before the output layer, got {n_fine}")
        self.cfg = cfg
        self.n_layers = cfg.n_layers
        self.latent_dim = cfg.latent_dim
        self.split = cfg.split
        self.resolution = cfg.resolution
        self.dtype = DTYPE

        g = torch.Generator().manual_seed(cfg.seed)
        C, D = cfg.channels, cfg.latent_dim

        def randn(*shape):
            return torch.randn(*shape, generator=g, dtype=DTYPE)

        f_res = cfg.f_resolution
        self.f_shape = (f_res, f_res, C)
        # the first n_up fine layers each upsample 2×
        self.upsamples = set(range(cfg.split, cfg.split + n_up))

        self.layout = randn(8, D) / math.sqrt(D)
        self.wave_dirs = randn(C - 3, 2) * 2.0
        self.wave_phase = randn(C - 3, D) / math.sqrt(D)
        coords = torch.linspace(0.0, 1.0, f_res, dtype=DTYPE)
        self.fy, self.fx = torch.meshgrid(coords, coords, indexing="ij")

        # coarse layers mix spatially (3×3); fine layers act per pixel (1×1)
        self.weights, self.mod, self.bias = [None], [None], [None]
        for i in range(1, cfg.n_layers - 1):
            k = 3 if i < cfg.split else 1
            self.weights.append(randn(C, C, k, k) * (0.8 / math.sqrt(k * k * C)))
            self.mod.append(randn(C, D) / math.sqrt(D))
            self.bias.append(randn(C, D) / math.sqrt(D))
        self.palette = torch.tensor(PALETTE, dtype=DTYPE)
        self.jitter = torch.tensor(PALETTE_JITTER, dtype=DTYPE)[:, None]
        self.palette_mod = randn(3, 3, D) / math.sqrt(D)
        self.texture = randn(3, C - 3) / math.sqrt(C - 3)
        self.texture_mod = randn(3, C - 3, D) / math.sqrt(D)
        self.out_mod = randn(3, D) / math.sqrt(D)

        self.map1 = randn(D, D) / math.sqrt(D)
        self.map2 = randn(D, D) / math.sqrt(D)

    # -- mapping ---------------------------------------------------------------

    def map_z(self, z: torch.Tensor) -> torch.Tensor:
        """Smooth mapping from Gaussian z (…×D) to style space."""
        h = torch.tanh(1.5 * z @ self.map1.T)
        return h @ self.map2.T

    def sample_latent(self, seed: int, jitter: float = 0.3) -> torch.Tensor:
        """A W+ code: one mapped z shared by all layers plus per-layer jitter."""
        g = torch.Generator().manual_seed(int(seed))
        z = torch.randn(1, self.latent_dim, generator=g, dtype=DTYPE)
        base = self.map_z(z)
        per_layer = self.map_z(torch.randn(self.n_layers, self.latent_dim, generator=g, dtype=DTYPE))
        return (1 - jitter) * base.expand(self.n_layers, -1) + jitter * per_layer

    @cached_property
    def _mean_latent(self) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.cfg.seed + 7919)
        z = torch.randn(self.cfg.n_mean_samples, self.latent_dim, generator=g, dtype=DTYPE)
        mean = self.map_z(z).mean(dim=0)
        return mean.expand(self.n_layers, -1).clone()

    def mean_latent(self) -> torch.Tensor:
        return self._mean_latent.clone()

    # -- synthesis -------------------------------------------------------------

    def _layout(self, w0: torch.Tensor) -> torch.Tensor:
        p = torch.tanh(self.layout @ w0)
        cx, cy = 0.5 + 0.15 * p[0], 0.58 + 0.08 * p[1]
        rx, ry = 0.2 + 0.04 * p[2], 0.26 + 0.04 * p[3]
        hx, hy = cx + 0.06 * p[4], cy - 0.12 + 0.04 * p[5]
        hrx, hry = rx * (1.3 + 0.15 * p[6]), ry * (1.0 + 0.15 * p[7])
        x, y = self.fx, self.fy
        head = 1.0 - ((x - cx) / rx) ** 2 - ((y - cy) / ry) ** 2
        hair = 1.0 - ((x - hx) / hrx) ** 2 - ((y - hy) / hry) ** 2
        skin_logit = 6.0 * head + 3.0 * (y - cy) / ry
        hair_logit = 6.0 * hair
        phase = self.wave_phase @ w0
        arg = self.wave_dirs[:, 0, None, None] * x + self.wave_dirs[:, 1, None, None] * y
        waves = 0.5 * torch.sin(2 * math.pi * arg + phase[:, None, None])
        bg = torch.zeros_like(x)
        return torch.cat([torch.stack([bg, skin_logit, hair_logit]), waves]).unsqueeze(0)

    def _layer(self, i: int, x: torch.Tensor, w_i: torch.Tensor) -> torch.Tensor:
        if i in self.upsamples:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        scale = 1.0 + 0.5 * (self.mod[i] @ w_i)
        shift = 0.5 * (self.bias[i] @ w_i)
        weight = self.weights[i]
        y = F.conv2d(x * scale[None, :, None, None], weight, padding=weight.shape[-1] // 2)
        gain = 0.5 if i < self.split else 0.25
        return x + gain * torch.tanh(y + shift[None, :, None, None])

    def _to_rgb(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        logits = x[0, :3] * (1.0 + 0.2 * (self.out_mod @ w))[:, None, None]
        weights = torch.softmax(logits, dim=0)  # 3×H×W
        palette = self.palette + self.jitter * torch.tanh(self.palette_mod @ w)  # 3 colours × rgb
        rgb = torch.einsum("khw,kc->chw", weights, palette)
        # texture styled separately per palette entry, then gated by the same weights
        gains = 1.0 + 0.5 * (self.texture_mod @ w)  # 3×(C-3)
        tex = torch.tanh(x[0, 3:][None] * gains[:, :, None, None])  # 3×(C-3)×H×W
        tex = (weights[:, None] * tex).sum(dim=0)
        rgb = rgb + 0.06 * torch.tanh(torch.einsum("ck,khw->chw", self.texture, tex))
        return rgb.permute(1, 2, 0)

    def _check(self, w: torch.Tensor, n: int, what: str):
        if w.ndim != 2 or tuple(w.shape) != (n, self.latent_dim):
            raise DimensionError(f"{what} must be {n}×{self.latent_dim}, got {tuple(w.shape)}")

    def features(self, w_coarse: torch.Tensor) -> torch.Tensor:
        self._check(w_coarse, self.split, "coarse latent")
        x = self._layout(w_coarse[0])
        for i in range(1, self.split):
            x = self._layer(i, x, w_coarse[i])
        return _nchw_to_hwc(x)

    def synthesize_from(self, f: torch.Tensor, w_fine: torch.Tensor) -> torch.Tensor:
        self._check(w_fine, self.n_layers - self.split, "fine latent")
        if tuple(f.shape) != self.f_shape:
            raise DimensionError(f"F tensor must be {self.f_shape}, got {tuple(f.shape)}")
        x = _hwc_to_nchw(f)
        for j, i in enumerate(range(self.split, self.n_layers - 1)):
            x = self._layer(i, x, w_fine[j])
        return self._to_rgb(x, w_fine[-1])

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        self._check(w, self.n_layers, "latent code")
        return super().synthesize(w)


class ToyFeatureExtractor(FeatureExtractorPort):
    """Four fixed conv+softplus layers with 2× average pooling between them.

    Only the first layer has a 3×3 kernel; deeper layers are 1×1 so a
    feature's footprint grows through pooling alone.
    """

    CHANNELS = (8, 16, 16, 32)
    KERNELS = (3, 1, 1, 1)

    def __init__(self, cfg: ToyConfig):
        g = torch.Generator().manual_seed(cfg.seed + 104729)
        self.scale = cfg.feature_scale
        self.n_layers = len(self.CHANNELS)
        self.weights = []
        c_in = 3
        for c_out, k in zip(self.CHANNELS, self.KERNELS):
            w = torch.randn(c_out, c_in, k, k, generator=g, dtype=DTYPE) / math.sqrt(k * k * c_in)
            self.weights.append(w)
            c_in = c_out

    def extract(self, img: torch.Tensor) -> list:
        if img.ndim != 3 or img.shape[-1] != 3:
            raise DimensionError(f"extractor expects H×W×3, got {tuple(img.shape)}")
        x = _hwc_to_nchw(img) * 2.0 - 1.0
        out = []
        for i, w in enumerate(self.weights):
            if i > 0:
                h, wd = x.shape[-2:]
                x = F.adaptive_avg_pool2d(x, (max(1, -(-h // 2)), max(1, -(-wd // 2))))
            x = F.softplus(F.conv2d(x, w, padding=w.shape[-1] // 2), beta=4.0)
            out.append(_nchw_to_hwc(x) * self.scale)
        return out


def _class_prototypes(seed: int) -> torch.Tensor:
    """16 reference colours; background/skin/hair sit on the generator palette."""
    rng = np.random.default_rng(seed + 31)
    anchors = np.asarray(PALETTE)
    protos = np.empty((N_CLASSES, 3))
    k = 0
    while k < N_CLASSES:
        c = 0.05 + 0.9 * rng.random(3)
        if np.linalg.norm(anchors - c, axis=1).min() >= 0.45:
            protos[k] = c
            k += 1
    protos[BACKGROUND_CLASS], protos[SKIN_CLASS], protos[HAIR_CLASS] = PALETTE
    return torch.as_tensor(protos, dtype=DTYPE)


class ToySegmenter(SegmenterPort):
    """Softmax over colour-prototype distances plus smooth positional priors."""

    def __init__(self, cfg: ToyConfig, temperature: float = 0.02, prior_weight: float = 0.5):
        self.n_classes = N_CLASSES
        self.temperature = temperature
        self.prototypes = _class_prototypes(cfg.seed)
        res = cfg.resolution
        rng = np.random.default_rng(cfg.seed + 17)
        centers = rng.random((N_CLASSES, 2))
        yy, xx = np.meshgrid(np.linspace(0, 1, res), np.linspace(0, 1, res), indexing="ij")
        d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
        self.prior = torch.as_tensor(prior_weight * np.exp(-d2 / 0.18), dtype=DTYPE)
        blur = torch.tensor([1.0, 2.0, 1.0], dtype=DTYPE)
        kernel = torch.outer(blur, blur) / 16.0
        self.kernel = kernel.expand(3, 1, 3, 3).clone()

    def segment_probs(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 3 or img.shape[-1] != 3:
            raise DimensionError(f"segmenter expects H×W×3, got {tuple(img.shape)}")
        if tuple(img.shape[:2]) != tuple(self.prior.shape[1:]):
            raise DimensionError(
                f"segmenter expects {tuple(self.prior.shape[1:])} images, got {tuple(img.shape[:2])}"
            )
        x = F.conv2d(F.pad(_hwc_to_nchw(img), (1, 1, 1, 1), mode="replicate"), self.kernel, groups=3)
        colors = x.squeeze(0)  # 3×H×W
        d2 = ((colors[None] - self.prototypes[:, :, None, None]) ** 2).sum(dim=1)
        logits = -d2 / self.temperature + self.prior
        return torch.softmax(logits, dim=0)


def keypoint_template() -> np.ndarray:
    """Canonical 68-point layout (x, y, z) in a unit-scale face frame."""
    pts = []
    for t in np.linspace(-1.0, 1.0, 17):  # jaw 0–16
        ang = t * 0.45 * np.pi
        pts.append((1.2 * np.sin(ang), 0.2 + 1.1 * np.cos(ang), -0.6 * np.cos(ang)))
    for side in (-1, 1):  # brows 17–26
        for t in np.linspace(0.2, 1.0, 5):
            pts.append((side * t * 0.9, -0.7 - 0.1 * np.sin(t * np.pi), 0.4))
    for t in np.linspace(-0.55, 0.25, 4):  # nose bridge 27–30
        pts.append((0.0, t, 0.6 + 0.4 * (t + 0.55)))
    for t in np.linspace(-0.35, 0.35, 5):  # nostrils 31–35
        pts.append((t, 0.4, 0.7 - abs(t)))
    for side in (-1, 1):  # eyes 36–47
        for a in np.linspace(0, 2 * np.pi, 6, endpoint=False):
            pts.append((side * 0.5 + 0.2 * np.cos(a), -0.4 + 0.08 * np.sin(a), 0.35))
    for a in np.linspace(0, 2 * np.pi, 12, endpoint=False):  # outer lip 48–59
        pts.append((0.45 * np.cos(a), 0.8 + 0.18 * np.sin(a), 0.5))
    for a in np.linspace(0, 2 * np.pi, 8, endpoint=False):  # inner lip 60–67
        pts.append((0.3 * np.cos(a), 0.8 + 0.07 * np.sin(a), 0.5))
    out = np.asarray(pts, dtype=np.float64)
    assert out.shape == (N_KEYPOINTS, 3)
    return out


class ToyKeypointExtractor(KeypointExtractorPort):
    """Gaussian bumps placed from the moments of a skin-likeness map.

    Weight map ``q`` is a pointwise colour function, so translating the image
    content (on a zero-weight background) translates every bump.
    """

    def __init__(self, cfg: ToyConfig, skin_class: int = SKIN_CLASS, spread: float = 0.03):
        self.sigma = cfg.keypoint_sigma
        self.resolution = cfg.resolution
        self.skin = _class_prototypes(cfg.seed)[skin_class]
        self.spread = spread
        self.template = torch.as_tensor(keypoint_template(), dtype=DTYPE)
        coords = torch.arange(cfg.resolution, dtype=DTYPE)
        self.yy, self.xx = torch.meshgrid(coords, coords, indexing="ij")

    def weight_map(self, img: torch.Tensor) -> torch.Tensor:
        d2 = ((img - self.skin) ** 2).sum(dim=-1)
        return torch.exp(-d2 / self.spread)

    def centers(self, img: torch.Tensor) -> torch.Tensor:
        """Continuous 68×3 keypoint positions (x, y in pixels, z arbitrary)."""
        q = self.weight_map(img) + 1e-8
        mass = q.sum()
        cx = (q * self.xx).sum() / mass
        cy = (q * self.yy).sum() / mass
        sx = torch.sqrt((q * (self.xx - cx) ** 2).sum() / mass + 1.0)
        sy = torch.sqrt((q * (self.yy - cy) ** 2).sum() / mass + 1.0)
        u = self.template
        kx = cx + sx * u[:, 0]
        ky = cy + sy * u[:, 1]
        kz = 0.5 * (sx + sy) * u[:, 2]
        return torch.stack([kx, ky, kz], dim=1)

    def extract(self, img: torch.Tensor) -> KeypointHeatmap:
        if img.ndim != 3 or tuple(img.shape) != (self.resolution, self.resolution, 3):
            raise DimensionError(
                f"keypoint head expects {self.resolution}×{self.resolution}×3, got {tuple(img.shape)}"
            )
        k = self.centers(img)
        d2 = (self.xx[None] - k[:, 0, None, None]) ** 2 + (self.yy[None] - k[:, 1, None, None]) ** 2
        heat = torch.exp(-d2 / (2 * self.sigma**2))
        flat = heat.detach().reshape(N_KEYPOINTS, -1).argmax(dim=1).numpy()
        ys, xs = np.unravel_index(flat, (self.resolution, self.resolution))
        k3 = np.stack([xs, ys, k[:, 2].detach().numpy()], axis=1).astype(np.float64)
        return KeypointHeatmap(heat, k3)


def make_toy_backend(cfg: ToyConfig | None = None, **overrides) -> Ports:
    """Build the full toy port bundle; keyword overrides patch ``ToyConfig``."""
    cfg = cfg or ToyConfig()
    if overrides:
        cfg = ToyConfig(**{**cfg.__dict__, **overrides})
    return Ports(
        generator=ToyGenerator(cfg),
        extractor=ToyFeatureExtractor(cfg),
        keypoints=ToyKeypointExtractor(cfg),
        segmenter=ToySegmenter(cfg),
        hair_class=HAIR_CLASS,
        background_class=BACKGROUND_CLASS,
        class_names=CLASS_NAMES,
    )
