"""Shared value types, mask algebra and input validation.

Images, F tensors and heatmaps travel between stages as plain ``torch.Tensor``
objects so autograd can flow through them; the wrappers below are used where
a value has invariants worth enforcing at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

# Full-scale defaults. The toy backend overrides most of these.
RESOLUTION = 256
N_LAYERS = 18
LATENT_DIM = 512
SPLIT_INDEX = 6
F_SHAPE = (32, 32, 512)
N_CLASSES = 16
N_KEYPOINTS = 68
N_STYLE = 5

CLASS_NAMES = (
    "background", "skin", "nose", "eye_glasses", "l_eye", "r_eye",
    "l_brow", "r_brow", "l_ear", "r_ear", "mouth", "u_lip",
    "l_lip", "hair", "neck", "cloth",
)
HAIR_CLASS = CLASS_NAMES.index("hair")
BACKGROUND_CLASS = CLASS_NAMES.index("background")


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DivergenceError(RuntimeError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, stage: str, step: int, value: float = float("nan")):
        self.stage = stage
        self.step = step
        self.value = value
        super().__init__(f"{stage}: non-finite loss {value!r} at step {step}")


# ---------------------------------------------------------------------------
# validation helpers


def as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def check_image(img, resolution: int | None = None, name: str = "image") -> torch.Tensor:
    """Validate an H×W×3 image with values in [0, 1] and return it as a tensor."""
    if not isinstance(img, torch.Tensor):
        img = torch.from_numpy(np.array(img, dtype=np.float64))
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"{name} must be H×W×3, got {tuple(img.shape)}")
    if resolution is not None and tuple(img.shape[:2]) != (resolution, resolution):
        raise DimensionError(
            f"{name} must be {resolution}×{resolution}, got {tuple(img.shape[:2])}"
        )
    if not torch.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got [{lo}, {hi}]")
    return img


def check_same_shape(a, b, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# value types


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        arr = as_numpy(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.isin(arr, (0, 1)).all():
            raise ValueError("mask data must be exactly binary")
        object.__setattr__(self, "data", _frozen(arr.astype(np.uint8)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), np.uint8))

    @classmethod
    def ones(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), np.uint8))

    @property
    def shape(self):
        return self.data.shape

    @property
    def bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def area(self) -> int:
        return int(self.data.sum())

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.from_numpy(np.array(self.data)).to(dtype)

    def __invert__(self) -> "BinaryMask":
        return BinaryMask(1 - self.data)

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        check_same_shape(self.data, other.data, "masks")
        return BinaryMask(self.data & other.data)

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        check_same_shape(self.data, other.data, "masks")
        return BinaryMask(self.data | other.data)

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class SemanticLabel:
    data: np.ndarray
    n_classes: int = N_CLASSES

    def __post_init__(self):
        arr = as_numpy(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.array_equal(arr, np.round(arr)):
                raise ValueError("label map must hold integers")
        arr = arr.astype(np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self):
        return self.data.shape

    def mask_of(self, cls: int) -> BinaryMask:
        return BinaryMask(self.data == cls)


@dataclass(frozen=True)
class LatentCode:
    """W+ code: one style vector per generator layer.

    ``split`` is the number of leading (coarse) vectors that produce the F
    tensor; the remaining vectors modulate the layers after it.
    """

    vectors: torch.Tensor
    split: int = SPLIT_INDEX

    def __post_init__(self):
        v = self.vectors
        if not isinstance(v, torch.Tensor):
            v = torch.from_numpy(np.array(v, dtype=np.float64))
        if v.ndim != 2:
            raise DimensionError(f"latent code must be L×D, got {tuple(v.shape)}")
        if not 1 <= self.split < v.shape[0]:
            raise ValueError(f"split index must satisfy 1 <= m < L={v.shape[0]}, got {self.split}")
        object.__setattr__(self, "vectors", v)

    @property
    def n_layers(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def coarse(self) -> torch.Tensor:
        return self.vectors[: self.split]

    @property
    def fine(self) -> torch.Tensor:
        return self.vectors[self.split :]

    def detach(self) -> "LatentCode":
        return LatentCode(self.vectors.detach().clone(), self.split)

    def with_coarse(self, coarse: torch.Tensor) -> "LatentCode":
        """Return a code whose first ``split`` vectors are replaced."""
        check_same_shape(coarse, self.coarse, "coarse latents")
        return LatentCode(torch.cat([coarse, self.fine], dim=0), self.split)


@dataclass(frozen=True)
class KeypointHeatmap:
    heatmaps: torch.Tensor  # 68×H'×W'
    keypoints3d: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.heatmaps.ndim != 3 or self.heatmaps.shape[0] != N_KEYPOINTS:
            raise DimensionError(
                f"keypoint heatmap must be {N_KEYPOINTS}×H×W, got {tuple(self.heatmaps.shape)}"
            )


@dataclass(frozen=True)
class MaskTriplet:
    hair: BinaryMask
    blend: BinaryMask
    keep: BinaryMask

    def __post_init__(self):
        total = self.hair.data.astype(int) + self.blend.data + self.keep.data
        if not (total == 1).all():
            raise ValueError("hair, blend and keep masks must partition the image")

    def stack(self) -> np.ndarray:
        return np.stack([self.hair.data, self.blend.data, self.keep.data])


# ---------------------------------------------------------------------------
# mask algebra


def partition_masks(src_hair: BinaryMask, aligned_hair: BinaryMask) -> MaskTriplet:
    """Split the canvas into aligned-hair, blend and keep regions."""
    check_same_shape(src_hair.data, aligned_hair.data, "masks")
    src = src_hair.bool
    hair = aligned_hair.bool
    return MaskTriplet(
        hair=BinaryMask(hair),
        blend=BinaryMask(src & ~hair),
        keep=BinaryMask(~src & ~hair),
    )


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """n_out×n_in matrix whose rows average the input cells each output cell covers."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap * n_out


def downsample_mask(mask, h_out: int, w_out: int) -> np.ndarray:
    """Area-average a mask (binary or soft) to ``h_out``×``w_out``."""
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"target size must be positive, got {h_out}×{w_out}")
    data = mask.data if isinstance(mask, BinaryMask) else as_numpy(mask)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {data.shape}")
    rows = _area_weights(data.shape[0], h_out)
    cols = _area_weights(data.shape[1], w_out)
    return rows @ data @ cols.T


def downsample_triplet(masks: MaskTriplet, h_out: int, w_out: int) -> np.ndarray:
    """3×h×w soft masks (hair, blend, keep), renormalized to sum to one per cell."""
    soft = np.stack([downsample_mask(m, h_out, w_out) for m in (masks.hair, masks.blend, masks.keep)])
    return soft / soft.sum(axis=0, keepdims=True)
