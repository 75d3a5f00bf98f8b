"""Capability contracts for the four pretrained networks the method relies on.

Every image crossing these interfaces is an H×W×3 tensor in [0, 1]; feature
maps are H'×W'×C. Implementations must be differentiable with respect to
their tensor inputs and must not mutate internal state after construction.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import torch

from ..core import HAIR_CLASS, BACKGROUND_CLASS, CLASS_NAMES, KeypointHeatmap, SemanticLabel


class GeneratorPort(abc.ABC):
    n_layers: int
    latent_dim: int
    split: int
    resolution: int
    f_shape: tuple

    @abc.abstractmethod
    def features(self, w_coarse: torch.Tensor) -> torch.Tensor:
        """Map the first ``split`` style vectors to the F tensor (h×w×C)."""

    @abc.abstractmethod
    def synthesize_from(self, f: torch.Tensor, w_fine: torch.Tensor) -> torch.Tensor:
        """Render an image from an F tensor and the remaining style vectors."""

    def synthesize(self, w: torch.Tensor) -> torch.Tensor:
        w = torch.as_tensor(w)
        return self.synthesize_from(self.features(w[: self.split]), w[self.split :])

    @abc.abstractmethod
    def mean_latent(self) -> torch.Tensor:
        """L×D starting point for inversion."""


class FeatureExtractorPort(abc.ABC):
    n_layers: int

    @abc.abstractmethod
    def extract(self, img: torch.Tensor) -> list:
        """Return one H'×W'×C activation per layer; any input size ≥ 1×1."""

    def __call__(self, img):
        return self.extract(img)


class KeypointExtractorPort(abc.ABC):
    @abc.abstractmethod
    def extract(self, img: torch.Tensor) -> KeypointHeatmap:
        ...


class SegmenterPort(abc.ABC):
    n_classes: int

    @abc.abstractmethod
    def segment_probs(self, img: torch.Tensor) -> torch.Tensor:
        """K×H×W per-pixel class probabilities."""

    def segment_labels(self, img: torch.Tensor) -> SemanticLabel:
        with torch.no_grad():
            probs = self.segment_probs(img)
        return SemanticLabel(probs.argmax(dim=0).cpu().numpy(), self.n_classes)


@dataclass(frozen=True)
class Ports:
    """The bundle of networks one pipeline run talks to."""

    generator: GeneratorPort
    extractor: FeatureExtractorPort
    keypoints: KeypointExtractorPort
    segmenter: SegmenterPort
    hair_class: int = HAIR_CLASS
    background_class: int = BACKGROUND_CLASS
    class_names: tuple = CLASS_NAMES
    shareable: bool = True

    @property
    def resolution(self) -> int:
        return self.generator.resolution

    @property
    def dtype(self):
        return getattr(self.generator, "dtype", torch.float32)
