"""Image → latent: W+ inversion and FS refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .backends.ports import Ports
from .core import DivergenceError, LatentCode, check_image

log = logging.getLogger(__name__)

W_STEPS = 1100
FS_STEPS = 250
LEARNING_RATE = 0.01


@dataclass
class EmbeddingResult:
    w: LatentCode
    f: torch.Tensor | None = None
    loss: float = float("nan")
    history: list = field(default_factory=list)


def reconstruction_loss(generated: torch.Tensor, target: torch.Tensor, feat, target_feats=None) -> torch.Tensor:
    """Pixel MSE plus layer-averaged mean absolute feature distance."""
    mse = ((generated - target) ** 2).mean()
    fg = feat(generated)
    ft = target_feats if target_feats is not None else feat(target)
    percept = torch.stack([(a - b).abs().mean() for a, b in zip(fg, ft)]).mean()
    return mse + percept


def check_finite(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(stage, step, loss.detach().item())


def _descend(param, closure, steps, lr, stage):
    """Adam on a single tensor; returns (best value, best loss, per-step losses)."""
    opt = torch.optim.Adam([param], lr=lr)
    best, best_loss, history = param.detach().clone(), float("inf"), []
    for step in range(steps + 1):
        opt.zero_grad(set_to_none=True)
        loss = closure()
        check_finite(loss, stage, step)
        value = loss.item()
        history.append(value)
        if value < best_loss:
            best, best_loss = param.detach().clone(), value
        if step == steps:
            break
        loss.backward()
        opt.step()
    return best, best_loss, history


def invert_wplus(img, ports: Ports, steps: int = W_STEPS, lr: float = LEARNING_RATE, seed: int = 0) -> EmbeddingResult:
    """Find a W+ code reproducing ``img``, starting from the mean latent.

    The returned code is the lowest-loss iterate, so its loss never exceeds
    the loss at the starting point.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    g = ports.generator
    target = check_image(img, g.resolution).to(g.dtype)
    torch.manual_seed(seed)
    w = g.mean_latent().clone().requires_grad_(True)
    with torch.no_grad():
        target_feats = ports.extractor(target)

    def closure():
        return reconstruction_loss(g.synthesize(w), target, ports.extractor, target_feats)

    best, loss, history = _descend(w, closure, steps, lr, "embed-w")
    log.info("W+ inversion: loss %.6g -> %.6g over %d steps", history[0], loss, steps)
    return EmbeddingResult(LatentCode(best, g.split), None, loss, history)


def embed_fs(img, w: LatentCode, ports: Ports, steps: int = FS_STEPS, lr: float = LEARNING_RATE) -> EmbeddingResult:
    """Refine the F tensor of ``w`` against ``img``; the S part stays fixed."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    g = ports.generator
    target = check_image(img, g.resolution).to(g.dtype)
    fine = w.fine.detach()
    with torch.no_grad():
        f0 = g.features(w.coarse.detach())
    if steps == 0:
        loss = float(reconstruction_loss(g.synthesize_from(f0, fine), target, ports.extractor))
        return EmbeddingResult(w, f0, loss, [loss])
    f = f0.clone().requires_grad_(True)
    with torch.no_grad():
        target_feats = ports.extractor(target)

    def closure():
        return reconstruction_loss(g.synthesize_from(f, fine), target, ports.extractor, target_feats)

    best, loss, history = _descend(f, closure, steps, lr, "embed-fs")
    log.info("FS refinement: loss %.6g -> %.6g over %d steps", history[0], loss, steps)
    return EmbeddingResult(w, best, loss, history)


class LatentInverter(TransformerMixin, BaseEstimator):
    """Transformer mapping an image to its W+ code (and optionally its F tensor).

    ``transform`` maps one H×W×3 image to an :class:`EmbeddingResult`, or a
    batch (N×H×W×3 array or a list of images) to a list of them. The most
    recent result is also kept in ``result_``.
    """

    def __init__(self, ports=None, w_steps=W_STEPS, fs_steps=0, lr=LEARNING_RATE, seed=0):
        self.ports = ports
        self.w_steps = w_steps
        self.fs_steps = fs_steps
        self.lr = lr
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.ports is None:
            raise ValueError("LatentInverter needs a port bundle")
        if self.w_steps < 1:
            raise ValueError(f"w_steps must be >= 1, got {self.w_steps}")
        self.n_layers_ = self.ports.generator.n_layers
        return self

    def transform(self, X):
        if not hasattr(self, "n_layers_"):
            self.fit()
        if isinstance(X, (list, tuple)) or getattr(X, "ndim", 3) == 4:
            return [self.transform(x) for x in X]
        res = invert_wplus(X, self.ports, self.w_steps, self.lr, self.seed)
        if self.fs_steps:
            fs = embed_fs(X, res.w, self.ports, self.fs_steps, self.lr)
            res = EmbeddingResult(res.w, fs.f, fs.loss, res.history + fs.history)
        self.result_ = res
        return res
