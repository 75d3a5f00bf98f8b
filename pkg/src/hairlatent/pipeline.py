"""End-to-end driver: embed → align → inpaint → blend with per-stage persistence.

Each stage writes its outputs under ``<out>/<stage>/`` together with a
``stage.json`` record. A stage is skipped on re-run when its record carries
the same key (config fingerprint, input digests, stage name) and every
artifact it lists is on disk. Later stages only ever read the persisted
(float32) outputs of earlier ones, so a resumed run and a straight run see
identical inputs at every stage.
"""

from __future__ import annotations

import csv
import hashlib
import importlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import __version__
from .alignment import AlignmentConfig, align_target_hair, extract_hair_mask
from .backends import Ports, make_toy_backend
from .blending import BlendConfig, optimize_blend
from .config import ConfigError, PipelineConfig
from .core import BinaryMask, DivergenceError, LatentCode, SemanticLabel, partition_masks
from .embedding import embed_fs, invert_wplus
from .inpainting import build_objective_label, inpaint_source
from .metrics import read_pairs_csv, resolve, ssim
from .persist import (
    load_tensor,
    read_image,
    read_label_png,
    save_tensor,
    write_image,
    write_json_atomic,
    write_label_png,
)
from .superpixels import region_overlay

log = logging.getLogger(__name__)

STAGES = ("embed", "align", "inpaint", "blend")
# the nine artifacts a completed run must list
ARTIFACTS = ("w_src", "w_trg", "f_src", "w_align", "w_inpaint", "w_weight", "s_obj", "masks", "image")
SCHEMA_PATH = Path(__file__).with_name("schemas") / "reconstruction_eval.schema.json"


class StageFailure(RuntimeError):
    """A stage diverged; the manifest on disk records which one."""

    def __init__(self, stage: str, cause: Exception, manifest_path: Path):
        self.stage, self.cause, self.manifest_path = stage, cause, manifest_path
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class RunManifest:
    config: dict
    seed: int
    tool_version: str
    status: str = "running"
    stages: dict = field(default_factory=dict)  # name -> {seconds, resumed, final_losses}
    artifacts: dict = field(default_factory=dict)  # name -> path relative to the run dir
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "status": self.status,
            "stages": self.stages,
            "artifacts": self.artifacts,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(**d)


def make_backend(cfg: PipelineConfig) -> Ports:
    """Toy ports, or whatever ``external_factory`` (``module:callable``) returns."""
    if cfg.backend == "toy":
        return make_toy_backend(seed=cfg.backend_seed, resolution=cfg.resolution,
                                n_layers=cfg.n_layers, latent_dim=cfg.latent_dim)
    mod_name, _, attr = cfg.external_factory.partition(":")
    try:
        factory = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load external backend {cfg.external_factory!r}: {exc}") from None
    ports = factory(checkpoint_dir=cfg.checkpoint_dir, resolution=cfg.resolution)
    if not isinstance(ports, Ports):
        raise ConfigError(f"{cfg.external_factory} did not return a Ports bundle")
    return ports


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_losses_csv(path, rows) -> Path:
    """Rows are dicts; columns are the union of keys in first-seen order."""
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


class _Run:
    """Mutable state of one ``run_transfer`` call."""

    def __init__(self, src_path, trg_path, cfg: PipelineConfig, ports: Ports):
        self.cfg, self.ports = cfg, ports
        self.out = Path(cfg.out)
        self.src_path, self.trg_path = Path(src_path), Path(trg_path)
        self.base_key = hashlib.sha256(
            f"{cfg.fingerprint()}|{_digest(src_path)}|{_digest(trg_path)}".encode()
        ).hexdigest()[:16]
        res = ports.resolution
        self.i_src = read_image(src_path, res).to(ports.dtype)
        self.i_trg = read_image(trg_path, res).to(ports.dtype)
        self.manifest = RunManifest(cfg.to_dict(), cfg.seed, __version__)
        self.invalidate_rest = False

    # -- stage bookkeeping -------------------------------------------------
    def key(self, stage: str) -> str:
        return f"{self.base_key}:{stage}"

    def record_path(self, stage: str) -> Path:
        return self.out / stage / "stage.json"

    def cached(self, stage: str) -> dict | None:
        if self.invalidate_rest:
            return None
        path = self.record_path(stage)
        if not path.is_file():
            return None
        try:
            rec = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        if rec.get("key") != self.key(stage):
            return None
        if not all((self.out / p).exists() for p in rec["artifacts"].values()):
            return None
        return rec

    def run_stage(self, stage: str, fn):
        rec = self.cached(stage)
        if rec is not None:
            log.info("stage %s: resumed from %s", stage, self.record_path(stage))
            resumed = True
        else:
            # anything downstream of a recomputed stage is recomputed too
            self.invalidate_rest = True
            stage_dir = self.out / stage
            if stage_dir.exists():
                shutil.rmtree(stage_dir)
            stage_dir.mkdir(parents=True)
            t0 = time.perf_counter()
            try:
                artifacts, final_losses = fn(stage_dir)
            except DivergenceError as exc:
                self.fail(stage, exc)
            rec = {
                "key": self.key(stage),
                "artifacts": {k: str(Path(v).relative_to(self.out)) for k, v in artifacts.items()},
                "final_losses": final_losses,
                "seconds": time.perf_counter() - t0,
            }
            write_json_atomic(self.record_path(stage), rec)
            resumed = False
        self.manifest.stages[stage] = {
            "seconds": rec["seconds"],
            "resumed": resumed,
            "final_losses": rec["final_losses"],
        }
        self.manifest.artifacts.update(rec["artifacts"])

    def fail(self, stage: str, exc: Exception):
        self.manifest.status = "failed"
        self.manifest.failed_stage = stage
        self.manifest.error = str(exc)
        path = write_json_atomic(self.out / "manifest.json", self.manifest.to_dict())
        raise StageFailure(stage, exc, path) from exc

    def load(self, name: str) -> torch.Tensor:
        return load_tensor(self.out / self.manifest.artifacts[name]).to(self.ports.dtype)

    def latent(self, name: str) -> LatentCode:
        return LatentCode(self.load(name), self.ports.generator.split)

    # -- stages --------------------------------------------------------------
    def embed(self, d: Path):
        cfg, p = self.cfg, self.ports
        r_src = invert_wplus(self.i_src, p, cfg.w_steps, cfg.lr, cfg.seed)
        r_trg = invert_wplus(self.i_trg, p, cfg.w_steps, cfg.lr, cfg.seed)
        # F is refined against the code as it will be read back from disk
        w_src_f32 = torch.from_numpy(r_src.w.vectors.numpy().astype(np.float32)).to(p.dtype)
        r_fs = embed_fs(self.i_src, LatentCode(w_src_f32, p.generator.split), p, cfg.fs_steps, cfg.lr)
        rows = [{"phase": "w_src", "step": i, "total": v} for i, v in enumerate(r_src.history)]
        rows += [{"phase": "w_trg", "step": i, "total": v} for i, v in enumerate(r_trg.history)]
        rows += [{"phase": "f_src", "step": i, "total": v} for i, v in enumerate(r_fs.history)]
        write_losses_csv(d / "losses.csv", rows)
        arts = {
            "w_src": save_tensor(d, "w_src", r_src.w.vectors),
            "w_trg": save_tensor(d, "w_trg", r_trg.w.vectors),
            "f_src": save_tensor(d, "f_src", r_fs.f),
        }
        return arts, {"w_src": r_src.loss, "w_trg": r_trg.loss, "f_src": r_fs.loss}

    def align(self, d: Path):
        cfg, p = self.cfg, self.ports
        acfg = AlignmentConfig(
            steps=cfg.align_steps, m=cfg.m, lambda_lsm=cfg.lambda_lsm, lambda_reg=cfg.lambda_reg, lr=cfg.lr,
            n_regions=cfg.n_regions, compactness=cfg.compactness, slic_iters=cfg.slic_iters, seed=cfg.seed,
            use_lsm=not cfg.no_lsm, use_reg=not cfg.no_reg, rematch_target=cfg.rematch_target,
            strict_reg=cfg.strict_reg, crop_regions=not cfg.no_crop, save_every=cfg.save_every,
        )
        h_src = p.keypoints.extract(self.i_src)
        r = align_target_hair(self.latent("w_trg"), self.i_trg, h_src, p, acfg)
        write_losses_csv(d / "losses.csv", r.history)
        for step, regions in r.regions:
            write_image(d / "regions" / f"step_{step:04d}.png", region_overlay(regions))
        for step, img in r.snapshots:
            write_image(d / "snapshots" / f"step_{step:04d}.png", img)
        arts = {"w_align": save_tensor(d, "w_align", r.w_align.vectors)}
        # the hair mask is taken from the image of the code as persisted
        with torch.no_grad():
            i_align = p.generator.synthesize(load_tensor(arts["w_align"]).to(p.dtype))
        hair = extract_hair_mask(i_align, p.segmenter, p.hair_class)
        arts["m_align_hair"] = save_tensor(d, "m_align_hair", hair.data.astype(np.float32))
        arts["i_align"] = write_image(d / "i_align.png", i_align)
        return arts, _final(r.history)

    def inpaint(self, d: Path):
        cfg, p = self.cfg, self.ports
        s_src = p.segmenter.segment_labels(self.i_src)
        src_hair = s_src.mask_of(p.hair_class)
        aligned = BinaryMask(self.load("m_align_hair").numpy() > 0.5)
        s_obj = build_objective_label(s_src, src_hair, aligned, p.hair_class, p.background_class)
        r = inpaint_source(self.latent("w_src"), s_obj, p, cfg.inpaint_steps, cfg.m, cfg.lr,
                           restrict_to_inpaint=cfg.ce_inpaint_only)
        write_losses_csv(d / "losses.csv", r.history)
        arts = {
            "w_inpaint": save_tensor(d, "w_inpaint", r.w_inpaint.vectors),
            "s_obj": write_label_png(d / "s_obj.png", s_obj.label, p.class_names),
            "i_inpaint": write_image(d / "i_inpaint.png", r.image),
        }
        return arts, _final(r.history)

    def blend(self, d: Path):
        cfg, p = self.cfg, self.ports
        g = p.generator
        s_src = p.segmenter.segment_labels(self.i_src)
        aligned = BinaryMask(self.load("m_align_hair").numpy() > 0.5)
        masks = partition_masks(s_src.mask_of(p.hair_class), aligned)
        w_align = self.latent("w_align")
        with torch.no_grad():
            i_align = g.synthesize(w_align.vectors)
        bcfg = BlendConfig(steps=cfg.blend_steps, lambda_hair_percept=cfg.lambda_hair_percept,
                           lambda_hair_style=cfg.lambda_hair_style, lr=cfg.lr, convex=cfg.convex_blend,
                           per_layer=cfg.per_layer_weight)
        m_trg_hair = extract_hair_mask(self.i_trg, p.segmenter, p.hair_class)
        r = optimize_blend(self.latent("w_inpaint"), w_align, self.load("f_src"), self.i_src, i_align, self.i_trg,
                           masks, m_trg_hair, p, bcfg)
        write_losses_csv(d / "losses.csv", r.history)
        arts = {
            "w_weight": save_tensor(d, "w_weight", r.w_weight),
            "masks": save_tensor(d, "masks", masks.stack().astype(np.float32)),
            "f_final": save_tensor(d, "f_final", r.f_final),
            "i_final": save_tensor(d, "i_final", r.image),
            "image": write_image(d / "final.png", r.image),
        }
        return arts, _final(r.history)


def _final(history) -> dict:
    return {k: v for k, v in history[-1].items() if k != "step"}


def run_transfer(src_path, trg_path, cfg: PipelineConfig, ports: Ports | None = None) -> RunManifest:
    """Transfer the hairstyle of ``trg_path`` onto ``src_path``; outputs go to ``cfg.out``.

    Raises ``OSError`` for unreadable inputs and ``StageFailure`` when a
    stage diverges (after writing a manifest naming the stage).
    """
    for path in (src_path, trg_path):
        if not Path(path).is_file():
            raise FileNotFoundError(f"input image not found: {path}")
    ports = ports or make_backend(cfg)
    if cfg.m >= ports.generator.n_layers:
        raise ConfigError(f"m={cfg.m} must be smaller than the generator depth {ports.generator.n_layers}")
    run = _Run(src_path, trg_path, cfg, ports)
    run.out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    for stage in STAGES:
        run.run_stage(stage, getattr(run, stage))
    run.manifest.status = "ok"
    missing = [k for k, v in run.manifest.artifacts.items() if not (run.out / v).exists()]
    if missing:
        raise RuntimeError(f"artifacts missing after run: {missing}")
    write_json_atomic(run.out / "manifest.json", run.manifest.to_dict())
    return run.manifest


def load_final_image(out_dir) -> torch.Tensor:
    manifest = RunManifest.load(Path(out_dir) / "manifest.json")
    return load_tensor(Path(out_dir) / manifest.artifacts["i_final"])


def load_objective_label(out_dir) -> SemanticLabel:
    manifest = RunManifest.load(Path(out_dir) / "manifest.json")
    return read_label_png(Path(out_dir) / manifest.artifacts["s_obj"])


def run_reconstruction_eval(pairs_csv, cfg: PipelineConfig, ports: Ports | None = None) -> dict:
    """Transfer each pair's target hair onto its source and score against the source.

    Writes ``<out>/reconstruction_eval.json`` and returns the same dict.
    """
    import jsonschema

    rows = read_pairs_csv(pairs_csv)
    if not rows:
        raise ValueError(f"{pairs_csv}: no pairs")
    ports = ports or make_backend(cfg)
    out = Path(cfg.out)
    per_pair = []
    for i, row in enumerate(rows):
        src, trg = resolve(pairs_csv, row["path_src"]), resolve(pairs_csv, row["path_trg"])
        run_cfg = cfg.replace(out=str(out / f"pair_{i:04d}"))
        run_transfer(src, trg, run_cfg, ports)
        truth = read_image(src, ports.resolution)
        score = ssim(load_final_image(run_cfg.out), truth)
        per_pair.append({"path_src": row["path_src"], "path_trg": row["path_trg"], "ssim": score,
                         "run_dir": run_cfg.out})
    scores = np.array([r["ssim"] for r in per_pair])
    report = {
        "n_pairs": len(per_pair),
        "ssim_mean": float(scores.mean()),
        "ssim_std": float(scores.std()),
        "per_pair": per_pair,
    }
    jsonschema.validate(report, json.loads(SCHEMA_PATH.read_text()))
    write_json_atomic(out / "reconstruction_eval.json", report)
    return report


def make_fixture_pair(directory, src_seed: int = 4, trg_seed: int = 7, ports: Ports | None = None) -> tuple:
    """Write two toy-generated portraits as PNGs; returns their paths."""
    ports = ports or make_toy_backend()
    g = ports.generator
    directory = Path(directory)
    paths = []
    for name, seed in (("src", src_seed), ("trg", trg_seed)):
        with torch.no_grad():
            img = g.synthesize(g.sample_latent(seed))
        paths.append(write_image(directory / f"{name}_{seed}.png", img))
    return tuple(paths)


class HairstyleTransfer(BaseEstimator):
    """Estimator façade over ``run_transfer``.

    ``fit`` builds the backend; ``predict`` takes (source, target) path pairs
    and returns the final images, one run directory per pair under ``out``.
    """

    def __init__(self, backend="toy", m=3, w_steps=1100, fs_steps=250, align_steps=100, inpaint_steps=140,
                 blend_steps=400, lr=0.01, seed=0, out="out", no_lsm=False, no_reg=False, convex_blend=False):
        self.backend = backend
        self.m = m
        self.w_steps = w_steps
        self.fs_steps = fs_steps
        self.align_steps = align_steps
        self.inpaint_steps = inpaint_steps
        self.blend_steps = blend_steps
        self.lr = lr
        self.seed = seed
        self.out = out
        self.no_lsm = no_lsm
        self.no_reg = no_reg
        self.convex_blend = convex_blend

    def _config(self, out) -> PipelineConfig:
        params = self.get_params()
        params["out"] = str(out)
        return PipelineConfig(**params)

    def fit(self, X=None, y=None):
        cfg = self._config(self.out)
        self.ports_ = make_backend(cfg)
        return self

    def predict(self, X) -> list:
        if not hasattr(self, "ports_"):
            self.fit()
        images, self.manifests_ = [], []
        for i, (src, trg) in enumerate(X):
            cfg = self._config(Path(self.out) / f"pair_{i:04d}")
            self.manifests_.append(run_transfer(src, trg, cfg, self.ports_))
            images.append(load_final_image(cfg.out))
        return images
