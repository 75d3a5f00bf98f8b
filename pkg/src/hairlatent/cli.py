"""Command-line entry point: ``hairlatent transfer|eval-reconstruction|stratify|invert``."""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config, parse_assignments
from .core import DivergenceError
from .metrics import CSVParseError, PairRecord, pose_difference, read_pairs_csv, resolve, stratify_pairs, write_pairs_csv

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hairlatent")


def _guard(fn):
    """Map failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .pipeline import StageFailure

        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (StageFailure, DivergenceError) as exc:
            click.echo(f"divergence: {exc}", err=True)
            sys.exit(EXIT_DIVERGENCE)
        except (OSError, CSVParseError) as exc:
            click.echo(f"I/O error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


def common_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Flat TOML config file."),
        click.option("--out", help="Output directory."),
        click.option("--seed", type=int),
        click.option("--backend", type=click.Choice(["toy", "external"])),
        click.option("--save-every", type=int, help="Dump alignment images/regions every N steps."),
        click.option("--no-lsm", is_flag=True, default=None, help="Drop the local style matching term."),
        click.option("--no-reg", is_flag=True, default=None, help="Drop the alignment regularizer."),
        click.option("--rematch-target", is_flag=True, default=None,
                     help="Track regions against the target's instead of the previous step's."),
        click.option("--convex-blend", is_flag=True, default=None, help="Use (1-w)·a + w·b blending."),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE",
                     help="Override any config key (repeatable)."),
        click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config(config_path, assignments, verbose, **flags):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if config_path is not None and not Path(config_path).is_file():
        raise ConfigError(f"config file not found: {config_path}")
    overrides = parse_assignments(assignments)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(config_path, overrides)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Move the hairstyle of one portrait onto another."""


@main.command()
@click.argument("src", type=click.Path())
@click.argument("trg", type=click.Path())
@common_options
@_guard
def transfer(src, trg, config_path, assignments, verbose, **flags):
    """Put the hairstyle of TRG onto the face in SRC."""
    from .pipeline import run_transfer

    cfg = _config(config_path, assignments, verbose, **flags)
    manifest = run_transfer(src, trg, cfg)
    click.echo(str(Path(cfg.out) / manifest.artifacts["image"]))


@main.command("eval-reconstruction")
@click.argument("pairs_csv", type=click.Path())
@common_options
@_guard
def eval_reconstruction(pairs_csv, config_path, assignments, verbose, **flags):
    """Reconstruct each pair's source with its target's hair; report SSIM."""
    from .pipeline import run_reconstruction_eval

    cfg = _config(config_path, assignments, verbose, **flags)
    report = run_reconstruction_eval(pairs_csv, cfg)
    click.echo(json.dumps({k: report[k] for k in ("n_pairs", "ssim_mean", "ssim_std")}))


@main.command()
@click.argument("pairs_csv", type=click.Path())
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True, help="Stratified CSV to write.")
@common_options
@_guard
def stratify(pairs_csv, output, config_path, assignments, verbose, **flags):
    """Assign Easy/Medium/Difficult by pose-difference terciles.

    Rows without a ``pd`` value get one from the keypoint extractor.
    """
    rows = read_pairs_csv(pairs_csv)
    if not rows:
        raise CSVParseError(pairs_csv, 1, "no pairs")
    ports = None
    records = []
    for row in rows:
        pd = row["pd"]
        if pd is None:
            if ports is None:
                from .persist import read_image
                from .pipeline import make_backend

                ports = make_backend(_config(config_path, assignments, verbose, **flags))
            k = [ports.keypoints.extract(read_image(resolve(pairs_csv, row[c]), ports.resolution)).keypoints3d
                 for c in ("path_src", "path_trg")]
            pd = pose_difference(k[0], k[1])
        records.append(PairRecord(row["path_src"], row["path_trg"], pd))
    strat = stratify_pairs(records)
    write_pairs_csv(output, strat)
    counts = {s: sum(r.stratum == s for r in strat) for s in ("Easy", "Medium", "Difficult")}
    click.echo(json.dumps(counts))


@main.command()
@click.argument("image", type=click.Path())
@click.option("--fs/--no-fs", default=True, help="Also refine the F tensor.")
@common_options
@_guard
def invert(image, fs, config_path, assignments, verbose, **flags):
    """Embed IMAGE; writes w (and f) tensors plus the reconstruction."""
    from .embedding import embed_fs, invert_wplus
    from .persist import read_image, save_tensor, write_image, write_json_atomic
    from .pipeline import make_backend

    cfg = _config(config_path, assignments, verbose, **flags)
    ports = make_backend(cfg)
    img = read_image(image, ports.resolution).to(ports.dtype)
    out = Path(cfg.out)
    r = invert_wplus(img, ports, cfg.w_steps, cfg.lr, cfg.seed)
    save_tensor(out, "w", r.w.vectors)
    summary = {"w_loss": r.loss}
    recon = ports.generator.synthesize(r.w.vectors).detach()
    if fs:
        rf = embed_fs(img, r.w, ports, cfg.fs_steps, cfg.lr)
        save_tensor(out, "f", rf.f)
        summary["f_loss"] = rf.loss
        recon = ports.generator.synthesize_from(rf.f, r.w.fine).detach()
    write_image(out / "reconstruction.png", recon)
    write_json_atomic(out / "invert.json", {"image": str(image), "config": cfg.to_dict(), **summary})
    click.echo(json.dumps(summary))


if __name__ == "__main__":
    main()
