import csv
import json

import pytest
from click.testing import CliRunner

from hairlatent.cli import main
from hairlatent.core import DivergenceError
from hairlatent.pipeline import make_fixture_pair

FAST = ["--set", "w_steps=6", "--set", "fs_steps=2", "--set", "align_steps=2",
        "--set", "inpaint_steps=2", "--set", "blend_steps=2"]


@pytest.fixture(scope="module")
def pair(tmp_path_factory, toy):
    return make_fixture_pair(tmp_path_factory.mktemp("cli_fx"), ports=toy)


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_version():
    r = run("--version")
    assert r.exit_code == 0 and "0.1.0" in r.output


def test_transfer_ok(tmp_path, pair):
    r = run("transfer", *pair, "--out", tmp_path / "o", *FAST)
    assert r.exit_code == 0, r.stderr
    assert r.stdout.strip().endswith("final.png")
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["blend_steps"] == 2 and manifest["status"] == "ok"


def test_flags_and_config_file(tmp_path, pair):
    cfg = tmp_path / "c.toml"
    cfg.write_text("align_steps = 3\nsave_every = 1\n")
    r = run("transfer", *pair, "--config", cfg, "--out", tmp_path / "o", "--no-lsm", *FAST[:2], *FAST[2:4])
    assert r.exit_code == 0, r.stderr
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["no_lsm"] is True and manifest["config"]["align_steps"] == 3
    assert len(list((tmp_path / "o" / "align" / "snapshots").glob("step_*.png"))) == 4
    assert not (tmp_path / "o" / "align" / "regions").exists()  # no superpixels without the LSM term


@pytest.mark.parametrize("extra", [["--set", "bogus=1"], ["--set", "m=9"], ["--config", "/nonexistent.toml"]])
def test_config_errors_exit_2(tmp_path, pair, extra):
    assert run("transfer", *pair, "--out", tmp_path, *extra).exit_code == 2


def test_bad_toml_exit_2(tmp_path, pair):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[section]\nx = 1\n")
    assert run("transfer", *pair, "--config", cfg).exit_code == 2


def test_missing_image_exit_4(tmp_path, pair):
    r = run("transfer", pair[0], tmp_path / "none.png", "--out", tmp_path, *FAST)
    assert r.exit_code == 4 and "I/O error" in r.stderr


def test_divergence_exit_3(tmp_path, pair, monkeypatch):
    import hairlatent.pipeline as pl

    def boom(*a, **k):
        raise DivergenceError("blend", 1)

    monkeypatch.setattr(pl, "optimize_blend", boom)
    r = run("transfer", *pair, "--out", tmp_path / "o", *FAST)
    assert r.exit_code == 3
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["failed_stage"] == "blend"


def test_eval_reconstruction(tmp_path, pair):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text(f"path_src,path_trg\n{pair[0]},{pair[0]}\n")
    r = run("eval-reconstruction", pairs, "--out", tmp_path / "ev", *FAST)
    assert r.exit_code == 0, r.stderr
    assert json.loads(r.stdout)["n_pairs"] == 1
    assert (tmp_path / "ev" / "reconstruction_eval.json").is_file()


def test_stratify(tmp_path, pair):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text(f"path_src,path_trg,pd\na.png,b.png,0.3\nc.png,d.png,0.1\n{pair[0]},{pair[1]},\n")
    r = run("stratify", pairs, "-o", tmp_path / "s.csv")
    assert r.exit_code == 0, r.stderr
    assert json.loads(r.stdout) == {"Easy": 1, "Medium": 1, "Difficult": 1}
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {row["stratum"] for row in rows} == {"Easy", "Medium", "Difficult"}


def test_stratify_bad_csv_exit_4(tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("path_src,path_trg,pd\na.png,b.png,abc\n")
    r = run("stratify", pairs, "-o", tmp_path / "s.csv")
    assert r.exit_code == 4 and "2" in r.stderr


def test_invert(tmp_path, pair):
    r = run("invert", pair[0], "--out", tmp_path / "inv", *FAST[:4])
    assert r.exit_code == 0, r.stderr
    for name in ("reconstruction.png", "invert.json", "w", "f"):
        assert (tmp_path / "inv" / name).exists()
