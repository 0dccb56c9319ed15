import subprocess
import sys

import pytest

from semvpr.cli import main
from semvpr.config import load_config
from semvpr.data import read_pgm
from semvpr.formats import load_descriptors

TINY = """
[train]
steps = 3
eval_every = 3

[encoder]
c4 = 3
c5 = 4
widths = [2, 3, 3]
strides = [2, 2, 2, 1]

[attention]
bank_channels = 2

[semseg]
decoder_width = 3

[da]
channels = [2, 2, 2, 2, 1]
"""


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["--out", str(out), "fixture", "--places", "3", "--views", "2", "--shape", "3", "40", "40"]) == 0
    return out


def run_pipeline(root, fixture_dir, seed, capsys):
    root.mkdir(exist_ok=True)
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    run = root / "run"
    manifest = str(fixture_dir / "manifest.csv")
    assert main(["--config", str(cfg), "--seed", str(seed), "--out", str(run), "train", "--manifest", manifest]) == 0
    ckpt = str(run / "checkpoint.vprc")
    for role in ("train", "query"):
        assert main(["--out", str(run), "extract", "--checkpoint", ckpt, "--manifest", manifest,
                     "--role", role]) == 0
    capsys.readouterr()
    assert main(["--out", str(run), "eval", "--gallery", str(run / "train.vprd"), "--queries",
                 str(run / "query.vprd"), "--manifest", manifest, "--label", "full"]) == 0
    table = capsys.readouterr().out
    assert main(["--out", str(run / "attn"), "attn-dump", "--checkpoint", ckpt, "--manifest", manifest,
                 "--role", "query"]) == 0
    return run, table


def test_pipeline_smoke(tmp_path, fixture_dir, capsys):
    run, table = run_pipeline(tmp_path, fixture_dir, 3, capsys)
    assert "Recall@N 1 / 5 / 10" in table and "full" in table
    for name in ("config.toml", "triplets.csv", "checkpoint.vprc", "metrics.csv", "train.vprd", "query.vprd",
                 "recall.csv"):
        assert (run / name).is_file(), name
    ids, vecs = load_descriptors(run / "query.vprd")
    assert vecs.shape == (6, 7)
    maps = sorted((run / "attn").glob("attn_*.pgm"))
    assert len(maps) == 6
    m = read_pgm(maps[0])
    assert m.shape == (5, 5) and m.min() == 0 and m.max() == 255
    assert load_config(run / "config.toml").train.seed == 3


def test_same_seed_gives_identical_outputs(tmp_path, fixture_dir, capsys):
    a, ta = run_pipeline(tmp_path / "a", fixture_dir, 9, capsys)
    b, tb = run_pipeline(tmp_path / "b", fixture_dir, 9, capsys)
    assert ta == tb
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) >= 13
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_fixture_is_idempotent(tmp_path):
    for d in ("a", "b"):
        assert main(["--seed", "2", "--out", str(tmp_path / d), "fixture", "--places", "2", "--views", "1",
                     "--shape", "3", "32", "32"]) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_ablation_flags_reach_the_config(tmp_path, fixture_dir):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY.replace("steps = 3", "steps = 1"))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "train", "--manifest",
                 str(fixture_dir / "manifest.csv"), "--no-att", "--no-da", "--no-ms-gem"]) == 0
    flags = load_config(tmp_path / "config.toml").ablation
    assert (flags.ms_gem, flags.att, flags.semseg, flags.g_semseg, flags.da) == (False, False, True, False, False)


def test_missing_config_is_a_usage_error(tmp_path, fixture_dir, capsys):
    with pytest.raises(SystemExit) as err:
        main(["--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path), "train", "--manifest",
              str(fixture_dir / "manifest.csv")])
    assert err.value.code == 2
    assert capsys.readouterr().err.strip().startswith("semvpr: error: config file not found")


def test_bad_manifest_exits_nonzero_with_one_line(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("id,path,coord_a,coord_b,role,domain\n1,a,0,0,driver,target\n")
    assert main(["--out", str(tmp_path), "eval", "--gallery", "g.vprd", "--queries", "q.vprd",
                 "--manifest", str(bad)]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "line 2" in err


def test_unknown_descriptor_id(tmp_path, fixture_dir, capsys):
    from semvpr.formats import save_descriptors
    import numpy as np
    save_descriptors(tmp_path / "g.vprd", np.array([999]), np.zeros((1, 2)))
    with pytest.raises(SystemExit) as err:
        main(["eval", "--gallery", str(tmp_path / "g.vprd"), "--queries", str(tmp_path / "g.vprd"),
              "--manifest", str(fixture_dir / "manifest.csv")])
    assert err.value.code == 2


@pytest.mark.parametrize("argv", [["--help"], ["train", "--help"], ["eval", "--help"], ["attn-dump", "--help"]])
def test_help(argv):
    res = subprocess.run([sys.executable, "-m", "semvpr.cli", *argv], capture_output=True, text=True)
    assert res.returncode == 0 and "usage: semvpr" in res.stdout


def test_no_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2
