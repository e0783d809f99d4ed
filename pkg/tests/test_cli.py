import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from railseg.cli import build_parser, main
from railseg.config import all_keys, load_config, ConfigError
from railseg.nn import Checkpoint, NetConfig, SegNetwork
from railseg.pipeline import DatasetManifest
from railseg.ply import save_ply
from railseg.pointcloud import PointCloud, derive_seed

SMALL = ["--scale", "0.002", "--synthetic-count", "2", "--patches-per-cloud", "2",
         "--length-m", "2.0"]


def run(args, tmp_path, capsys=None):
    code = main(list(args) + ["--output-dir", str(tmp_path / "out")])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_generate_default_counts(tmp_path):
    assert run(["generate"], tmp_path)[0] == 0
    data = tmp_path / "out" / "data"
    assert len(list(data.glob("pseudo_real_*.ply"))) == 1
    assert len(list(data.glob("synthetic_*.ply"))) == 8
    assert (tmp_path / "out" / "eval" / "heldout.ply").exists()
    log = json.loads((tmp_path / "out" / "generation.log").read_text())
    assert len(log["pseudo_real"]) == 1 and len(log["synthetic"]) == 8


def test_generate_is_byte_identical(tmp_path):
    files = {}
    for name in ("a", "b"):
        assert main(["generate", *SMALL, "--seed", "5", "--output-dir", str(tmp_path / name)]) == 0
        files[name] = {p.relative_to(tmp_path / name): p.read_bytes()
                       for p in sorted((tmp_path / name).rglob("*")) if p.is_file()}
    assert files["a"] == files["b"]
    assert main(["generate", *SMALL, "--seed", "6", "--output-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "data" / "pseudo_real_000.ply").read_bytes() != \
        files["a"][next(k for k in files["a"] if k.name == "pseudo_real_000.ply")]


def test_invalid_spec_file(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[track]\ntie_length_m = 1.0\n")
    code, out = run(["generate", "--config", str(cfg)], tmp_path, capsys)
    assert code == 2
    assert "tie_length_m must exceed gauge_m" in out.err


@pytest.mark.parametrize("text", ["[experiment]\nepochz = 3\n", "[extras]\na = 1\n",
                                  "[experiment]\nscale = 2\n", "[experiment]\nepochs = many\n"])
def test_config_errors(tmp_path, capsys, text):
    cfg = tmp_path / "c.ini"
    cfg.write_text(text)
    assert run(["generate", "--config", str(cfg)], tmp_path, capsys)[0] == 2


def test_missing_config_file(tmp_path, capsys):
    assert run(["generate", "--config", str(tmp_path / "nope.ini")], tmp_path, capsys)[0] == 2


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nseed = 3\nepochs = 7\n[track]\ngauge_m = 1.5\n[noise]\ndropout_rate = 0.2\n")
    c = load_config(cfg, {"epochs": 2, "dropout_rate": 0.3})
    assert (c.seed, c.epochs, c.track.gauge_m, c.noise.dropout_rate) == (3, 2, 1.5, 0.3)


def test_track_file(tmp_path):
    (tmp_path / "track.ini").write_text("[track]\ntie_spacing_m = 0.6\ngauge_m = 1.0\n")
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\ntrack_file = track.ini\n[track]\ngauge_m = 1.2\n")
    c = load_config(cfg)
    assert (c.track.tie_spacing_m, c.track.gauge_m) == (0.6, 1.2)


def test_missing_prerequisites(tmp_path, capsys):
    code, out = run(["train", "--group", "G5"], tmp_path, capsys)
    assert code == 3 and "manifest for G5" in out.err
    code, out = run(["prepare", "--group", "G5"], tmp_path, capsys)
    assert code == 3 and "pseudo-real clouds" in out.err
    code, out = run(["eval", "--group", "G5"], tmp_path, capsys)
    assert code == 3 and "checkpoint for G5" in out.err


def test_unknown_group(tmp_path, capsys):
    assert run(["prepare", "--group", "G9"], tmp_path, capsys)[0] == 2


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    assert main(["generate", *SMALL, "--output-dir", str(root / "out")]) == 0
    return root


def test_prepare_g8_excludes_bim(generated):
    assert main(["prepare", *SMALL, "--group", "G8", "--output-dir", str(generated / "out")]) == 0
    m = DatasetManifest.load(generated / "out" / "groups" / "G8" / "G8_manifest.json")
    assert m.bim_included is False
    assert {p.source for p in m.patches} == {"real0"}
    assert len(m.patch_files) == 2 and all(f.exists() for f in m.patch_files)


def test_train_zero_epochs_is_init(generated):
    out = str(generated / "out")
    assert main(["prepare", *SMALL, "--group", "G7", "--output-dir", out]) == 0
    assert main(["train", *SMALL, "--group", "G7", "--epochs", "0", "--output-dir", out]) == 0
    ck = Checkpoint.load(generated / "out" / "checkpoints" / "G7.rseg")
    init = SegNetwork.init(NetConfig(), derive_seed(0, 500, 7))
    assert all(np.array_equal(ck.params[k], v) for k, v in init.params.items())


def test_untrained_eval_is_chance(generated, tmp_path, capsys):
    out = str(generated / "out")
    rng = np.random.default_rng(0)
    n = 900
    cloud = PointCloud(rng.uniform(0, 2, (n, 3)), np.repeat([0, 1, 2], n // 3))
    save_ply(cloud, tmp_path / "balanced.ply")
    oas = []
    for seed in (0, 1, 2):
        assert main(["prepare", *SMALL, "--group", "G8", "--seed", str(seed), "--output-dir", out]) == 0
        assert main(["train", *SMALL, "--group", "G8", "--epochs", "0", "--seed", str(seed),
                     "--output-dir", out]) == 0
        capsys.readouterr()
        assert main(["eval", *SMALL, "--group", "G8", "--seed", str(seed), "--cloud",
                     str(tmp_path / "balanced.ply"), "--output-dir", out]) == 0
        oas.append(json.loads(capsys.readouterr().out)["oa"])
    assert all(abs(oa - 1 / 3) <= 0.15 for oa in oas)


def test_experiment_small(tmp_path, capsys):
    code, out = run(["experiment", *SMALL, "--epochs", "1"], tmp_path, capsys)
    assert code == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "results.csv").read_text())))
    assert rows[0] == ["group", "data_size", "rotation", "bim", "train_time_s", "oa", "miou"]
    assert [r[0] for r in rows[1:]] == [f"G{i}" for i in range(1, 9)] + ["G5-concrete"]
    assert rows[5][1:4] == ["hundred-thousand-level", "random", "yes"]
    assert out.out == (tmp_path / "out" / "results.csv").read_text()
    summary = (tmp_path / "out" / "summary.txt").read_text()
    assert "G5" in summary and "concrete" in summary


@pytest.mark.parametrize("command", ["generate", "prepare", "train", "eval", "experiment"])
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args([command, "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for section, key, default in all_keys():
        assert "--" + key.replace("_", "-") in text
        assert f"[{section}] {key} (default:" in text


def test_module_entry_point_and_threads(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "railseg", "generate", *SMALL, "--output-dir",
                           str(tmp_path / "o")], env={"RAILSEG_THREADS": "1", "PATH": ""},
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "data" / "synthetic_001.ply").exists()


def test_config_error_type():
    with pytest.raises(ConfigError):
        load_config(None, {"scale": 0.0})


def test_experiment_failed_groups_exit_4(tmp_path, capsys):
    code, out = run(["experiment", *SMALL, "--epochs", "0", "--synthetic-count", "0"], tmp_path, capsys)
    assert code == 4
    assert "failed groups: G1, G3, G5, G7, G5-concrete" in out.err
    rows = list(csv.reader(io.StringIO((tmp_path / "out" / "results.csv").read_text())))
    assert len(rows) == 10
    assert rows[1][4:] == ["", "", ""] and rows[2][5] != ""
