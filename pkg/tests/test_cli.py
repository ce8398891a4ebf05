import filecmp
import logging

import numpy as np
import pytest
from PIL import Image

from escmisr.cli import RunConfig, build_parser, main, read_config, resolve
from escmisr.data import load_scene


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert run("synth", "--n-scenes", 3, "--hr-size", 96, "--frames", 4, "--out", root, "--seed", 1) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run("train", "--data", synth_root, "--epochs", 2, "--k", 4, "--crop", 32, "--out", out)
    return code, out


def test_unknown_flag():
    assert run("train", "--bogus") == 2
    assert run("frobnicate") == 2


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = 3\nlearning_rate = 0.1\n")
    assert run("train", "--config", cfg, "--data", tmp_path) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_bad_config_value(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = many\n")
    assert run("train", "--config", cfg, "--data", tmp_path) == 2


def test_missing_data_is_usage_or_data_error(tmp_path):
    assert run("train", "--out", tmp_path) == 2
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path) == 3


def test_train_smoke(trained):
    code, out = trained
    assert code == 0
    for name in ("model.ckpt", "last.ckpt", "best.ckpt", "history.csv", "config.ini"):
        assert (out / name).exists(), name
    assert len((out / "history.csv").read_text().splitlines()) == 3


def test_snapshot_reproduces_resolved_config(trained, synth_root):
    _, out = trained
    args = build_parser().parse_args(["train", "--data", str(synth_root), "--epochs", "2", "--k", "4",
                                      "--crop", "32", "--out", str(out)])
    for name in ("config", "seed", "band"):
        setattr(args, name, getattr(args, name, None))
    assert read_config(out / "config.ini", RunConfig()) == resolve(args)


def parsed(*argv):
    args = build_parser().parse_args([str(a) for a in argv])
    for name in ("config", "seed", "out", "band", "threads"):
        setattr(args, name, getattr(args, name, None))
    return args


def test_shuffle_t_flag_resolves():
    assert resolve(parsed("train", "--shuffle-t", 6)).train.shuffle_t == 6


def test_command_line_beats_config_file_and_logs(tmp_path, caplog):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nshuffle_t = 2\nepochs = 5\n[fusion]\nn_blocks = 1\n")
    with caplog.at_level(logging.INFO, logger="escmisr"):
        rc = resolve(parsed("train", "--config", cfg, "--shuffle-t", 6))
    assert rc.train.shuffle_t == 6 and rc.train.epochs == 5 and rc.model.fusion.n_blocks == 1
    assert "shuffle_t" in caplog.text


def test_presets():
    assert resolve(parsed("train")).model.size == 32
    full = resolve(parsed("train", "--preset", "full"))
    assert full.model.fusion.n_blocks == 6 and full.model.channels == 32 and full.train.k == 24
    assert resolve(parsed("train", "--crop", 16)).model.size == 16


def test_eval_checkpoint(trained, synth_root, tmp_path, capsys):
    _, out = trained
    report = tmp_path / "r.jsonl"
    assert run("eval", "--data", synth_root, "--checkpoint", out / "model.ckpt", "--report", report) == 0
    lines = report.read_text().splitlines()
    assert len(lines) == 3 + 1  # one row per scene plus the footer
    assert "nan" not in lines[-1].lower()


def test_eval_bicubic_without_checkpoint(synth_root, tmp_path):
    assert run("eval", "--data", synth_root, "--baseline", "bicubic", "--out", tmp_path) == 0
    assert (tmp_path / "report.jsonl").exists()


def test_eval_without_hr_is_data_error(synth_root, tmp_path):
    scene = load_scene(synth_root / "NIR" / "imgset0000")
    d = tmp_path / "NIR" / "imgset0000"
    d.mkdir(parents=True)
    for f in (synth_root / "NIR" / "imgset0000").iterdir():
        if f.name.startswith(("LR", "QM")):
            (d / f.name).write_bytes(f.read_bytes())
    assert scene.hr is not None
    assert run("eval", "--data", tmp_path, "--baseline", "bicubic", "--out", tmp_path / "o") == 3


def test_infer(trained, synth_root, tmp_path):
    _, out = trained
    nohr = tmp_path / "scene"
    nohr.mkdir()
    for f in (synth_root / "NIR" / "imgset0001").iterdir():
        if f.name.startswith(("LR", "QM")):
            (nohr / f.name).write_bytes(f.read_bytes())
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run("infer", "--checkpoint", out / "model.ckpt", "--scene", nohr, "--output", a) == 0
    assert run("infer", "--checkpoint", out / "model.ckpt", "--scene", nohr, "--output", b) == 0
    img = np.array(Image.open(a))
    assert img.shape == (96, 96) and img.dtype == np.uint16
    assert a.read_bytes() == b.read_bytes()


def test_infer_missing_frames(trained, tmp_path):
    _, out = trained
    assert run("infer", "--checkpoint", out / "model.ckpt", "--scene", tmp_path, "--output", tmp_path / "x.png") == 3


def test_infer_bad_checkpoint(synth_root, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert run("infer", "--checkpoint", bad, "--scene", synth_root / "NIR" / "imgset0000",
               "--output", tmp_path / "x.png") == 3


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_synth_repeatable(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--n-scenes", 2, "--hr-size", 48, "--frames", 3, "--out", tmp_path / name,
                   "--seed", 7, "--band", "red") == 0
    assert (tmp_path / "a" / "RED" / "imgset0001" / "LR002.png").exists()
    assert same_tree(tmp_path / "a", tmp_path / "b")
    assert run("synth", "--n-scenes", 2, "--hr-size", 48, "--frames", 3, "--out", tmp_path / "a",
               "--seed", 7, "--band", "red") == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")  # rerun overwrites in place


def test_synth_from_directory(tmp_path):
    hr = tmp_path / "hr"
    hr.mkdir()
    Image.fromarray((np.random.default_rng(0).random((60, 60)) * 65535).astype(np.uint16)).save(hr / "x.png")
    assert run("synth", "--hr", hr, "--n-scenes", 1, "--hr-size", 48, "--frames", 2, "--out", tmp_path / "o") == 0
    assert load_scene(tmp_path / "o" / "NIR" / "imgset0000").hr.shape == (1, 48, 48)


def test_check_passes(capsys):
    assert run("check", "--skip-model") == 0
    assert "all" in capsys.readouterr().out


def test_check_negative_control(capsys):
    assert run("check", "--skip-model", "--inject-fault", "gelu") == 1
    assert "FAILED" in capsys.readouterr().out
