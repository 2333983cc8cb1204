import json

import numpy as np
import pytest

from latentseg import cli
from latentseg.config import RunConfig
from latentseg.pipeline import EvalReport
from latentseg.synth import read_png

TINY = ["--set", "pretrain.denoiser_steps=3", "--set", "pretrain.denoiser_corpus=8",
        "--set", "pretrain.seg_steps=5", "--set", "data.n_train=6", "--set", "data.n_test=3",
        "--n1", "4", "--n2", "4", "--batch-size", "2"]


def test_config_file_with_flag_overrides(tmp_path):
    path = tmp_path / "c.json"
    RunConfig().replace(n1=77, lr=1e-3).save(path)
    args = cli.build_parser().parse_args(
        ["synth", "--config", str(path), "--n1", "5", "--set", "dae.gamma=3"])
    cfg = cli.load_config(args)
    assert cfg.n1 == 5 and cfg.lr == 1e-3 and cfg.dae.gamma == 3.0
    bad = cli.build_parser().parse_args(["synth", "--set", "n1"])
    with pytest.raises(SystemExit):
        cli.load_config(bad)


def test_end_to_end_verbs(tmp_path, capsys):
    d = tmp_path
    common = TINY + ["--data-root", str(d / "data")]
    run = lambda *a: cli.main(list(a) + common)  # noqa: E731
    assert run("synth") == 0
    run("pretrain-denoiser", "--out", str(d / "unet0"))
    run("pretrain-seg", "--out", str(d / "seg0"))
    run("train-unet", "--seg", str(d / "seg0"), "--unet", str(d / "unet0"), "--out", str(d / "s1"))
    run("train-decoder", "--stores", str(d / "s1"), "--out", str(d / "s2"))
    assert len(json.loads((d / "s2" / "curve.json").read_text())) == 4

    run("eval", "--seg", str(d / "seg0"), "--out", str(d / "base.json"))
    run("eval", "--stores", str(d / "s2"), "--modes", "points,box", "--out", str(d / "s2.json"))
    rep = EvalReport.load(d / "s2.json")
    assert rep.modes() == ["box", "points"] and len(rep.rows) == 3 * 4 * 2
    assert all(r["score"] is None for r in EvalReport.load(d / "base.json").rows)

    img = d / "data" / "test" / "test_00000_lq3.png"
    run("infer", "--stores", str(d / "s2"), "--image", str(img),
        "--prompt", '{"kind": "box", "box": [10, 10, 40, 50]}', "--out", str(d / "m.png"))
    m = read_png(d / "m.png")
    assert m.shape == (64, 64) and set(np.unique(m)) <= {0, 255}
    assert "degradation score" in capsys.readouterr().out

    run("ablate", "--seg", str(d / "seg0"), "--unet", str(d / "unet0"),
        "--presets", "baseline,gle_cre", "--out", str(d / "abl"))
    assert (d / "abl" / "gle_cre.json").is_file()
    run("report", str(d / "base.json"), str(d / "s2.json"), "--out", str(d / "rep"))
    summary = (d / "rep" / "summary.md").read_text()
    assert "base" in summary and "s2" in summary
    assert (d / "rep" / "iou_points.png").is_file()


def test_unknown_verb_exits():
    with pytest.raises(SystemExit):
        cli.main(["train-everything"])
