import csv

import numpy as np
import pytest
from PIL import Image

from warpvpr.cli import main
from warpvpr.io import load_checkpoint, load_image
from warpvpr.regressor import IDENTITY_OUTPUT, quads_from_prediction
from warpvpr.viz import GUTTER, emit_warp_visualization, panel_layout, render_warp_panel


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    m = str(d / "manifest.jsonl")
    steps = [
        ["gen-synth", "--out", str(d), "--scenes", "5", "--train-scenes", "5", "--image-size", "96"],
        ["train-encoder", "--manifest", m, "--out", str(d / "enc.gwck"), "--iterations", "3"],
        ["mine-pairs", "--manifest", m, "--encoder", str(d / "enc.gwck"), "--out", str(d / "pairs.csv")],
        ["train-warp", "--manifest", m, "--encoder", str(d / "enc.gwck"), "--pairs", str(d / "pairs.csv"),
         "--out", str(d / "reg.gwck"), "--iterations", "2", "--loss-csv", str(d / "loss.csv"),
         "--loss-plot", str(d / "loss.png")],
        ["index", "--manifest", m, "--encoder", str(d / "enc.gwck"), "--out", str(d / "index.gwck")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


def _common(d):
    return ["--manifest", str(d / "manifest.jsonl"), "--encoder", str(d / "enc.gwck"), "--index", str(d / "index.gwck")]


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--manifest", "m.jsonl"]) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    assert main(["index", "--manifest", str(tmp_path / "missing.jsonl"), "--encoder", "e", "--out", "o"]) == 2


def test_pipeline_outputs(run):
    arrays, meta = load_checkpoint(run / "enc.gwck")
    assert meta["model_kind"] == "encoder" and "conv0.weight" in arrays
    _, meta = load_checkpoint(run / "reg.gwck")
    assert meta["model_kind"] == "regressor"
    with open(run / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and set(rows[0]) == {"iteration", "L_ss", "L_fw", "L_cons", "L_total"}
    assert Image.open(run / "loss.png").format == "PNG"
    with open(run / "pairs.csv") as fh:
        pairs = list(csv.DictReader(fh))
    assert all(float(p["geo_distance"]) < 25 and float(p["feat_distance"]) < 1.2 for p in pairs)


def test_eval_three_rows_per_mode(run):
    out = run / "eval.csv"
    assert main(["eval", *_common(run), "--regressor", str(run / "reg.gwck"), "--thresholds", "10,25,50",
                 "--out", str(out), "--plot", str(run / "recall.png")]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["mode", "threshold", "recall@1", "recall@5"]
    for mode in ("global", "no-warp", "warp"):
        assert [r["threshold"] for r in rows if r["mode"] == mode] == ["10", "25", "50"]
    assert Image.open(run / "recall.png").format == "PNG"


def test_rank_untrained_warp_equals_no_warp(run):
    a, b = run / "rank_warp.csv", run / "rank_nowarp.csv"
    assert main(["rank", *_common(run), "--mode", "warp", "--out", str(a)]) == 0
    assert main(["rank", *_common(run), "--mode", "no-warp", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    with open(a) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 15 * 5


def test_warp_viz_cli(run):
    q, g = run / "images" / "test_s0000_v1.png", run / "images" / "test_s0000_v0.png"
    out1, out2 = run / "viz1.png", run / "viz2.png"
    base = ["warp-viz", "--encoder", str(run / "enc.gwck"), "--query", str(q), "--gallery", str(g)]
    assert main([*base, "--out", str(out1)]) == 0
    assert main([*base, "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert Image.open(out1).size == (2 * 96 + GUTTER, 2 * 96 + GUTTER)


def test_panel_layout_and_identity_panels(tmp_path):
    rng = np.random.default_rng(0)
    iq = rng.random((3, 40, 70)).astype(np.float32)
    ip = rng.random((3, 55, 30)).astype(np.float32)
    size, origins = panel_layout(iq.shape[-2:], ip.shape[-2:])
    assert size == (2 * 70 + GUTTER, 2 * 55 + GUTTER)
    tq, tp = quads_from_prediction(IDENTITY_OUTPUT, iq.shape[-2:], ip.shape[-2:])
    path = emit_warp_visualization(iq, ip, tq, tp, tmp_path / "p.png")
    canvas = load_image(path)
    ref = load_image_panel(iq)
    ox, oy = origins[2]
    assert np.array_equal(canvas[:, oy:oy + 40, ox:ox + 70], ref)
    ox, oy = origins[3]
    assert np.array_equal(canvas[:, oy:oy + 55, ox:ox + 30], load_image_panel(ip))
    again = tmp_path / "q.png"
    emit_warp_visualization(iq, ip, tq, tp, again)
    assert again.read_bytes() == path.read_bytes()
    assert render_warp_panel(iq, ip, tq, tp).size == size


def load_image_panel(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).astype(np.float32) / 255.0
