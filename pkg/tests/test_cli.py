import json

import numpy as np
import pytest

from qecnn.cli import build_parser, main
from qecnn.pipeline import synthetic_sidecar, write_sequence
from qecnn.synth import synthetic_sequence


@pytest.fixture(scope="module")
def clip(tmp_path_factory):
    d = tmp_path_factory.mktemp("clip")
    raw, coded = synthetic_sequence(2, 64, 128, seed=0)
    write_sequence(d / "raw.yuv", raw)
    write_sequence(d / "dec.yuv", coded)
    synthetic_sidecar(coded, 32).write(d / "side.json")
    return d


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_schedule_table_row(capsys):
    code, out, _ = run(capsys, "schedule", "--qp", "32", "--budget-ratio", "0.5", "--ctus", "480")
    assert code == 0 and out.strip() == "n1=203 n2=160"


def test_schedule_bad_qp(capsys):
    code, _, err = run(capsys, "schedule", "--qp", "25", "--budget-ratio", "0.5")
    assert code == 4
    assert "32, 37, 42, 47" in err and len(err.strip().splitlines()) == 1


def test_schedule_ratio_range(capsys):
    code, _, err = run(capsys, "schedule", "--qp", "32", "--budget-ratio", "1.5")
    assert code == 2 and "--budget-ratio" in err


def test_schedule_assignments(capsys, tmp_path):
    (tmp_path / "m.txt").write_text("1\n9\n5\n")
    code, out, _ = run(capsys, "schedule", "--qp", "37", "--budget-ms", "11.7", "--mads", str(tmp_path / "m.txt"))
    lines = out.strip().splitlines()
    assert code == 0 and len(lines[1].split()) == 3


def test_lut(capsys, tmp_path):
    path = tmp_path / "lut.json"
    assert run(capsys, "lut", "--qp", "47", "--ctus", "120", "--out", str(path))[0] == 0
    assert len(json.loads(path.read_text())["rows"]) == 9


def test_metrics_identical(capsys, clip):
    f = str(clip / "raw.yuv")
    code, out, _ = run(capsys, "metrics", "--psnr", f, f, "--w", "128", "--h", "64")
    assert code == 0 and out.strip() == "psnr 100.0000 dB"


def test_metrics_rsd_and_bd(capsys, tmp_path):
    a, t = tmp_path / "a.csv", tmp_path / "t.csv"
    a.write_text("kbps,psnr\n1000,32\n1800,34.5\n3300,37.1\n6200,39.8\n")
    t.write_text("900,32\n1620,34.5\n2970,37.1\n5580,39.8\n")
    code, out, _ = run(capsys, "metrics", "--rsd", "1,3", "--bd-rate", str(a), str(t))
    assert code == 0 and "rsd 50.0000%" in out and "bd_rate -10.0000%" in out


def test_metrics_nothing(capsys):
    assert run(capsys, "metrics")[0] == 2


def test_enhance_budgeted(capsys, clip, tmp_path):
    out = tmp_path / "enh.yuv"
    rep = tmp_path / "rep.json"
    src = (clip / "dec.yuv").read_bytes()
    code, text, err = run(capsys, "enhance", "--input", str(clip / "dec.yuv"), "--ref", str(clip / "raw.yuv"),
                          "--sidecar", str(clip / "side.json"), "--width", "128", "--height", "64",
                          "--budget-ratio", "0.5", "--out", str(out), "--report", str(rep), "--seed", "3")
    assert code == 0, err
    assert out.stat().st_size == len(src)
    assert (clip / "dec.yuv").read_bytes() == src
    doc = json.loads(rep.read_text())
    assert len(doc["frames"]) == 2
    code, text, _ = run(capsys, "metrics", "--mae", str(rep))
    assert text.strip() == f"mae {doc['mae_percent']:.4f}%"


def test_enhance_deterministic(capsys, clip, tmp_path):
    outs = []
    for i in range(2):
        path = tmp_path / f"o{i}.yuv"
        run(capsys, "enhance", "--input", str(clip / "dec.yuv"), "--qp", "32", "--w", "128", "--h", "64",
            "--out", str(path), "--seed", "5")
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_enhance_missing_sidecar_for_i_frame(capsys, clip):
    code, _, err = run(capsys, "enhance", "--input", str(clip / "dec.yuv"), "--qp", "32", "--w", "128",
                       "--h", "64", "--budget-ms", "5")
    assert code == 2 and "sidecar" in err


def test_enhance_bad_size(capsys, clip):
    code, _, err = run(capsys, "enhance", "--input", str(clip / "dec.yuv"), "--qp", "32", "--w", "100",
                       "--h", "64")
    assert code == 3


def test_enhance_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "enhance", "--input", str(tmp_path / "none.yuv"), "--qp", "32", "--w", "64",
                     "--h", "64")
    assert code == 5


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and out.count("ok") == 3


def test_train_toy_short(capsys, tmp_path):
    code, out, _ = run(capsys, "train-toy", "--steps", "3", "--pairs", "2", "--out", str(tmp_path))
    assert code == 0 and "reduction" in out
    assert (tmp_path / "qecnn_i_qp42.qecn").exists()


def test_help_lists_units():
    text = build_parser()._subparsers._group_actions[0].choices["enhance"].format_help()
    assert "milliseconds" in text and "pixels" in text
