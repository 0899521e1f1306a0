import re
import subprocess
import sys

import pytest

from dpnet.cli import build_parser, main
from dpnet.config import defaults_table
from dpnet.imageio import read_ppm_bytes
from dpnet.metrics import REPORT_COLUMNS


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "small.cfg"
    cfg.write_text(SMALL_CFG)
    assert main(["--config", str(cfg), "--set", "trainer.epochs=1", "train", "--data", str(small_data), "--out", str(out)]) == 0
    return out, cfg


SMALL_CFG = """\
data.image_size = 64
model.det_stage_channels = 8, 8, 8
model.fpn_channels = 8
model.head_channels = 8
"""


def test_help_lists_every_key_with_default():
    text = build_parser().format_help()
    for key, default, _ in defaults_table():
        assert re.search(rf"^\s+{re.escape(key)}\s+{re.escape(default)}\s", text, re.M), key
    assert "\t".join(REPORT_COLUMNS) in text


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "dpnet.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["detect", "--image", "x.ppm"])
    assert e.value.code == 1
    assert main(["--set", "loss.gamma=-1", "synth"]) == 1
    assert "loss.gamma" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dpnt")]) == 2
    assert "none.dpnt" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_synth_writes_tree(tmp_path):
    assert main(["--set", "data.image_size=64", "--set", "data.train_count=2", "--set", "data.val_count=0",
                 "--set", "data.test_count=1", "synth", "--root", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "train" / "degraded").glob("*.ppm"))) == 2
    assert (tmp_path / "d" / "manifest.tsv").exists()
    assert main(["synth", "--root", str(tmp_path / "d")]) == 2


def test_eval_report(run_dir, small_data, tmp_path):
    out, cfg = run_dir
    report = tmp_path / "r.tsv"
    assert main(["--config", str(cfg), "eval", "--checkpoint", str(out / "checkpoint.dpnt"), "--data", str(small_data),
                 "--out", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert lines[0].split("\t") == list(REPORT_COLUMNS)
    metrics = {tuple(l.split("\t")[:3]) for l in lines[1:]}
    assert ("summary", "all", "map") in metrics and ("summary", "all", "uiqm_enhanced") in metrics


def test_detect_output_format(run_dir, small_data, tmp_path):
    out, cfg = run_dir
    img = small_data / "test" / "degraded" / "00000.ppm"
    boxes, ann = tmp_path / "b.txt", tmp_path / "a.ppm"
    assert main(["--config", str(cfg), "detect", "--checkpoint", str(out / "checkpoint.dpnt"), "--image", str(img),
                 "--out", str(boxes), "--annotated", str(ann)]) == 0
    pattern = re.compile(r"^\d+ [01]\.\d{6} (\d+\.\d{2} ){3}\d+\.\d{2}$")
    lines = boxes.read_text().splitlines()
    assert all(pattern.match(l) for l in lines)
    scores = [float(l.split()[1]) for l in lines]
    assert scores == sorted(scores, reverse=True)
    assert read_ppm_bytes(ann).shape == (64, 64, 3)


def test_enhance_skips_detection_entries(run_dir, small_data, tmp_path, capsys):
    out, cfg = run_dir
    img = small_data / "test" / "degraded" / "00000.ppm"
    dst = tmp_path / "e.ppm"
    assert main(["--config", str(cfg), "enhance", "--checkpoint", str(out / "checkpoint.dpnt"), "--image", str(img),
                 "--out", str(dst)]) == 0
    assert "(det)" in capsys.readouterr().out
    assert read_ppm_bytes(dst).shape == (64, 64, 3)


def test_enhance_rejects_mismatched_architecture(run_dir, small_data, tmp_path, capsys):
    out, _ = run_dir
    img = small_data / "test" / "degraded" / "00000.ppm"
    code = main(["--set", "model.enh_channels=8", "enhance", "--checkpoint", str(out / "checkpoint.dpnt"),
                 "--image", str(img), "--out", str(tmp_path / "e.ppm")])
    assert code == 2
    assert "enh.conv1.weight" in capsys.readouterr().err
    assert not (tmp_path / "e.ppm").exists()


def test_bad_image_exit_2(run_dir, tmp_path):
    out, cfg = run_dir
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    assert main(["--config", str(cfg), "detect", "--checkpoint", str(out / "checkpoint.dpnt"), "--image", str(bad),
                 "--out", str(tmp_path / "b.txt")]) == 2
