import hashlib

import numpy as np
import pytest

from dpnet.boxes import iou
from dpnet.config import DataConfig
from dpnet.datasynth import (
    Highlight, PRESETS, Sample, apply_color_cast, apply_haze, apply_lighting, check_disjoint, gen_scene,
    load_dataset, make_sample, parse_annotations, reproduce_from_manifest, synth_dataset,
)
from dpnet.autodiff import Rng
from dpnet.errors import ConfigError, DataError
from dpnet.metrics import psnr


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_haze_operator():
    img = np.random.default_rng(0).uniform(0, 1, (3, 8, 8))
    np.testing.assert_array_equal(apply_haze(img, 1.0, (0.2, 0.3, 0.4)), img)
    with pytest.raises(ValueError):
        apply_haze(img, 0.0, (0.2, 0.3, 0.4))
    np.testing.assert_allclose(apply_haze(img, 0.6, (0.2, 0.3, 0.4))[1], img[1] * 0.6 + 0.3 * 0.4)


def test_color_cast_attenuates_red_most():
    white = np.ones((3, 4, 4))
    out = apply_color_cast(white, PRESETS["bluish"]["beta"], depth=1.0)
    np.testing.assert_allclose(out[:, 0, 0], np.exp(-np.array(PRESETS["bluish"]["beta"])))
    assert out[0, 0, 0] < out[1, 0, 0] < out[2, 0, 0]


def test_lighting_vignette_and_highlight():
    img = np.full((3, 9, 9), 0.5)
    v = apply_lighting(img, vignette=0.3)
    assert v[0, 4, 4] == pytest.approx(0.5) and v[0, 0, 0] == pytest.approx(0.5 * 0.7)
    h = apply_lighting(img, highlight=Highlight(4.0, 4.0, 2.0, 0.3))
    assert h[0, 4, 4] == pytest.approx(0.8)
    assert (apply_lighting(np.ones((3, 9, 9)), highlight=Highlight(4, 4, 2, 0.5)) <= 1).all()


def test_scene_constraints():
    cfg = DataConfig()
    for seed in range(15):
        s = gen_scene(Rng(seed), 96, 96, 3, cfg)
        assert cfg.min_objects <= len(s.boxes) <= cfg.max_objects
        b = s.boxes
        assert (b[:, 0] >= 0).all() and (b[:, 2] <= 96).all() and (b[:, 0] < b[:, 2]).all() and (b[:, 1] < b[:, 3]).all()
        for i in range(len(b)):
            for j in range(i + 1, len(b)):
                assert iou(b[i], b[j]) <= cfg.max_overlap_iou + 1e-12
        assert set(s.classes.tolist()) <= {0, 1, 2}


def test_sample_is_pure_in_seed_split_index():
    cfg = DataConfig()
    a, b = make_sample(cfg, "val", 3), make_sample(cfg, "val", 3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(make_sample(cfg, "test", 3)[0], a[0])


def test_degradation_is_moderate():
    vals = []
    for seed in range(100):
        ref, deg = make_sample(DataConfig(seed=seed), "train", 0)[:2]
        vals.append(psnr(deg / 255.0, ref / 255.0))
    assert 12.0 <= np.mean(vals) <= 22.0


def test_synth_is_deterministic_and_reproducible(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    synth_dataset(small_cfg.data, a)
    synth_dataset(small_cfg.data, b)
    assert _tree_digest(a) == _tree_digest(b)
    assert reproduce_from_manifest(a) == []
    ds = load_dataset(a)
    assert [len(ds.train), len(ds.val), len(ds.test)] == [6, 2, 2]
    s = ds.train[0]
    assert s.degraded.shape == (3, 64, 64) and s.boxes.shape[1] == 4


def test_synth_refuses_non_empty_directory(tmp_path, small_cfg):
    (tmp_path / "junk").write_text("x")
    with pytest.raises(DataError):
        synth_dataset(small_cfg.data, tmp_path)
    synth_dataset(small_cfg.data, tmp_path, overwrite=True)


def test_manifest_detects_tampering(tmp_path, small_cfg):
    synth_dataset(small_cfg.data, tmp_path)
    p = tmp_path / "train" / "degraded" / "00001.ppm"
    data = bytearray(p.read_bytes())
    data[-1] ^= 0xFF
    p.write_bytes(bytes(data))
    assert reproduce_from_manifest(tmp_path) == ["train/00001"]


def test_annotation_errors_name_file_and_line():
    with pytest.raises(DataError, match="a.txt:2"):
        parse_annotations("0 1 2 3 4\n0 1 2 x 4\n", "a.txt")
    with pytest.raises(DataError, match="a.txt:1"):
        parse_annotations("0 5 2 3 4\n", "a.txt")
    c, b = parse_annotations("\n2 1 2 3 4\n", "a.txt")
    assert c.tolist() == [2] and b.tolist() == [[1, 2, 3, 4]]


def test_split_overlap_rejected():
    img = np.random.default_rng(0).uniform(0, 1, (3, 8, 8))
    s = lambda i: Sample(i, img, img, np.zeros((0, 4)), np.zeros(0, int))
    with pytest.raises(ConfigError):
        check_disjoint({"train": [s("train/0")], "test": [s("test/0")]})


def test_missing_dataset_root(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")
