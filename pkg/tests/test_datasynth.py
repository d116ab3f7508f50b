import json

import numpy as np
import pytest

from editaware.datasynth import (
    CST_A,
    CST_B,
    PRIOR_HALF_WIDTH,
    DatasetManifest,
    SceneConfig,
    assign_illuminant,
    build_dataset,
    gen_scene,
    make_pair,
    render_reference,
    rerender_matches,
    sample_true_illuminant,
)
from editaware.imagecore import DAYLIGHT_ASN, TUNGSTEN_ASN, load_rawp
from editaware.isp import cst_interpolate


def test_scene_range_and_determinism():
    cfg = SceneConfig(size=(32, 48))
    a = gen_scene(cfg, 3)
    assert a.shape == (32, 48, 3)
    assert a.min() == pytest.approx(0.02, abs=1e-15) and a.max() == pytest.approx(0.98, abs=1e-15)
    assert np.array_equal(a, gen_scene(cfg, 3))
    assert not np.array_equal(a, gen_scene(cfg, 4))


def test_scene_mix_weights_matter_but_stream_is_stable():
    flat = gen_scene(SceneConfig(size=(16, 16), shapes=0, highlights=0, texture=0), 1)
    assert np.allclose(flat, gen_scene(SceneConfig(size=(16, 16), gradient=2, shapes=0, highlights=0, texture=0), 1))
    assert not np.allclose(flat, gen_scene(SceneConfig(size=(16, 16)), 1))


def test_scene_config_validation():
    for bad in (dict(size=(20, 16)), dict(size=(8, 8)), dict(gradient=-1), dict(stretch=(0.5, 0.4)),
                dict(gradient=0, shapes=0, highlights=0, texture=0)):
        with pytest.raises(ValueError):
            SceneConfig(**bad)
    cfg = SceneConfig(size=(32, 16), texture=0.1)
    assert SceneConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_assign_illuminant_cast_and_meta(rng):
    x = rng.uniform(size=(4, 4, 3))
    cast, meta = assign_illuminant(x, (1.5, 0.6), scene_id="s")
    assert np.allclose(cast, x * [1.5, 1.0, 0.6])
    assert meta.asn == (1.5, 0.6) and meta.scene_id == "s"
    assert np.array_equal(meta.cst_a, CST_A) and np.array_equal(meta.cst_b, CST_B)
    with pytest.raises(ValueError):
        assign_illuminant(x, (0.0, 1.0))


def test_cst_endpoints_are_reference_matrices():
    _, meta = assign_illuminant(np.zeros((1, 1, 3)), (1.0, 1.0))
    assert np.allclose(cst_interpolate(TUNGSTEN_ASN, meta), CST_A)
    assert np.allclose(cst_interpolate(DAYLIGHT_ASN, meta), CST_B)
    # white in the reference space maps to the XYZ of white
    assert np.allclose(CST_A.sum(axis=1), CST_B.sum(axis=1))


def test_true_illuminant_band():
    a, b = np.array(TUNGSTEN_ASN), np.array(DAYLIGHT_ASN)
    d = (b - a) / np.linalg.norm(b - a)
    n = np.array([-d[1], d[0]])
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = np.array(sample_true_illuminant(rng)) - a
        t = p @ d / np.linalg.norm(b - a)
        assert -1e-12 <= t <= 1 + 1e-12 and abs(p @ n) <= PRIOR_HALF_WIDTH + 1e-12


def test_pair_consistency(small_isp):
    x, y, meta = make_pair(SceneConfig(size=(16, 16)), small_isp, 5, "p")
    assert x.min() >= 0 and x.max() <= 1
    assert rerender_matches(x, y, meta, small_isp)
    assert np.max(np.abs(render_reference(x, meta, small_isp) - y)) <= 0.5 / 65535 + 1e-12
    assert not rerender_matches(x, np.clip(y + 0.01, 0, 1), meta, small_isp)


def test_build_dataset_files_and_manifest(tmp_path, small_isp):
    m = build_dataset(3, 1, 2, SceneConfig(size=(16, 16)), small_isp, tmp_path, seed=7)
    assert [len(m.splits[s]) for s in ("train", "val", "test")] == [3, 1, 2]
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.to_json() == m.to_json()
    assert len(loaded.dictionary) == 3
    test = loaded.load_split("test")
    assert len(test) == 2 and test.raw.shape == (2, 16, 16, 3)
    assert test.metas[1].scene_id == "test-0001"
    assert all(rerender_matches(x, y, mt, small_isp) for x, y, mt in zip(test.raw, test.srgb, test.metas))
    _, meta = load_rawp(tmp_path / "train" / "0000_raw.rawp")
    assert list(meta.asn) == loaded.dictionary[0]
    assert len(test.subset([1])) == 1


def test_build_dataset_is_reproducible(tmp_path, small_isp):
    cfg = SceneConfig(size=(16, 16))
    build_dataset(2, 1, 1, cfg, small_isp, tmp_path / "a", seed=1)
    build_dataset(2, 1, 1, cfg, small_isp, tmp_path / "b", seed=1)
    for rel in ("manifest.json", "train/0001_raw.rawp", "test/0000_srgb.rawp", "val/0000_raw.meta.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_validation(tmp_path, small_isp):
    m = build_dataset(1, 1, 1, SceneConfig(size=(16, 16)), small_isp, tmp_path)
    m.splits["val"] = list(m.splits["train"])
    with pytest.raises(ValueError):
        m.validate()
    (tmp_path / "test" / "0000_srgb.rawp").unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "manifest.json")
    with pytest.raises(ValueError):
        build_dataset(0, 1, 1, SceneConfig(size=(16, 16)), small_isp, tmp_path / "z")
