import csv
import io
import json

import numpy as np
import pytest

from editaware import cli
from editaware.cli import EXIT_ARGS, EXIT_IO, EXIT_NUMERIC, EXIT_OK, RunConfig, main
from editaware.imagecore import load_rawp

TINY = {
    "luts": {"k": 6, "lattice": 5, "color_hidden": [4], "tone_hidden": [4], "color_budget": 20,
             "tone_budget": 20, "color_train_points": 200, "tone_train_points": 100},
    "data": {"n_train": 4, "n_val": 2, "n_test": 2, "scene": {"size": [16, 16]}},
    "sampler": {"k_luts": 6},
    "model": {"base_filters": 4, "depth": 2, "metadata_factor": 4, "patch_side": 16, "batch_size": 2,
              "epochs": 1, "ft_iterations": 3, "ft_patch_pixels": 256},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    common = ["--config", str(cfg), "--out", str(root / "run"), "--seed", "1"]
    # the tiny networks cannot meet the fit tolerance: weights are still written
    assert main(["fit-luts", *common]) == EXIT_NUMERIC
    assert main(["gen-data", *common]) == EXIT_OK
    return root, common


def test_fit_report_written(run):
    root, _ = run
    rep = json.loads((root / "run/weights/fit_report.json").read_text())
    assert len(rep["color"]) == 6 and not rep["color"][3]["converged"]
    assert (root / "run/weights/color_06.mlpw").exists() and (root / "run/weights/tone.mlpw").exists()


def test_train_eval_finetune_render(run, tmp_path, capsys):
    root, common = run
    w = root / "run/weights"
    assert main(["train", *common, "--loss-mode", "combined", "--name", "c"]) == EXIT_OK
    assert main(["train", *common, "--loss-mode", "raw-only", "--name", "r"]) == EXIT_OK
    assert (w / "c.rnet").exists() and (w / "c_log.csv").read_text().startswith("epoch,")
    assert main(["eval", *common, str(w / "r.rnet"), str(w / "c.rnet"), "--name", "e"]) == EXIT_OK
    text = (root / "run/reports/e.csv").read_text()
    table, deltas = text.split("\n\n")
    rows = list(csv.DictReader(io.StringIO(table)))
    assert {r["model"] for r in rows} == {"r", "c"}
    assert sum(r["image"] == "MEAN" for r in rows) == 12
    assert deltas.startswith("delta_model,baseline")
    meta = json.loads((root / "run/reports/e.json").read_text())
    assert meta["models"] == ["r", "c"] and "manifest_hash" in meta
    assert main(["finetune", *common, "--checkpoint", str(w / "c.rnet"), "--image", "test-0001",
                 "--target-edit", "Edit2", "--output", str(tmp_path / "ft.rnet")]) == EXIT_OK
    assert (tmp_path / "ft.rnet").exists()
    assert main(["finetune", *common, "--checkpoint", str(w / "c.rnet"), "--image", "nope"]) == EXIT_ARGS
    raw = root / "run/data/test/0000_raw.rawp"
    out = tmp_path / "z.rawp"
    assert main(["render", *common, "--raw", str(raw), "--edit", "edit1", "--output", str(out)]) == EXIT_OK
    z, _ = load_rawp(out)
    assert z.shape == (16, 16, 3) and out.with_suffix(".png").exists()
    phi = json.dumps({"epsilon": 0.5, "omega": [1.0, 0.8], "rho": 3, "tone_poly": [0.0, 1.0]})
    assert main(["render", *common, "--raw", str(raw), "--edit", phi, "--output", str(out)]) == EXIT_OK


def test_training_is_reproducible(run):
    root, common = run
    w = root / "run/weights"
    assert main(["train", *common, "--loss-mode", "srgb-only", "--name", "a"]) == EXIT_OK
    assert main(["train", *common, "--loss-mode", "srgb-only", "--name", "b"]) == EXIT_OK
    assert (w / "a.rnet").read_bytes() == (w / "b.rnet").read_bytes()


def test_gen_data_is_reproducible(run, tmp_path):
    root, common = run
    other = [*common[:-4], "--out", str(root / "run"), "--seed", "1"]
    before = (root / "run/data/manifest.json").read_bytes()
    assert main(["gen-data", *other]) == EXIT_OK
    assert (root / "run/data/manifest.json").read_bytes() == before


def test_gradcheck_and_tamper(run, monkeypatch, capsys):
    _, common = run
    assert main(["gradcheck", *common, "--cases", "10"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 3
    monkeypatch.setattr(cli, "GRADCHECK_TAMPER", lambda g: g * 1.01)
    assert main(["gradcheck", *common, "--cases", "10"]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_sample_edits(run, tmp_path):
    _, common = run
    out = tmp_path / "e.json"
    assert main(["sample-edits", *common, "-n", "5", "--output", str(out)]) == EXIT_OK
    draws = json.loads(out.read_text())
    assert len(draws) == 5 and all(1 <= d["phi"]["rho"] <= 6 for d in draws)


def test_exit_codes(run, tmp_path):
    _, common = run
    with pytest.raises(SystemExit) as exc:
        main(["train", *common])
    assert exc.value.code == EXIT_ARGS
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_ARGS
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-data", "--config", str(bad)]) == EXIT_ARGS
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad)]) == EXIT_ARGS
    bad.write_text(json.dumps({"sampler": {"k_luts": 20}}))
    assert main(["gen-data", "--config", str(bad)]) == EXIT_ARGS
    assert main(["gen-data", "--out", str(tmp_path / "empty")]) == EXIT_IO
    assert main(["eval", *common, str(tmp_path / "missing.rnet")]) == EXIT_IO
    junk = tmp_path / "junk.rnet"
    junk.write_bytes(b"nope")
    assert main(["eval", *common, str(junk)]) == EXIT_IO
    assert main(["render", *common, "--raw", str(junk), "--edit", "Edit1", "--output",
                 str(tmp_path / "o.rawp")]) == EXIT_IO
    assert main(["render", *common, "--raw", str(tmp_path / "x"), "--edit", "{bad", "--output", "o"]) != EXIT_OK


def test_config_merge_and_hash(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {"epochs": 3}}))
    cfg = RunConfig.from_file(p)
    assert cfg.model["epochs"] == 3 and cfg.model["base_filters"] == RunConfig().model["base_filters"]
    assert cfg.hash() != RunConfig().hash() and len(cfg.hash()) == 16
    assert cfg.resolved(out=tmp_path, seed=4).data_dir == str(tmp_path / "data")
    assert np.isclose(cfg.model_config(lam=0.5).lam, 0.5)
