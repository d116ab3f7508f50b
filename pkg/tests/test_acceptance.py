"""Acceptance criteria 1-8 at full desk scale.

Shared artifacts (fitted ISP, three seeded datasets and the trained models)
are built once per session through the CLI. Each test records one PASS/FAIL
line that is printed in the terminal summary.
"""

import filecmp
import json
import time
from pathlib import Path

import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from conftest import ACCEPTANCE_LINES
from editaware.cli import EXIT_OK, RunConfig, color_path, load_isp, main, tone_path
from editaware.datasynth import DatasetManifest
from editaware.evalkit import (
    PSNR_CAP,
    delta_e,
    evaluate_model,
    extra_presets,
    psnr,
    read_report_csv,
    ssim,
)
from editaware.gradcheck import run_all
from editaware.imagecore import downsample_bilinear
from editaware.lutfit import (
    COLOR_TOLERANCE,
    TONE_TOLERANCE,
    default_tone_curve,
    linear_lookup_1d,
    load_lut,
    trilinear_lookup,
)
from editaware.mlp import load_weights
from editaware.reconnet import RawReconstructor
from editaware.sampling import EditSampler, SamplerConfig, sample_exposure, sample_tone_polynomial

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
EDITED = ("Edit2", "Edit3", "Edit4", "Edit5")


def record(n, passed, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    assert passed, detail


class Workspace:
    """Paths plus a CLI runner for one seed's dataset and the shared weights."""

    def __init__(self, root):
        self.root = Path(root)
        self.weights = self.root / "weights"
        self.timings = {}

    def config(self, seed, data_dir=None):
        path = self.root / f"config_{seed}.json"
        body = {"data_dir": str(data_dir or self.root / f"data_{seed}"), "weights_dir": str(self.weights),
                "report_dir": str(self.root / "reports")}
        path.write_text(json.dumps(body))
        return path

    def run(self, command, seed, *extra, data_dir=None):
        argv = [command, "--config", str(self.config(seed, data_dir)), "--seed", str(seed), *extra]
        t0 = time.perf_counter()
        code = main(argv)
        self.timings.setdefault(command, []).append(time.perf_counter() - t0)
        assert code == EXIT_OK, f"{argv} exited with {code}"

    def run_config(self, seed):
        return RunConfig.from_file(self.config(seed)).resolved(seed=seed)


@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    w = Workspace(tmp_path_factory.mktemp("acceptance"))
    t0 = time.perf_counter()
    w.fit_code = main(["fit-luts", "--config", str(w.config(0)), "--seed", "0"])
    w.fit_seconds = time.perf_counter() - t0
    return w


@pytest.fixture(scope="session")
def isp(ws):
    return load_isp(ws.run_config(0))


@pytest.fixture(scope="session")
def datasets(ws):
    for s in SEEDS:
        ws.run("gen-data", s)
    return {s: DatasetManifest.load(ws.root / f"data_{s}" / "manifest.json") for s in SEEDS}


@pytest.fixture(scope="session")
def models(ws, datasets):
    """Combined-loss, RAW-only and fixed-pipeline models for every seed."""
    times = {}
    for s in SEEDS:
        for mode, extra in (("combined", ()), ("raw-only", ()), ("combined", ("--fixed-pipeline",))):
            name = f"{mode}{'-fixed' if extra else ''}_{s}"
            t0 = time.perf_counter()
            ws.run("train", s, "--loss-mode", mode, "--name", name, *extra)
            times[name] = time.perf_counter() - t0
    ws.train_times = times
    return {name: ws.weights / f"{name}.rnet" for name in times}


@pytest.fixture(scope="session")
def reports(ws, models):
    out = {}
    for s in SEEDS:
        ckpts = [str(models[f"{m}_{s}"]) for m in ("raw-only", "combined", "combined-fixed")]
        t0 = time.perf_counter()
        ws.run("eval", s, *ckpts, "--name", f"eval_{s}")
        ws.timings.setdefault("eval_seconds", {})[s] = time.perf_counter() - t0
        out[s] = ws.root / "reports" / f"eval_{s}.csv"
    return out


def mean_psnr(report_csv, model, conditions):
    table = report_csv.read_text().split("\n\n")[0]
    _, means = read_report_csv(table)
    vals = {m["condition"]: m["psnr"] for m in means if m["model"] == model}
    return float(np.mean([vals[c] for c in conditions]))


# -- 1 -----------------------------------------------------------------------------
def test_criterion_1_gradients(ws, isp):
    t0 = time.perf_counter()
    results = run_all(isp, n_cases=100, rng=0)
    seconds = time.perf_counter() - t0
    ok = all(r.passed and r.cases >= 100 for r in results) and seconds < 300
    detail = "; ".join(f"{r.name} {r.max_rel_error:.1e}/{r.tolerance:.0e} n={r.cases}" for r in results)
    record(1, ok, f"{detail}; {seconds:.0f}s")


# -- 2 -----------------------------------------------------------------------------
def convex_hull(points):
    """Andrew's monotone chain, counter-clockwise."""
    pts = sorted(map(tuple, points))

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and (
                (out[-1][0] - out[-2][0]) * (p[1] - out[-2][1]) - (out[-1][1] - out[-2][1]) * (p[0] - out[-2][0])
            ) <= 0:
                out.pop()
            out.append(p)
        return out

    lower, upper = half(pts), half(reversed(pts))
    return lower[:-1] + upper[:-1]


def inside_ccw(hull, p, tol=1e-12):
    for i in range(len(hull)):
        (x1, y1), (x2, y2) = hull[i], hull[(i + 1) % len(hull)]
        if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) < -tol:
            return False
    return True


def test_criterion_2_sampler(datasets):
    manifest = datasets[0]
    d = manifest.illuminant_dictionary()
    cfg = SamplerConfig()
    sampler = EditSampler.from_config(cfg).fit(d)
    hull = convex_hull(d.entries)
    rng = np.random.default_rng(2024)
    bad_wb = 0
    for k in range(10_000):
        asn = d.entries[k % len(d)]
        w = sampler.sample(tuple(asn), rng).omega
        if not (inside_ccw(hull, w) and np.hypot(w[0] - asn[0], w[1] - asn[1]) <= cfg.wb_threshold):
            bad_wb += 1
    grid = np.linspace(0.0, 1.0, 1024)
    bad_tone = 0
    for _ in range(1000):
        c = np.array(sample_tone_polynomial(cfg, rng))
        v = P.polyval(grid, c)
        if abs(v[0]) > 1e-12 or abs(v[-1] - 1) > 1e-12 or np.any(np.diff(v) < 0):
            bad_tone += 1
    ev = np.array([sample_exposure(cfg, rng) for _ in range(100_000)])
    ok = bad_wb == 0 and bad_tone == 0 and abs(ev.mean()) <= 0.01 and abs(ev.std() - 0.75) <= 0.01
    record(2, ok, f"illuminant violations {bad_wb}/10000; tone violations {bad_tone}/1000; "
                  f"exposure mean {ev.mean():+.4f} std {ev.std():.4f}")


# -- 3 -----------------------------------------------------------------------------
def test_criterion_3_lut_fits(ws, isp):
    report = json.loads((ws.weights / "fit_report.json").read_text())
    rng = np.random.default_rng(31337)
    worst = []
    for i in range(1, 16):
        lut = load_lut(ws.weights / f"lut_{i:02d}.json")
        mlp = load_weights(color_path(ws.weights, i))
        pts = rng.uniform(size=(100_000, 3))
        worst.append(float(np.abs(mlp.forward(pts) - trilinear_lookup(lut, pts)).max()))
    u = rng.uniform(size=(100_000, 1))
    tone = load_weights(tone_path(ws.weights))
    tone_err = float(np.abs(tone.forward(u)[:, 0] - linear_lookup_1d(default_tone_curve(), u[:, 0])).max())
    reported = [c["max_error"] for c in report["color"]]
    ok = (ws.fit_code == EXIT_OK and max(worst) <= COLOR_TOLERANCE and tone_err <= TONE_TOLERANCE
          and max(reported) <= COLOR_TOLERANCE and report["tone"]["max_error"] <= TONE_TOLERANCE)
    per_lut = " ".join(f"{e * 255:.2f}" for e in worst)
    record(3, ok, f"colour max-abs x255 [{per_lut}] (limit 2); tone {tone_err * 255:.2f}/255 (limit 1); "
                  f"fit {ws.fit_seconds:.0f}s")


# -- 4 -----------------------------------------------------------------------------
def test_criterion_4_edit_aware_gain(ws, models, reports):
    gains, raw_drop = [], []
    for s in SEEDS:
        gains.append(mean_psnr(reports[s], f"combined_{s}", EDITED) - mean_psnr(reports[s], f"raw-only_{s}", EDITED))
        raw_drop.append(mean_psnr(reports[s], f"combined_{s}", ["raw"]) - mean_psnr(reports[s], f"raw-only_{s}", ["raw"]))
    minutes = (sum(v for k, v in ws.train_times.items() if "fixed" not in k)
               + sum(ws.timings["gen-data"]) + sum(ws.timings["eval_seconds"].values())) / 60
    ok = all(g >= 0.5 for g in gains) and minutes <= 60
    record(4, ok, "Edit2-5 PSNR gain combined vs raw-only " + ", ".join(f"{g:+.2f}" for g in gains)
           + " dB (need >= +0.50 each); RAW PSNR change " + ", ".join(f"{r:+.2f}" for r in raw_drop)
           + f" dB; {minutes:.1f} min")


# -- 5 -----------------------------------------------------------------------------
def test_criterion_5_fixed_pipeline_ablation(ws, reports):
    diffs = [mean_psnr(reports[s], f"combined_{s}", ["Edit5"]) - mean_psnr(reports[s], f"combined-fixed_{s}", ["Edit5"])
             for s in SEEDS]
    budgets = [ws.train_times[f"combined-fixed_{s}"] for s in SEEDS]
    ok = all(d > 0 for d in diffs)
    record(5, ok, "Edit5 PSNR sampled minus fixed " + ", ".join(f"{d:+.3f}" for d in diffs)
           + " dB (need > 0 each); fixed runs " + ", ".join(f"{b:.0f}s" for b in budgets))


# -- 6 -----------------------------------------------------------------------------
def test_criterion_6_target_edit_finetune(ws, isp, datasets, models):
    est = RawReconstructor.load(models["combined_0"])
    manifest = datasets[0]
    test = manifest.load_split("test")
    preset = extra_presets()["ev+2"]
    sampler = EditSampler.from_config(ws.run_config(0).sampler_config()).fit(manifest.illuminant_dictionary())
    f = est.metadata_factor
    scores = {"none": [], "sampled": [], "target": []}
    t0 = time.perf_counter()
    for i, (x, y, meta) in enumerate(zip(test.raw, test.srgb, test.metas)):
        raw_d = downsample_bilinear(x, f)
        phi = preset.params(meta)
        z = isp.render(x, phi, meta)
        variants = {
            "none": est,
            "sampled": est.finetune(y, raw_d, meta, isp, sampler=sampler, rng=i),
            "target": est.finetune(y, raw_d, meta, isp, target_phi=phi, rng=i),
        }
        for key, model in variants.items():
            xhat = np.clip(model.predict(y[None], raw_d[None])[0], 0.0, 1.0)
            scores[key].append(psnr(z, isp.render(xhat, phi, meta)))
    minutes = (time.perf_counter() - t0) / 60
    m = {k: float(np.mean(v)) for k, v in scores.items()}
    ok = m["target"] >= m["sampled"] + 0.05 and m["sampled"] >= m["none"] and minutes <= 15
    record(6, ok, f"EV+2 PSNR target {m['target']:.3f} / sampled {m['sampled']:.3f} / none {m['none']:.3f} dB; "
                  f"{minutes:.1f} min")


# -- 7 -----------------------------------------------------------------------------
def test_criterion_7_metric_identities(reports):
    rng = np.random.default_rng(77)
    bad = 0
    for _ in range(50):
        a = rng.uniform(size=(32, 32, 3))
        if psnr(a, a) != PSNR_CAP or abs(ssim(a, a) - 1.0) > 1e-12 or delta_e(a, a) != 0.0:
            bad += 1
    worst = 0.0
    for path in reports.values():
        rows, means = read_report_csv(path.read_text().split("\n\n")[0])
        for m in means:
            sel = [r for r in rows if r["model"] == m["model"] and r["condition"] == m["condition"]]
            for k in ("psnr", "ssim", "delta_e"):
                worst = max(worst, abs(np.mean([r[k] for r in sel]) - m[k]))
    ok = bad == 0 and worst <= 1e-9
    record(7, ok, f"identity failures {bad}/50; max report mean mismatch {worst:.1e}")


# -- 8 -----------------------------------------------------------------------------
def test_criterion_8_reproducibility(ws, datasets, reports):
    again = ws.root / "data_0_again"
    ws.run("gen-data", 0, data_dir=again)
    cmp = filecmp.dircmp(ws.root / "data_0", again)
    data_same = True
    for sub in [cmp] + list(cmp.subdirs.values()):
        _, mismatch, errors = filecmp.cmpfiles(sub.left, sub.right, sub.common_files, shallow=False)
        data_same &= not mismatch and not errors and not sub.left_only and not sub.right_only
    ckpt_same = True
    for name in ("repro_a", "repro_b"):
        ws.run("train", 0, "--loss-mode", "combined", "--epochs", "1", "--name", name)
    ckpt_same = (ws.weights / "repro_a.rnet").read_bytes() == (ws.weights / "repro_b.rnet").read_bytes()
    ckpt_same &= (ws.weights / "repro_a_log.csv").read_text().split("\n")[0] == "epoch,train_loss,val_loss,wall_seconds"
    ws.run("eval", 0, str(ws.weights / "repro_a.rnet"), "--name", "repro_1")
    ws.run("eval", 0, str(ws.weights / "repro_a.rnet"), "--name", "repro_2")
    rep = ws.root / "reports"
    report_same = ((rep / "repro_1.csv").read_bytes() == (rep / "repro_2.csv").read_bytes()
                   and (rep / "repro_1.json").read_bytes() == (rep / "repro_2.json").read_bytes())
    ok = data_same and ckpt_same and report_same
    record(8, ok, f"dataset identical={data_same}; checkpoint identical={ckpt_same}; report identical={report_same}")
