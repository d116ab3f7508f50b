"""Command-line entry point: ``editaware <command> [options]``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 numerical
failure (fit out of tolerance, divergence, failed check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .datasynth import DatasetManifest, SceneConfig, build_dataset, rerender_matches
from .evalkit import (
    METRIC_VARIANTS,
    PRESET_VERSION,
    builtin_presets,
    compare_reports,
    evaluate_model,
    manifest_hash,
    preset_by_name,
)
from .gradcheck import run_all
from .imagecore import COLORSPACE_SRGB, RawpFormatError, downsample_bilinear, load_rawp, save_rawp
from .isp import EditISP, EditParams
from .lutfit import (
    COLOR_TOLERANCE,
    TONE_TOLERANCE,
    default_tone_curve,
    fit_mlp_to_lut3d,
    fit_mlp_to_tonecurve,
    generate_builtin_luts,
    save_lut,
)
from .mlp import WeightFormatError, load_weights, save_weights
from .reconnet import RawReconstructor, TrainingDivergedError
from .sampling import EditSampler, SamplerConfig
from .unet import CheckpointFormatError, ModelConfig

log = logging.getLogger("editaware")

EXIT_OK, EXIT_ARGS, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
# negative-control hook for the gradcheck command; tests may set a callable
GRADCHECK_TAMPER = None


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class LutFitConfig:
    k: int = 15
    style_seed: int = 0
    lattice: int = 33
    color_hidden: tuple = (64, 64)
    tone_hidden: tuple = (16, 16)
    color_budget: int = 8000
    tone_budget: int = 3000
    color_train_points: int = 5000
    tone_train_points: int = 2000


@dataclass
class DataConfig:
    n_train: int = 300
    n_val: int = 30
    n_test: int = 50
    scene: dict = field(default_factory=lambda: SceneConfig().to_dict())


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    weights_dir: str = "weights"
    report_dir: str = "reports"
    sampler: dict = field(default_factory=lambda: SamplerConfig().to_dict())
    model: dict = field(default_factory=lambda: ModelConfig.desk_scale().to_dict())
    luts: dict = field(default_factory=lambda: asdict(LutFitConfig()))
    data: dict = field(default_factory=lambda: asdict(DataConfig()))
    preset_version: int = PRESET_VERSION
    metric_variants: dict = field(default_factory=lambda: dict(METRIC_VARIANTS))

    @classmethod
    def from_file(cls, path):
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        base = asdict(cls())
        unknown = set(obj) - set(base)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        for key, val in obj.items():
            if isinstance(base[key], dict):
                base[key].update(val)
            else:
                base[key] = val
        return cls(**base)

    def resolved(self, out=None, seed=None):
        cfg = RunConfig(**asdict(self))
        if seed is not None:
            cfg.seed = seed
        if out is not None:
            root = Path(out)
            cfg.data_dir = str(root / "data")
            cfg.weights_dir = str(root / "weights")
            cfg.report_dir = str(root / "reports")
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.sampler_config()
            self.model_config()
            LutFitConfig(**self.luts)
            DataConfig(**self.data)
            SceneConfig.from_dict(self.data["scene"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc
        if self.sampler_config().k_luts > self.luts["k"]:
            raise UsageError("sampler.k_luts exceeds the number of fitted LUTs")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig.from_dict(self.sampler)

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, **overrides})

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# -- shared helpers -----------------------------------------------------------------
def color_path(weights_dir, i):
    return Path(weights_dir) / f"color_{i:02d}.mlpw"


def tone_path(weights_dir):
    return Path(weights_dir) / "tone.mlpw"


def load_isp(cfg: RunConfig) -> EditISP:
    k = cfg.luts["k"]
    paths = [color_path(cfg.weights_dir, i) for i in range(1, k + 1)]
    missing = [str(p) for p in paths + [tone_path(cfg.weights_dir)] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"LUT weights missing (run fit-luts first): {missing[:3]}")
    return EditISP([load_weights(p) for p in paths], load_weights(tone_path(cfg.weights_dir)))


def load_manifest(cfg: RunConfig) -> DatasetManifest:
    return DatasetManifest.load(Path(cfg.data_dir) / "manifest.json")


def fitted_sampler(cfg: RunConfig, manifest, fixed=False) -> EditSampler:
    return EditSampler.from_config(cfg.sampler_config(), fixed=fixed).fit(manifest.illuminant_dictionary())


def parse_phi(text) -> EditParams:
    try:
        return EditParams.from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot parse EditParams from {text!r}: {exc}") from exc


def resolve_edit(name_or_json, meta):
    """A preset name or an explicit EditParams JSON object."""
    if name_or_json.lstrip().startswith("{"):
        return parse_phi(name_or_json)
    try:
        return preset_by_name(name_or_json).params(meta)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- commands --------------------------------------------------------------------------
def cmd_fit_luts(cfg: RunConfig, args) -> int:
    lc = LutFitConfig(**cfg.luts)
    out = Path(cfg.weights_dir)
    out.mkdir(parents=True, exist_ok=True)
    luts = generate_builtin_luts(lc.k, seed=lc.style_seed, size=lc.lattice)
    report = {"config_hash": cfg.hash(), "seed": cfg.seed, "color": [], "tone": None}
    ok = True
    for i, lut in enumerate(luts, start=1):
        save_lut(lut, out / f"lut_{i:02d}.json")
        mlp, rep = fit_mlp_to_lut3d(lut, tuple(lc.color_hidden), lc.color_budget,
                                    rng=cfg.seed * 1000 + i, n_train=lc.color_train_points)
        save_weights(mlp, color_path(out, i))
        report["color"].append({"index": i, "name": lut.name, **rep.as_dict()})
        ok &= rep.converged
        log.info("colour %2d %-14s max err %.2f/255", i, lut.name, rep.max_error * 255)
    mlp, rep = fit_mlp_to_tonecurve(default_tone_curve(), tuple(lc.tone_hidden), lc.tone_budget,
                                    rng=cfg.seed * 1000, n_train=lc.tone_train_points)
    save_weights(mlp, tone_path(out))
    report["tone"] = rep.as_dict()
    ok &= rep.converged
    report["tolerances"] = {"color": COLOR_TOLERANCE, "tone": TONE_TOLERANCE}
    (out / "fit_report.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    print(out / "fit_report.json")
    if not ok:
        raise NumericalFailure("at least one MLP fit missed its tolerance; see fit_report.json")
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    dc = DataConfig(**cfg.data)
    for name in ("n_train", "n_val", "n_test"):
        if getattr(args, name, None) is not None:
            setattr(dc, name, getattr(args, name))
    try:
        scene = SceneConfig.from_dict(dc.scene)
        manifest = build_dataset(dc.n_train, dc.n_val, dc.n_test, scene, isp, cfg.data_dir, cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rng = np.random.default_rng(cfg.seed)
    rows = [r for s in manifest.splits.values() for r in s]
    for k in rng.choice(len(rows), size=min(10, len(rows)), replace=False):
        x, meta = load_rawp(Path(cfg.data_dir) / rows[k]["raw"])
        y, _ = load_rawp(Path(cfg.data_dir) / rows[k]["srgb"])
        if not rerender_matches(x, y, meta, isp):
            raise NumericalFailure(f"re-render check failed for {rows[k]['raw']}")
    print(Path(cfg.data_dir) / "manifest.json")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    manifest = load_manifest(cfg)
    overrides = {"loss_mode": args.loss_mode}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    try:
        mcfg = cfg.model_config(**overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sampler = fitted_sampler(cfg, manifest, fixed=args.fixed_pipeline)
    checksum = isp.checksum()
    est = RawReconstructor.from_config(mcfg, random_state=cfg.seed)
    est.fit(manifest.load_split("train"), isp=isp, sampler=sampler, val=manifest.load_split("val"),
            progress=lambda row: log.info("epoch %(epoch)d train %(train_loss).5f val %(val_loss).5f", row))
    if isp.checksum() != checksum:
        raise NumericalFailure("frozen ISP weights changed during training")
    out = Path(cfg.weights_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or (args.loss_mode + ("-fixed" if args.fixed_pipeline else ""))
    est.save(out / f"{name}.rnet", extra={
        "config_hash": cfg.hash(), "seed": cfg.seed, "loss_mode": mcfg.loss_mode,
        "fixed_pipeline": bool(args.fixed_pipeline), "best_epoch": est.best_epoch_,
    })
    (out / f"{name}_log.csv").write_text(est.result_.log_csv())
    print(out / f"{name}.rnet")
    return EXIT_OK


def _find_image(manifest, image_id):
    for split, rows in manifest.splits.items():
        for i, row in enumerate(rows):
            if image_id in (row["raw"], f"{split}-{i:04d}"):
                return row
    raise UsageError(f"image {image_id!r} not found in the manifest")


def cmd_finetune(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    manifest = load_manifest(cfg)
    est = RawReconstructor.load(args.checkpoint)
    row = _find_image(manifest, args.image)
    x, meta = load_rawp(manifest.root / row["raw"])
    y, _ = load_rawp(manifest.root / row["srgb"])
    raw_d = downsample_bilinear(x, est.metadata_factor)
    target = resolve_edit(args.target_edit, meta) if args.target_edit else None
    sampler = None if target is not None else fitted_sampler(cfg, manifest)
    tuned = est.finetune(y, raw_d, meta, isp, target_phi=target, sampler=sampler, rng=cfg.seed)
    out = Path(args.output) if args.output else Path(cfg.weights_dir) / f"{Path(args.checkpoint).stem}_ft.rnet"
    out.parent.mkdir(parents=True, exist_ok=True)
    tuned.save(out, extra={"config_hash": cfg.hash(), "seed": cfg.seed, "image": row["raw"],
                           "phi_mode": "fixed" if target is not None else "sampled",
                           "target_phi": target.to_dict() if target is not None else None})
    print(out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    manifest = load_manifest(cfg)
    test = manifest.load_split("test")
    digest = manifest_hash(Path(cfg.data_dir) / "manifest.json")
    presets = builtin_presets()
    reports = []
    for ckpt in args.checkpoints:
        est = RawReconstructor.load(ckpt)
        reports.append(evaluate_model(est, test, presets, isp, model_id=Path(ckpt).stem,
                                      manifest_digest=digest, metadata_factor=est.metadata_factor))
    out = Path(cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    blocks = [reports[0].to_csv()] + [r.to_csv().split("\n", 1)[1] for r in reports[1:]]
    text = "".join(blocks)
    deltas = {r.model_id: compare_reports(reports[0], r) for r in reports[1:]}
    if deltas:
        text += "\ndelta_model,baseline,condition,psnr,ssim,delta_e\n"
        for model, table in deltas.items():
            for cond, d in table.items():
                text += f"{model},{reports[0].model_id},{cond},{d['psnr']!r},{d['ssim']!r},{d['delta_e']!r}\n"
    name = args.name or "eval"
    (out / f"{name}.csv").write_text(text)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "manifest_hash": digest,
            "models": [r.model_id for r in reports], "metric_variants": METRIC_VARIANTS,
            "preset_version": PRESET_VERSION, "presets": [p.to_dict() for p in presets],
            "means": {r.model_id: r.means() for r in reports}, "deltas": deltas}
    (out / f"{name}.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    print(out / f"{name}.csv")
    return EXIT_OK


def write_preview(srgb, path):
    from PIL import Image

    Image.fromarray(np.round(np.clip(srgb, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG")


def cmd_render(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    x, meta = load_rawp(args.raw)
    if meta is None:
        raise UsageError(f"{args.raw} has no metadata sidecar")
    phi = resolve_edit(args.edit, meta)
    z = isp.render(x, phi, meta)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rawp(z, None, out, COLORSPACE_SRGB)
    write_preview(z, out.with_suffix(".png"))
    print(out)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    isp = load_isp(cfg)
    results = run_all(isp, n_cases=args.cases, rng=cfg.seed, tamper=GRADCHECK_TAMPER)
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise NumericalFailure("gradient check failed")
    return EXIT_OK


def cmd_sample_edits(cfg: RunConfig, args) -> int:
    manifest = load_manifest(cfg)
    sampler = fitted_sampler(cfg, manifest)
    rng = np.random.default_rng(cfg.seed)
    entries = manifest.dictionary
    draws = []
    for i in range(args.n):
        asn = tuple(entries[i % len(entries)])
        draws.append({"asn": list(asn), "phi": sampler.sample(asn, rng).to_dict()})
    text = json.dumps(draws, indent=1, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="root for data/, weights/ and reports/")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="editaware", description="Edit-aware RAW reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("fit-luts", parents=[common], help="fit colour and tone MLPs")
    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    t = sub.add_parser("train", parents=[common], help="train a reconstruction model")
    t.add_argument("--loss-mode", choices=["raw-only", "srgb-only", "combined"], required=True)
    t.add_argument("--lam", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--fixed-pipeline", action="store_true", help="disable edit sampling")
    t.add_argument("--name")
    f = sub.add_parser("finetune", parents=[common], help="fine-tune on one image")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--image", required=True, help="scene id, e.g. test-0003")
    f.add_argument("--target-edit", help="preset name (Edit1..Edit5, ev+2) or EditParams JSON")
    f.add_argument("--output")
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the test split")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--name")
    r = sub.add_parser("render", parents=[common], help="render a RAW file through the ISP")
    r.add_argument("--raw", required=True)
    r.add_argument("--edit", required=True, help="preset name or EditParams JSON")
    r.add_argument("--output", required=True)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    gc.add_argument("--cases", type=int, default=100)
    s = sub.add_parser("sample-edits", parents=[common], help="dump sampled EditParams as JSON")
    s.add_argument("-n", type=int, default=16)
    s.add_argument("--output")
    return p


COMMANDS = {
    "fit-luts": cmd_fit_luts,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "sample-edits": cmd_sample_edits,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        base = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = base.resolved(out=args.out, seed=args.seed)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (NumericalFailure, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, RawpFormatError, WeightFormatError, CheckpointFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
