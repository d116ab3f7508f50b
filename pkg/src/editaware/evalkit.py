"""Image-quality metrics, fixed edit presets and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_same_shape
from .imagecore import DAYLIGHT_ASN, TUNGSTEN_ASN, ImageMeta, downsample_bilinear
from .isp import GAMMA, SRGB_TO_XYZ, EditISP, EditParams
from .lutfit import LUT_INDEX

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
D65_WHITE = np.array([0.95047, 1.0, 1.08883])
PRESET_VERSION = 1
METRIC_VARIANTS = {
    "psnr_cap_db": PSNR_CAP,
    "ssim_window": f"{SSIM_WINDOW}x{SSIM_WINDOW} uniform",
    "ssim_k": [SSIM_K1, SSIM_K2],
    "delta_e": "CIE76",
    "delta_e_decode": f"gamma {GAMMA}",
}


# -- metrics ------------------------------------------------------------------
def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit-range images, capped at ``PSNR_CAP``."""
    check_same_shape(a, b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (population statistics), averaged over channels."""
    check_same_shape(a, b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1, c2 = SSIM_K1**2, SSIM_K2**2

    def wmean(v):
        return sliding_window_view(v, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1)).mean(axis=(-2, -1))

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a**2
    var_b = wmean(b * b) - mu_b**2
    cov = wmean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _lab_f(t):
    d = 6.0 / 29.0
    return np.where(t > d**3, np.cbrt(t), t / (3 * d * d) + 4.0 / 29.0)


def linear_to_lab(rgb) -> np.ndarray:
    xyz = np.asarray(rgb, dtype=np.float64) @ SRGB_TO_XYZ.T / D65_WHITE
    f = _lab_f(xyz)
    return np.stack(
        [116.0 * f[..., 1] - 16.0, 500.0 * (f[..., 0] - f[..., 1]), 200.0 * (f[..., 1] - f[..., 2])],
        axis=-1,
    )


def srgb_to_lab(srgb) -> np.ndarray:
    """Display values are decoded with the pipeline's 2.2 gamma before conversion."""
    return linear_to_lab(np.clip(srgb, 0.0, 1.0) ** GAMMA)


def delta_e(a, b, linear=False) -> float:
    """Mean CIE76 colour difference; ``linear=True`` skips the gamma decode."""
    check_same_shape(a, b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    conv = linear_to_lab if linear else srgb_to_lab
    return float(np.mean(np.linalg.norm(conv(a) - conv(b), axis=-1)))


# -- presets -----------------------------------------------------------------------------
def _toward_tungsten(distance):
    d = np.subtract(TUNGSTEN_ASN, DAYLIGHT_ASN)
    d = distance * d / np.linalg.norm(d)
    return (float(d[0]), float(d[1]))


@dataclass(frozen=True)
class EditPreset:
    """A fixed edit. ``omega_offset`` is added to each image's own neutral."""

    name: str
    epsilon: float
    rho: int
    tone_poly: tuple = (0.0, 1.0)
    omega_offset: tuple = (0.0, 0.0)

    def params(self, meta: ImageMeta) -> EditParams:
        omega = (meta.asn[0] + self.omega_offset[0], meta.asn[1] + self.omega_offset[1])
        return EditParams(self.epsilon, omega, self.rho, self.tone_poly)

    def to_dict(self):
        return {"name": self.name, "epsilon": self.epsilon, "rho": self.rho,
                "tone_poly": list(self.tone_poly), "omega_offset": list(self.omega_offset)}


# u + 0.3 u^2 (1 - u) raises the upper mid-tones; u + 0.3 u (1 - u)^2 the lower ones
LIFT_LIGHTS = (0.0, 1.0, 0.3, -0.3)
LIFT_DARKS = (0.0, 1.3, -0.6, 0.3)


def builtin_presets() -> list[EditPreset]:
    return [
        EditPreset("Edit1", 0.0, LUT_INDEX["mild-contrast"]),
        EditPreset("Edit2", 0.7, LUT_INDEX["vivid"]),
        EditPreset("Edit3", 0.5, LUT_INDEX["flat-green"]),
        EditPreset("Edit4", -0.25, LUT_INDEX["warm-contrast"], LIFT_LIGHTS),
        EditPreset("Edit5", 1.5, LUT_INDEX["cool-matte"], LIFT_DARKS, _toward_tungsten(0.1)),
    ]


def extra_presets() -> dict:
    return {"ev+2": EditPreset("ev+2", 2.0, LUT_INDEX["mild-contrast"])}


def preset_by_name(name) -> EditPreset:
    table = {p.name.lower(): p for p in builtin_presets()}
    table.update(extra_presets())
    try:
        return table[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}") from None


# -- reports -------------------------------------------------------------------------------
FIELDS = ("model", "image", "condition", "psnr", "ssim", "delta_e")


@dataclass
class EvalReport:
    model_id: str
    manifest_hash: str
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def conditions(self):
        return list(dict.fromkeys(r["condition"] for r in self.rows))

    def means(self) -> dict:
        out = {}
        for cond in self.conditions:
            sel = [r for r in self.rows if r["condition"] == cond]
            out[cond] = {k: float(np.mean([r[k] for r in sel])) for k in ("psnr", "ssim", "delta_e")}
        return out

    def mean(self, condition, metric="psnr") -> float:
        return self.means()[condition][metric]

    def csv_rows(self):
        rows = [dict(r, model=self.model_id) for r in self.rows]
        for cond, m in self.means().items():
            rows.append({"model": self.model_id, "image": "MEAN", "condition": cond, **m})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.csv_rows():
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def metadata_json(self) -> str:
        body = {"model": self.model_id, "manifest_hash": self.manifest_hash,
                "metric_variants": METRIC_VARIANTS, "preset_version": PRESET_VERSION, **self.meta}
        return json.dumps(body, sort_keys=True, indent=1)

    def save(self, path):
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".json").write_text(self.metadata_json())


def read_report_csv(text):
    """Parse a report CSV back into ``(rows, mean_rows)`` with float metrics."""
    rows, means = [], []
    for r in csv.DictReader(io.StringIO(text)):
        for k in ("psnr", "ssim", "delta_e"):
            r[k] = float(r[k])
        (means if r["image"] == "MEAN" else rows).append(r)
    return rows, means


def manifest_hash(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def evaluate_model(model, data, presets, isp: EditISP, xhat=None, model_id="model",
                   manifest_digest="", metadata_factor=8) -> EvalReport:
    """Score reconstructions of ``data`` in RAW and under every preset.

    ``model`` must offer ``predict(srgb, raw_d)``; pass ``xhat`` instead to
    score precomputed reconstructions (``model`` may then be ``None``).
    """
    if len(data) == 0:
        raise ValueError("evaluation split is empty")
    if xhat is None:
        raw_d = np.stack([downsample_bilinear(x, metadata_factor) for x in data.raw])
        xhat = model.predict(data.srgb, raw_d)
    xhat = np.clip(np.asarray(xhat, dtype=np.float64), 0.0, 1.0)
    report = EvalReport(model_id, manifest_digest)
    for i, (x, xh, meta) in enumerate(zip(data.raw, xhat, data.metas)):
        name = meta.scene_id or f"{i:04d}"
        report.rows.append({"image": name, "condition": "raw", "psnr": psnr(x, xh),
                            "ssim": ssim(x, xh), "delta_e": delta_e(x, xh, linear=True)})
        for preset in presets:
            phi = preset.params(meta)
            z, zh = isp.render(x, phi, meta), isp.render(xh, phi, meta)
            report.rows.append({"image": name, "condition": preset.name, "psnr": psnr(z, zh),
                                "ssim": ssim(z, zh), "delta_e": delta_e(z, zh)})
    report.meta["presets"] = [p.to_dict() for p in presets]
    return report


def compare_reports(baseline: EvalReport, other: EvalReport) -> dict:
    """Per-condition differences of means (``other`` minus ``baseline``)."""
    mb, mo = baseline.means(), other.means()
    return {c: {k: mo[c][k] - mb[c][k] for k in mb[c]} for c in mb if c in mo}
