"""Seeded synthetic scenes and (RAW, sRGB, metadata) datasets.

Scenes are composited from smooth gradient fields, flat-chroma shapes,
radial highlights and fine texture, stretched to [0.02, 0.98], then given
an illuminant cast. The reference sRGB is the ISP rendering at the
camera-default configuration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_image, check_random_state
from .imagecore import (
    COLORSPACE_RAW,
    COLORSPACE_SRGB,
    DAYLIGHT_ASN,
    TUNGSTEN_ASN,
    ImageMeta,
    load_rawp,
    quantize16,
    save_rawp,
    sidecar_path,
)
from .isp import SRGB_TO_XYZ, EditISP, EditParams
from .sampling import IlluminantDictionary, camera_default_params

STRETCH = (0.02, 0.98)

# Sensor-to-linear-sRGB mixing under each calibration illuminant; rows sum
# to one so a white-balanced neutral stays neutral.
_MIX_TUNGSTEN = np.array([[0.86, 0.10, 0.04], [0.07, 0.85, 0.08], [0.02, 0.13, 0.85]])
_MIX_DAYLIGHT = np.array([[0.80, 0.15, 0.05], [0.05, 0.88, 0.07], [0.03, 0.09, 0.88]])
CST_A = SRGB_TO_XYZ @ _MIX_TUNGSTEN
CST_B = SRGB_TO_XYZ @ _MIX_DAYLIGHT

# Illuminant prior: a band of half-width PRIOR_HALF_WIDTH around the
# tungsten-daylight segment in [r/g, b/g].
PRIOR_HALF_WIDTH = 0.08


@dataclass
class SceneConfig:
    size: tuple = (64, 64)
    gradient: float = 1.0
    shapes: float = 1.0
    highlights: float = 0.5
    texture: float = 0.25
    stretch: tuple = STRETCH
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.stretch = tuple(float(s) for s in self.stretch)
        w = self.weights
        if len(self.size) != 2 or any(s < 16 or s % 16 for s in self.size):
            raise ValueError("scene size must be two multiples of 16")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("mix weights must be non-negative with a positive sum")
        lo, hi = self.stretch
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("stretch must satisfy 0 <= lo < hi <= 1")

    @property
    def weights(self):
        return np.array([self.gradient, self.shapes, self.highlights, self.texture], dtype=np.float64)

    def to_dict(self):
        d = asdict(self)
        d["size"] = list(self.size)
        d["stretch"] = list(self.stretch)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- scene primitives -----------------------------------------------------------
def _grid(h, w):
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")
    return yy, xx


def _gradient_field(h, w, rng):
    yy, xx = _grid(h, w)
    out = np.zeros((h, w, 3))
    for c in range(3):
        a, b = rng.normal(size=2)
        f = a * yy + b * xx
        for _ in range(2):
            fy, fx = rng.uniform(-1.0, 1.0, size=2)
            out_phase = rng.uniform(0, 2 * np.pi)
            f = f + 0.5 * rng.uniform() * np.sin(np.pi * (fy * yy + fx * xx) + out_phase)
        out[..., c] = f
    return out


def _shapes(h, w, rng):
    yy, xx = _grid(h, w)
    out = np.tile(rng.uniform(0.0, 1.0, 3), (h, w, 1))
    for _ in range(int(rng.integers(5, 13))):
        colour = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0.0, 1.0, 2)
        ry, rx = rng.uniform(0.05, 0.35, 2)
        if rng.uniform() < 0.5:
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        out[inside] = colour
    return out


def _highlights(h, w, rng):
    yy, xx = _grid(h, w)
    out = np.zeros((h, w, 3))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.0, 1.0, 2)
        s = rng.uniform(0.05, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        out += blob[..., None] * rng.uniform(0.5, 1.0, 3)
    return out


def _texture(h, w, rng):
    grey = rng.uniform(0.0, 1.0, (h, w, 1))
    return grey * rng.uniform(0.6, 1.0, 3) + 0.2 * rng.uniform(0.0, 1.0, (h, w, 3))


def gen_scene(cfg: SceneConfig, rng=None) -> np.ndarray:
    """Linear-light scene spanning exactly ``cfg.stretch``."""
    rng = check_random_state(cfg.seed if rng is None else rng)
    h, w = cfg.size
    makers = (_gradient_field, _shapes, _highlights, _texture)
    weights = cfg.weights
    img = np.zeros((h, w, 3))
    for weight, make in zip(weights, makers):
        layer = make(h, w, rng)  # always drawn so streams do not depend on the mix
        if weight > 0:
            span = np.ptp(layer)
            layer = (layer - layer.min()) / span if span > 0 else np.zeros_like(layer)
            img += weight * layer
    img /= weights.sum()
    lo, hi = cfg.stretch
    span = np.ptp(img)
    if span == 0:
        return np.full((h, w, 3), 0.5 * (lo + hi))
    return lo + (hi - lo) * (img - img.min()) / span


def assign_illuminant(x, omega_true, rng=None, scene_id=""):
    """Apply the colour cast ``diag(w_r, 1, w_b)`` and build the metadata.

    ``rng`` is accepted for interface symmetry; the operation is deterministic.
    """
    x = check_image(x, "x")
    omega = np.asarray(omega_true, dtype=np.float64)
    if omega.shape != (2,) or np.any(omega <= 0):
        raise ValueError("omega_true must be two positive numbers")
    cast = x * np.array([omega[0], 1.0, omega[1]])
    meta = ImageMeta(asn=tuple(omega), cst_a=CST_A, cst_b=CST_B, scene_id=scene_id,
                     omega_a=TUNGSTEN_ASN, omega_b=DAYLIGHT_ASN)
    return cast, meta


def sample_true_illuminant(rng) -> tuple:
    """Uniform draw from the band around the tungsten-daylight segment."""
    rng = check_random_state(rng)
    a = np.array(TUNGSTEN_ASN)
    b = np.array(DAYLIGHT_ASN)
    d = b - a
    normal = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    t, s = rng.uniform(0.0, 1.0), rng.uniform(-1.0, 1.0)
    p = a + t * d + s * PRIOR_HALF_WIDTH * normal
    return (float(p[0]), float(p[1]))


def render_reference(x, meta: ImageMeta, isp: EditISP) -> np.ndarray:
    """Camera-default rendering ``g_phi0(x)``."""
    return isp.render(x, camera_default_params(meta.asn), meta)


def make_pair(scene_cfg: SceneConfig, isp: EditISP, rng, scene_id=""):
    """One quantised ``(x, y, meta)`` triple; ``y`` is rendered from the stored ``x``."""
    rng = check_random_state(rng)
    scene = gen_scene(scene_cfg, rng)
    omega = sample_true_illuminant(rng)
    scene = scene / max(1.0, *omega)
    x, meta = assign_illuminant(scene, omega, scene_id=scene_id)
    x = quantize16(x) / 65535.0
    y = quantize16(render_reference(x, meta, isp)) / 65535.0
    return x, y, meta


# -- datasets -------------------------------------------------------------------------
SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    splits: dict
    seed: int
    phi0: dict
    dictionary: list
    scene: dict = field(default_factory=dict)
    root: Path | None = None

    def to_json(self) -> str:
        body = {"splits": self.splits, "seed": self.seed, "phi0": self.phi0,
                "dictionary": self.dictionary, "scene": self.scene}
        return json.dumps(body, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        path = Path(path)
        obj = json.loads(path.read_text())
        m = cls(obj["splits"], obj["seed"], obj["phi0"], obj["dictionary"], obj.get("scene", {}),
                root=path.parent)
        m.validate()
        return m

    def validate(self):
        seen = set()
        for split, rows in self.splits.items():
            for row in rows:
                key = row["raw"]
                if key in seen:
                    raise ValueError(f"{key} appears in more than one split")
                seen.add(key)
                if self.root is not None:
                    for k in ("raw", "srgb", "meta"):
                        if not (self.root / row[k]).exists():
                            raise FileNotFoundError(self.root / row[k])

    def illuminant_dictionary(self) -> IlluminantDictionary:
        return IlluminantDictionary(np.asarray(self.dictionary, dtype=np.float64))

    def load_split(self, split) -> "SplitData":
        raws, srgbs, metas = [], [], []
        for row in self.splits[split]:
            x, meta = load_rawp(self.root / row["raw"])
            y, _ = load_rawp(self.root / row["srgb"])
            raws.append(x)
            srgbs.append(y)
            metas.append(meta)
        return SplitData(np.stack(raws), np.stack(srgbs), metas)


@dataclass
class SplitData:
    raw: np.ndarray
    srgb: np.ndarray
    metas: list

    def __len__(self):
        return len(self.metas)

    def subset(self, idx):
        idx = list(idx)
        return SplitData(self.raw[idx], self.srgb[idx], [self.metas[i] for i in idx])


def build_dataset(n_train, n_val, n_test, scene_cfg: SceneConfig, isp: EditISP, out_dir, seed=0):
    """Write all splits plus ``manifest.json`` under ``out_dir``."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ValueError("every split needs at least one image")
    out = Path(out_dir)
    children = iter(np.random.SeedSequence(seed).spawn(sum(counts.values())))
    splits = {}
    dictionary = []
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(counts[split]):
            scene_id = f"{split}-{i:04d}"
            x, y, meta = make_pair(scene_cfg, isp, np.random.default_rng(next(children)), scene_id)
            raw_path = Path(split) / f"{i:04d}_raw.rawp"
            srgb_path = Path(split) / f"{i:04d}_srgb.rawp"
            save_rawp(x, meta, out / raw_path, COLORSPACE_RAW)
            save_rawp(y, None, out / srgb_path, COLORSPACE_SRGB)
            rows.append({"raw": raw_path.as_posix(), "srgb": srgb_path.as_posix(),
                         "meta": sidecar_path(raw_path).as_posix()})
            if split == "train":
                dictionary.append(list(meta.asn))
        splits[split] = rows
    phi0 = {"epsilon": 0.0, "omega": "asn", "rho": camera_default_params((1.0, 1.0)).rho,
            "tone_poly": [0.0, 1.0]}
    manifest = DatasetManifest(splits, int(seed), phi0, dictionary, scene_cfg.to_dict(), root=out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def rerender_matches(x, y, meta, isp: EditISP) -> bool:
    """True when the stored ``y`` is exactly the 16-bit rendering of ``x``."""
    phi: EditParams = camera_default_params(meta.asn)
    return bool(np.array_equal(quantize16(isp.render(x, phi, meta)), quantize16(y)))
