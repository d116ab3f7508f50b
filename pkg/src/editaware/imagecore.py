"""Image containers, RAWP file I/O and integer-factor resampling.

Images are plain ``(H, W, 3)`` float64 arrays. Whether an array holds a
scene-referred RAW or a display-referred sRGB image is tracked by the
``colorspace`` byte of the RAWP header, not by the array type.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_image, check_random_state

MAGIC = b"RAWP"
VERSION = 1
COLORSPACE_RAW = 0
COLORSPACE_SRGB = 1
_HEADER = struct.Struct(">4sHIIBB")

# Reference illuminants of the synthetic two-point camera calibration.
TUNGSTEN_ASN = (1.8, 0.45)
DAYLIGHT_ASN = (0.65, 0.85)


class RawpFormatError(ValueError):
    """Header is not a valid RAWP header."""


class CorruptFileError(RawpFormatError):
    """Payload length does not match the header."""


@dataclass(frozen=True)
class ImageMeta:
    """Per-capture metadata: as-shot neutral plus two calibration CSTs.

    ``omega_a`` / ``omega_b`` are the illuminant chromaticities at which
    ``cst_a`` / ``cst_b`` were calibrated.
    """

    asn: tuple
    cst_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    cst_b: np.ndarray = field(default_factory=lambda: np.eye(3))
    scene_id: str = ""
    omega_a: tuple = TUNGSTEN_ASN
    omega_b: tuple = DAYLIGHT_ASN

    def __post_init__(self):
        asn = tuple(float(v) for v in self.asn)
        if len(asn) != 2 or min(asn) <= 0 or not np.all(np.isfinite(asn)):
            raise ValueError("asn must be two positive finite numbers")
        object.__setattr__(self, "asn", asn)
        for name in ("cst_a", "cst_b"):
            m = np.array(getattr(self, name), dtype=np.float64).reshape(3, 3)
            if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-9:
                raise ValueError(f"{name} must be finite and invertible")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        object.__setattr__(self, "omega_a", tuple(float(v) for v in self.omega_a))
        object.__setattr__(self, "omega_b", tuple(float(v) for v in self.omega_b))

    def to_json(self) -> str:
        obj = {
            "asn": list(self.asn),
            "cst_a": self.cst_a.ravel().tolist(),
            "cst_b": self.cst_b.ravel().tolist(),
            "scene_id": self.scene_id,
            "omega_a": list(self.omega_a),
            "omega_b": list(self.omega_b),
        }
        return json.dumps(obj, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ImageMeta":
        obj = json.loads(text)
        kwargs = {}
        for key in ("omega_a", "omega_b"):
            if key in obj:
                kwargs[key] = tuple(obj[key])
        return cls(
            asn=tuple(obj["asn"]),
            cst_a=np.asarray(obj["cst_a"], dtype=np.float64).reshape(3, 3),
            cst_b=np.asarray(obj["cst_b"], dtype=np.float64).reshape(3, 3),
            scene_id=str(obj.get("scene_id", "")),
            **kwargs,
        )

    def __eq__(self, other):
        if not isinstance(other, ImageMeta):
            return NotImplemented
        return (
            self.asn == other.asn
            and np.array_equal(self.cst_a, other.cst_a)
            and np.array_equal(self.cst_b, other.cst_b)
            and self.scene_id == other.scene_id
            and self.omega_a == other.omega_a
            and self.omega_b == other.omega_b
        )

    __hash__ = None


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".meta.json")


def quantize16(img) -> np.ndarray:
    """Map [0, 1] floats to uint16 with round-half-to-even."""
    return np.rint(np.asarray(img, dtype=np.float64) * 65535.0).astype(np.uint16)


def encode_rawp(img, colorspace=COLORSPACE_RAW) -> bytes:
    img = check_image(img)
    h, w, c = img.shape
    header = _HEADER.pack(MAGIC, VERSION, h, w, c, colorspace)
    planar = np.transpose(quantize16(img), (2, 0, 1))
    return header + planar.astype(">u2").tobytes()


def decode_rawp(data: bytes):
    """Return ``(image, colorspace)`` from RAWP bytes."""
    if len(data) < _HEADER.size:
        raise RawpFormatError("file shorter than the RAWP header")
    magic, version, h, w, c, cs = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RawpFormatError("bad magic, not a RAWP file")
    if version != VERSION:
        raise RawpFormatError(f"unsupported RAWP version {version}")
    if c != 3 or cs not in (COLORSPACE_RAW, COLORSPACE_SRGB) or h < 1 or w < 1:
        raise RawpFormatError("invalid RAWP header fields")
    payload = data[_HEADER.size :]
    if len(payload) != 2 * h * w * c:
        raise CorruptFileError(
            f"payload has {len(payload)} bytes, header implies {2 * h * w * c}"
        )
    planar = np.frombuffer(payload, dtype=">u2").reshape(c, h, w)
    img = np.transpose(planar, (1, 2, 0)).astype(np.float64) / 65535.0
    return img, cs


def save_rawp(img, meta: ImageMeta | None, path, colorspace=COLORSPACE_RAW) -> None:
    path = Path(path)
    path.write_bytes(encode_rawp(img, colorspace))
    if meta is not None:
        sidecar_path(path).write_text(meta.to_json())


def load_rawp(path):
    """Load a RAWP image and its ``.meta.json`` sidecar (None if absent)."""
    path = Path(path)
    img, _ = decode_rawp(path.read_bytes())
    side = sidecar_path(path)
    meta = ImageMeta.from_json(side.read_text()) if side.exists() else None
    return img, meta


def rawp_colorspace(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise RawpFormatError("not a RAWP file")
    return _HEADER.unpack(head)[5]


# -- resampling -------------------------------------------------------------
def downsample_bilinear(img, factor: int) -> np.ndarray:
    """Box-average reduction by an integer factor (aligned bilinear)."""
    img = np.asarray(img, dtype=np.float64)
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} is not divisible by factor {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def downsample_adjoint(grad, factor: int) -> np.ndarray:
    """Transpose of :func:`downsample_bilinear` (spreads each value over its block)."""
    g = np.asarray(grad, dtype=np.float64) / (factor * factor)
    return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1)


def _interp_weights(n_in, factor):
    # Pixel-centre aligned sampling with edge clamping.
    pos = (np.arange(n_in * factor) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_in - 2, 0))
    frac = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def upsample_bilinear(img, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor with clamped edges."""
    img = np.asarray(img, dtype=np.float64)
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    r0, r1, fr = _interp_weights(h, factor)
    c0, c1, fc = _interp_weights(w, factor)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    rows = img[r0] * (1 - fr) + img[r1] * fr
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def crop_side(patch_pixels: int) -> int:
    return max(1, int(round(np.sqrt(patch_pixels))))


def crop_random_patch(img, patch_pixels: int, rng, align: int = 1):
    """Random square crop of ``round(sqrt(patch_pixels))`` pixels per side.

    Returns ``(patch, (top, left))``. With ``align > 1`` the corner is snapped
    to multiples of ``align`` so that downsampled metadata stays registered.
    """
    rng = check_random_state(rng)
    h, w = np.shape(img)[:2]
    side = crop_side(patch_pixels)
    if side > h or side > w:
        raise ValueError(f"a {side}x{side} patch does not fit in a {h}x{w} image")
    top = int(rng.integers(0, (h - side) // align + 1)) * align
    left = int(rng.integers(0, (w - side) // align + 1)) * align
    return np.asarray(img)[top : top + side, left : left + side], (top, left)
