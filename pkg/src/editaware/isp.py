"""Differentiable, tunable software ISP.

Rendering is ``z = tone(color(white_balance(exposure(x))))``:

* exposure multiplies by ``2**epsilon``;
* white balance divides R and B by the illuminant chromaticity and applies
  an illuminant-dependent camera-to-XYZ matrix;
* colour applies one of K frozen MLP approximations of a 3-D LUT;
* tone applies the frozen tone-curve MLP, a monotone polynomial, the
  XYZ-to-linear-sRGB matrix and a 1/2.2 gamma.

The only clamps are at the MLP inputs (to their fitted domain [0, 1]) and
a single clamp to ``[delta, 1]`` right before the gamma. Gradients with
respect to the input RAW are computed from a ``RenderTape``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from ._validation import check_image
from .imagecore import ImageMeta
from .mlp import MLPTape, MlpWeights

GAMMA = 2.2
DELTA = 1e-6

# CIE XYZ -> linear sRGB, D65 white (IEC 61966-2-1 primaries):
#   [[ 3.2404542, -1.5371385, -0.4985314],
#    [-0.9692660,  1.8760108,  0.0415560],
#    [ 0.0556434, -0.2040259,  1.0572252]]
XYZ_TO_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB.setflags(write=False)
SRGB_TO_XYZ.setflags(write=False)

GRID_POINTS = 1024
MIN_OMEGA = 1e-6


class StaleTapeError(RuntimeError):
    """A tape was used with an ISP or gradient it was not recorded for."""


@dataclass(frozen=True)
class EditParams:
    """One ISP configuration: exposure (stops), illuminant [r/g, b/g],
    1-based LUT index and the tone polynomial in ascending power basis."""

    epsilon: float
    omega: tuple
    rho: int
    tone_poly: tuple = (0.0, 1.0)

    def __post_init__(self):
        eps = float(self.epsilon)
        if not np.isfinite(eps):
            raise ValueError("epsilon must be finite")
        object.__setattr__(self, "epsilon", eps)
        omega = tuple(float(v) for v in self.omega)
        if len(omega) != 2 or not all(np.isfinite(omega)) or min(omega) <= 0:
            raise ValueError("omega must be two positive numbers")
        object.__setattr__(self, "omega", omega)
        if int(self.rho) != self.rho or self.rho < 1:
            raise ValueError("rho must be an integer >= 1")
        object.__setattr__(self, "rho", int(self.rho))
        coef = tuple(float(c) for c in self.tone_poly)
        object.__setattr__(self, "tone_poly", coef)
        check_tone_poly(coef)

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "omega": list(self.omega),
            "rho": self.rho,
            "tone_poly": list(self.tone_poly),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["epsilon"], tuple(d["omega"]), d["rho"], tuple(d.get("tone_poly", (0.0, 1.0))))


def check_tone_poly(coef, atol=1e-9):
    """Raise unless ``coef`` is non-decreasing on [0, 1] with S(0)=0, S(1)=1."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim != 1 or coef.size < 2 or not np.all(np.isfinite(coef)):
        raise ValueError("tone polynomial needs at least two finite coefficients")
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    vals = P.polyval(grid, coef)
    if abs(vals[0]) > atol or abs(vals[-1] - 1.0) > atol:
        raise ValueError("tone polynomial must satisfy S(0)=0 and S(1)=1")
    if np.any(np.diff(vals) < -atol):
        raise ValueError("tone polynomial must be non-decreasing on [0, 1]")


# -- individual stages ---------------------------------------------------------
def exposure_forward(p0, epsilon):
    if not np.isfinite(epsilon):
        raise ValueError("epsilon must be finite")
    return np.asarray(p0, dtype=np.float64) * 2.0**epsilon


def cst_interpolate(omega, meta: ImageMeta) -> np.ndarray:
    """Blend the two calibration CSTs by relative chromaticity distance."""
    omega = np.asarray(omega, dtype=np.float64)
    da = np.linalg.norm(omega - np.asarray(meta.omega_a))
    db = np.linalg.norm(omega - np.asarray(meta.omega_b))
    if da + db == 0.0:
        return np.array(meta.cst_a)
    alpha = min(max(da / (da + db), 0.0), 1.0)
    if alpha == 0.0:
        return np.array(meta.cst_a)
    if alpha == 1.0:
        return np.array(meta.cst_b)
    return (1.0 - alpha) * meta.cst_a + alpha * meta.cst_b


def white_balance_matrix(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (2,) or np.any(omega < MIN_OMEGA):
        raise ValueError(f"degenerate illuminant {omega}")
    return np.diag([1.0 / omega[0], 1.0, 1.0 / omega[1]])


def wb_cst_matrix(omega, meta: ImageMeta) -> np.ndarray:
    return cst_interpolate(omega, meta) @ white_balance_matrix(omega)


def whitebalance_forward(p1, omega, meta: ImageMeta):
    m = wb_cst_matrix(omega, meta)
    return np.asarray(p1, dtype=np.float64) @ m.T


def _pointwise(mlp: MlpWeights, img, tape=None):
    """Evaluate a per-pixel MLP on an (..., C) array."""
    flat = img.reshape(-1, mlp.n_in)
    return mlp.forward(flat, tape).reshape(img.shape[:-1] + (mlp.n_out,))


def color_forward(p2, rho, luts):
    if luts is None or len(luts) == 0:
        raise RuntimeError("colour MLP weights are not loaded")
    if not 1 <= rho <= len(luts):
        raise ValueError(f"LUT index {rho} outside 1..{len(luts)}")
    return _pointwise(luts[rho - 1], np.clip(p2, 0.0, 1.0))


def tone_forward(p3, tone_poly, tone_mlp: MlpWeights, T=XYZ_TO_SRGB, delta=DELTA):
    r = np.clip(np.asarray(p3, dtype=np.float64), 0.0, 1.0)
    u = _pointwise(tone_mlp, r[..., None])[..., 0]
    v = P.polyval(u, np.asarray(tone_poly, dtype=np.float64))
    w = v @ np.asarray(T).T
    return np.clip(w, delta, 1.0) ** (1.0 / GAMMA)


# -- full pipeline ----------------------------------------------------------------
_tape_ids = itertools.count(1)


@dataclass
class RenderTape:
    """Intermediates of one forward render, consumed by ``EditISP.backward``."""

    isp_token: int
    shape: tuple
    gain: float
    mix: np.ndarray  # C_omega @ W_omega
    p2: np.ndarray
    color_tape: MLPTape
    color_index: int
    p3: np.ndarray
    tone_tape: MLPTape
    u: np.ndarray
    tone_poly: np.ndarray
    w: np.ndarray
    z: np.ndarray
    delta: float
    extras: dict = field(default_factory=dict)


class EditISP:
    """Renderer ``g_phi`` holding the frozen colour and tone MLPs.

    Parameters
    ----------
    color_mlps : list of MlpWeights
        The K colour approximators; ``EditParams.rho`` indexes them from 1.
    tone_mlp : MlpWeights
        1-in/1-out approximation of the base tone curve.
    xyz_to_rgb : (3, 3) array
        Output matrix, the D65 XYZ-to-linear-sRGB matrix unless overridden.
    """

    def __init__(self, color_mlps, tone_mlp, xyz_to_rgb=XYZ_TO_SRGB, delta=DELTA):
        self.color_mlps = list(color_mlps)
        self.tone_mlp = tone_mlp
        self.T = np.array(xyz_to_rgb, dtype=np.float64)
        self.delta = float(delta)
        self._token = next(_tape_ids)
        for m in self.color_mlps:
            if (m.n_in, m.n_out) != (3, 3):
                raise ValueError("colour MLPs must map 3 -> 3")
        if (tone_mlp.n_in, tone_mlp.n_out) != (1, 1):
            raise ValueError("tone MLP must map 1 -> 1")

    @property
    def n_luts(self) -> int:
        return len(self.color_mlps)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for m in self.color_mlps + [self.tone_mlp]:
            h.update(m.to_bytes())
        return h.hexdigest()

    def forward(self, x, phi: EditParams, meta: ImageMeta, allow_out_of_range=True):
        """Render ``x`` and return ``(z, tape)``."""
        x = check_image(x, "x", allow_out_of_range=allow_out_of_range)
        if not 1 <= phi.rho <= self.n_luts:
            raise ValueError(f"LUT index {phi.rho} outside 1..{self.n_luts}")
        gain = 2.0**phi.epsilon
        mix = wb_cst_matrix(phi.omega, meta)
        p2 = (x * gain) @ mix.T
        color = self.color_mlps[phi.rho - 1]
        ctape = MLPTape()
        p3 = color.forward(np.clip(p2, 0.0, 1.0).reshape(-1, 3), ctape).reshape(x.shape)
        ttape = MLPTape()
        u = self.tone_mlp.forward(np.clip(p3, 0.0, 1.0).reshape(-1, 1), ttape).reshape(x.shape)
        coef = np.asarray(phi.tone_poly)
        v = P.polyval(u, coef)
        w = v @ self.T.T
        z = np.clip(w, self.delta, 1.0) ** (1.0 / GAMMA)
        tape = RenderTape(
            self._token, x.shape, gain, mix, p2, ctape, phi.rho, p3, ttape, u, coef, w, z,
            self.delta,
        )
        return z, tape

    def render(self, x, phi: EditParams, meta: ImageMeta):
        return self.forward(x, phi, meta)[0]

    __call__ = render

    def backward(self, tape: RenderTape, grad_z) -> np.ndarray:
        """Vector-Jacobian product: dL/dx given dL/dz."""
        grad_z = np.asarray(grad_z, dtype=np.float64)
        if tape.isp_token != self._token:
            raise StaleTapeError("tape was recorded by a different ISP instance")
        if grad_z.shape != tape.shape:
            raise StaleTapeError(f"gradient shape {grad_z.shape} does not match tape {tape.shape}")
        w = tape.w
        inside = (w > tape.delta) & (w < 1.0)
        # d/dw w^(1/g) = z / (g w) on the unclamped set
        gw = np.where(inside, grad_z * tape.z / (GAMMA * np.where(inside, w, 1.0)), 0.0)
        gv = gw @ self.T
        gu = gv * P.polyval(tape.u, P.polyder(tape.tone_poly))
        gr = self.tone_mlp.backward_input(tape.tone_tape, gu.reshape(-1, 1)).reshape(tape.shape)
        p3 = tape.p3
        gp3 = np.where((p3 >= 0.0) & (p3 <= 1.0), gr, 0.0)
        color = self.color_mlps[tape.color_index - 1]
        gq = color.backward_input(tape.color_tape, gp3.reshape(-1, 3)).reshape(tape.shape)
        p2 = tape.p2
        gp2 = np.where((p2 >= 0.0) & (p2 <= 1.0), gq, 0.0)
        return (gp2 @ tape.mix) * tape.gain


def boundary_distance(tape: RenderTape) -> np.ndarray:
    """Per-pixel distance of the recorded intermediates to the nearest clamp edge.

    Used to select pixels for finite-difference checks.
    """
    d2 = np.minimum(np.abs(tape.p2), np.abs(tape.p2 - 1.0))
    d3 = np.minimum(np.abs(tape.p3), np.abs(tape.p3 - 1.0))
    dw = np.minimum(np.abs(tape.w - tape.delta), np.abs(tape.w - 1.0))
    return np.minimum(np.minimum(d2, d3), dw).min(axis=-1)
