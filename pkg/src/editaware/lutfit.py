"""Reference colour/tone LUTs and the MLP approximators fitted to them.

A LUT is not differentiable, so each one is replaced by a small tanh MLP
fitted offline (``LutMLPRegressor``); the fitted weights are then frozen
and used inside the differentiable ISP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_random_state
from .mlp import MLPTape, MlpWeights

COLOR_TOLERANCE = 2.0 / 255.0
TONE_TOLERANCE = 1.0 / 255.0
# early stopping aims below the tolerance: the check set is smaller than the held-out set
STOP_MARGIN = 0.9
DEFAULT_HIDDEN = (64, 64)
HELDOUT_POINTS = 100_000
# (fraction of the budget, power of the mean error): squared error first,
# then higher even powers that act as smooth surrogates of the max error
DEFAULT_SCHEDULE = ((0.0, 2), (0.3, 4), (0.65, 8))

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class Lut3D:
    """Lattice-sampled colour transform; ``table[r, g, b]`` is the output RGB."""

    table: np.ndarray
    name: str = ""

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 4 or t.shape[-1] != 3 or not (t.shape[0] == t.shape[1] == t.shape[2]):
            raise ValueError("Lut3D table must have shape (L, L, L, 3)")
        if t.shape[0] < 2:
            raise ValueError("lattice needs at least 2 nodes per axis")
        if not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("Lut3D entries must be finite and in [0, 1]")
        self.table = t

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @classmethod
    def from_function(cls, fn, size=17, name=""):
        axis = np.linspace(0.0, 1.0, size)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        out = fn(grid.reshape(-1, 3)).reshape(size, size, size, 3)
        return cls(np.clip(out, 0.0, 1.0), name=name)

    @classmethod
    def identity(cls, size=17):
        return cls.from_function(lambda p: p, size, name="identity")

    def to_json(self) -> str:
        return json.dumps(
            {"lattice_size": self.size, "name": self.name, "table": self.table.ravel().tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "Lut3D":
        obj = json.loads(text)
        n = int(obj["lattice_size"])
        return cls(np.asarray(obj["table"], dtype=np.float64).reshape(n, n, n, 3), obj.get("name", ""))


@dataclass
class Lut1D:
    """Monotone tone curve tabulated at uniformly spaced knots on [0, 1]."""

    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("Lut1D needs a 1-D array of at least 2 knots")
        if np.any(np.diff(v) < 0):
            raise ValueError("Lut1D values must be non-decreasing")
        self.values = v


def trilinear_lookup(lut: Lut3D, rgb) -> np.ndarray:
    """Trilinear interpolation of ``lut`` at points ``rgb`` of shape (..., 3).

    Queries outside the unit cube are clamped onto it.
    """
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    shape = rgb.shape
    p = rgb.reshape(-1, 3) * (lut.size - 1)
    i0 = np.minimum(np.floor(p).astype(np.intp), lut.size - 2)
    f = p - i0
    t = lut.table
    r, g, b = i0[:, 0], i0[:, 1], i0[:, 2]
    fr, fg, fb = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    c00 = t[r, g, b] * (1 - fr) + t[r + 1, g, b] * fr
    c01 = t[r, g, b + 1] * (1 - fr) + t[r + 1, g, b + 1] * fr
    c10 = t[r, g + 1, b] * (1 - fr) + t[r + 1, g + 1, b] * fr
    c11 = t[r, g + 1, b + 1] * (1 - fr) + t[r + 1, g + 1, b + 1] * fr
    c0 = c00 * (1 - fg) + c10 * fg
    c1 = c01 * (1 - fg) + c11 * fg
    return (c0 * (1 - fb) + c1 * fb).reshape(shape)


def linear_lookup_1d(lut: Lut1D, u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    n = lut.values.size
    p = u * (n - 1)
    i0 = np.minimum(np.floor(p).astype(np.intp), n - 2)
    f = p - i0
    return lut.values[i0] * (1 - f) + lut.values[i0 + 1] * f


# -- stylisation primitives ---------------------------------------------------
def _luma(rgb):
    return (rgb @ LUMA)[:, None]


def adjust_gamma(rgb, gammas, toe=0.05):
    """Per-channel power curve with a shifted toe so the slope at 0 is finite."""
    g = np.asarray(gammas, dtype=np.float64)
    c = np.clip(rgb, 0.0, 1.0)
    lo = toe**g
    return ((c + toe) ** g - lo) / ((1.0 + toe) ** g - lo)


def adjust_contrast(rgb, amount):
    """Blend each channel towards smoothstep; negative amounts flatten."""
    c = np.clip(rgb, 0.0, 1.0)
    return c + amount * (c * c * (3.0 - 2.0 * c) - c)


def adjust_saturation(rgb, scale):
    y = _luma(rgb)
    return y + scale * (rgb - y)


def rotate_hue(rgb, degrees):
    """Rodrigues rotation of RGB about the grey axis."""
    th = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(th) * kx + (1 - np.cos(th)) * kx @ kx
    return rgb @ rot.T


def split_tone(rgb, shadow_tint, highlight_tint):
    y = _luma(rgb)
    return rgb + (1 - y) ** 2 * np.asarray(shadow_tint) + y**2 * np.asarray(highlight_tint)


def soft_clip(v, knee=0.25):
    """Identity on [knee, 1 - knee], tanh roll-off into (0, 1) outside (C2 joins)."""
    v = np.asarray(v, dtype=np.float64)
    hi = 1.0 - knee
    out = np.where(v > hi, hi + knee * np.tanh((v - hi) / knee), v)
    return np.where(v < knee, knee - knee * np.tanh((knee - v) / knee), out)


@dataclass(frozen=True)
class LutStyle:
    """Parameters of one composed stylisation; applied in declaration order."""

    name: str
    gamma: tuple = (1.0, 1.0, 1.0)
    contrast: float = 0.0
    saturation: float = 1.0
    hue: float = 0.0
    shadow_tint: tuple = (0.0, 0.0, 0.0)
    highlight_tint: tuple = (0.0, 0.0, 0.0)

    def __call__(self, rgb):
        out = adjust_gamma(rgb, self.gamma)
        out = adjust_contrast(out, self.contrast)
        out = adjust_saturation(out, self.saturation)
        out = rotate_hue(out, self.hue)
        out = split_tone(out, self.shadow_tint, self.highlight_tint)
        if self.name == "identity":
            return np.clip(out, 0.0, 1.0)
        return soft_clip(out)


# Indices are 1-based in EditParams; slot 1 is always identity.
NAMED_STYLES = (
    LutStyle("identity"),
    LutStyle("mild-contrast", contrast=0.3, saturation=1.05),
    LutStyle("vivid", gamma=(0.92, 0.92, 0.92), contrast=0.1, saturation=1.3),
    LutStyle(
        "flat-green",
        contrast=-0.35,
        saturation=0.8,
        shadow_tint=(-0.01, 0.04, -0.01),
        highlight_tint=(-0.02, 0.02, -0.03),
    ),
    LutStyle(
        "warm-contrast",
        contrast=0.35,
        saturation=1.1,
        shadow_tint=(0.02, 0.0, -0.02),
        highlight_tint=(0.04, 0.01, -0.05),
    ),
    LutStyle(
        "cool-matte",
        contrast=-0.25,
        saturation=0.85,
        shadow_tint=(0.02, 0.04, 0.07),
        highlight_tint=(-0.04, -0.01, 0.02),
    ),
)
LUT_INDEX = {s.name: i + 1 for i, s in enumerate(NAMED_STYLES)}


def random_style(rng, name) -> LutStyle:
    return LutStyle(
        name,
        gamma=tuple(rng.uniform(0.7, 1.4, size=3)),
        contrast=float(rng.uniform(-0.3, 0.4)),
        saturation=float(rng.uniform(0.6, 1.4)),
        hue=float(rng.uniform(-25.0, 25.0)),
        shadow_tint=tuple(rng.uniform(-0.04, 0.04, size=3)),
        highlight_tint=tuple(rng.uniform(-0.04, 0.04, size=3)),
    )


def builtin_styles(k, seed=0) -> list[LutStyle]:
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    styles = list(NAMED_STYLES[:k])
    for i in range(len(styles), k):
        styles.append(random_style(rng, f"random-{i + 1}"))
    return styles


def generate_builtin_luts(k, seed=0, size=33) -> list[Lut3D]:
    """``k`` deterministic stylisation LUTs; index 1 is the identity."""
    return [Lut3D.from_function(s, size, name=s.name) for s in builtin_styles(k, seed)]


def default_tone_curve(n=256) -> Lut1D:
    """Half-strength smoothstep S-curve standing in for a camera tone curve."""
    u = np.linspace(0.0, 1.0, n)
    return Lut1D(0.5 * u + 0.5 * u * u * (3.0 - 2.0 * u), name="default")


# -- fitting ------------------------------------------------------------------
@dataclass
class FitReport:
    max_error: float
    mean_error: float
    tolerance: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)

    def as_dict(self):
        return {
            "max_error": self.max_error,
            "mean_error": self.mean_error,
            "tolerance": self.tolerance,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _unit_cube_samples(rng, n, dim):
    """Uniform samples with a share snapped onto faces, where fits are weakest."""
    pts = rng.uniform(size=(n, dim))
    if dim > 1:
        # a fifth on faces, a tenth on edges
        n_face, n_edge = n // 5, n // 10
        axis = rng.integers(0, dim, size=n_face + n_edge)
        rows = np.arange(n_face + n_edge)
        pts[rows, axis] = rng.integers(0, 2, size=rows.size)
        axis2 = (axis[n_face:] + rng.integers(1, dim, size=n_edge)) % dim
        pts[rows[n_face:], axis2] = rng.integers(0, 2, size=n_edge)
    return pts


class LutMLPRegressor(RegressorMixin, BaseEstimator):
    """Tanh MLP fitted by full-batch L-BFGS.

    The objective follows ``schedule``: mean squared error, then p-norms of
    the residual with growing even p, which pull the worst points down.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths.
    max_iter : int
        Total L-BFGS iteration budget.
    chunk : int
        Iterations between held-out error checks; fitting stops as soon as
        the max-abs error on the check set is within ``tol``.
    tol : float or None
        Target max-abs error per output channel.
    schedule : tuple of (fraction, power)
        Budget fraction at which each objective power takes over.
    random_state : int or Generator
    """

    def __init__(
        self, hidden=DEFAULT_HIDDEN, max_iter=6000, chunk=500, tol=None, schedule=DEFAULT_SCHEDULE,
        random_state=0,
    ):
        self.hidden = hidden
        self.max_iter = max_iter
        self.chunk = chunk
        self.tol = tol
        self.schedule = schedule
        self.random_state = random_state

    def fit(self, X, y, X_check=None, y_check=None):
        X = check_points(X)
        y = check_points(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different numbers of samples")
        rng = check_random_state(self.random_state)
        mlp = MlpWeights.init(X.shape[1], tuple(self.hidden), y.shape[1], rng)
        # centre the unit-interval inputs on [-1, 1] inside the first layer
        first = mlp.layers[0]
        first.bias = first.bias - first.weight.sum(axis=0)
        first.weight = 2.0 * first.weight
        n = X.shape[0]

        def objective(theta, power):
            mlp.set_flat(theta)
            tape = MLPTape()
            resid = mlp.forward(X, tape) - y
            m = float(np.mean(resid**power))
            dm = power * resid ** (power - 1) / resid.size
            if power == 2:
                return m, mlp.backward_params(tape, dm)
            # p-th root keeps the objective on the scale of the errors themselves
            root = m ** (1.0 / power)
            scale = root / (power * m) if m > 0 else 0.0
            return root, mlp.backward_params(tape, scale * dm)

        theta = mlp.get_flat()
        done = 0
        history = []
        self.converged_ = False
        while done < self.max_iter:
            step = min(self.chunk, self.max_iter - done)
            power = self._power(done)
            # never let a chunk straddle a change of objective
            nxt = [f * self.max_iter for f, _ in self.schedule if f * self.max_iter > done]
            if nxt:
                step = max(1, min(step, int(np.ceil(nxt[0] - done))))
            res = minimize(
                objective, theta, args=(power,), jac=True, method="L-BFGS-B",
                options={"maxiter": step, "maxcor": 30, "gtol": 0.0, "ftol": 0.0},
            )
            theta = res.x
            done += max(int(res.nit), 1)
            mlp.set_flat(theta)
            if X_check is not None and self.tol is not None:
                err = np.abs(mlp.forward(X_check) - y_check).max()
                history.append((done, float(err)))
                if err <= self.tol:
                    self.converged_ = True
                    break
            if res.nit < step and power == self.schedule[-1][1]:
                break
        self.weights_ = mlp
        self.n_iter_ = done
        self.history_ = history
        self.n_samples_ = n
        return self

    def _power(self, done):
        power = self.schedule[0][1]
        for start, p in self.schedule:
            if done >= start * self.max_iter:
                power = p
        return power

    def predict(self, X):
        check_is_fitted(self, "weights_")
        return self.weights_.forward(check_points(X))


def _fit_pointwise(target_fn, dim, hidden, budget, rng, tol, n_train):
    rng = check_random_state(rng)
    X = _unit_cube_samples(rng, n_train, dim)
    X_check = _unit_cube_samples(rng, 20_000, dim)
    heldout = rng.uniform(size=(HELDOUT_POINTS, dim))
    reg = LutMLPRegressor(hidden=hidden, max_iter=budget, tol=STOP_MARGIN * tol, random_state=rng)
    reg.fit(X, target_fn(X), X_check, target_fn(X_check))
    err = np.abs(reg.predict(heldout) - target_fn(heldout))
    report = FitReport(
        max_error=float(err.max()),
        mean_error=float(err.mean()),
        tolerance=tol,
        iterations=reg.n_iter_,
        converged=bool(err.max() <= tol),
        history=reg.history_,
    )
    return reg.weights_, report


def fit_mlp_to_lut3d(lut: Lut3D, hidden=DEFAULT_HIDDEN, budget=8000, rng=0, n_train=5000):
    """Fit a 3-in/3-out MLP to ``trilinear_lookup(lut, .)`` on the unit cube.

    The returned report's ``converged`` flag says whether the max-abs error
    on a fresh held-out set of 1e5 points is within 2/255; callers decide
    what to do with a failed fit.
    """
    return _fit_pointwise(
        lambda p: trilinear_lookup(lut, p), 3, hidden, budget, rng, COLOR_TOLERANCE, n_train
    )


def fit_mlp_to_tonecurve(curve: Lut1D, hidden=(16, 16), budget=3000, rng=0, n_train=2000):
    """1-D analogue of :func:`fit_mlp_to_lut3d` with a 1/255 tolerance."""
    return _fit_pointwise(
        lambda u: linear_lookup_1d(curve, u), 1, hidden, budget, rng, TONE_TOLERANCE, n_train
    )


def save_lut(lut: Lut3D, path) -> None:
    Path(path).write_text(lut.to_json())


def load_lut(path) -> Lut3D:
    return Lut3D.from_json(Path(path).read_text())
