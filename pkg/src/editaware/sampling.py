"""Random ISP configurations for the edit-aware loss.

Exposure is Gaussian in stops, the illuminant is drawn from a Gaussian
fitted to a dictionary of as-shot neutrals (restricted to the dictionary's
convex hull and to a neighbourhood of the image's own neutral), the LUT
index is uniform, and the tone perturbation is a random monotone
polynomial.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.spatial import ConvexHull, QhullError
from scipy.special import comb
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_random_state
from .isp import EditParams

MAX_REJECTIONS = 1000
CAMERA_DEFAULT_LUT = 2
IDENTITY_TONE = (0.0, 1.0)
MODULES = ("exposure", "white_balance", "color", "tone")


class DictionaryError(ValueError):
    """Illuminant dictionary cannot support a 2-D Gaussian / hull."""


@dataclass
class IlluminantDictionary:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[1] != 2:
            raise DictionaryError("dictionary entries must be [r/g, b/g] pairs")
        if len(e) < 3:
            raise DictionaryError("dictionary needs at least 3 entries")
        if np.any(e <= 0) or not np.all(np.isfinite(e)):
            raise DictionaryError("dictionary entries must be positive")
        self.entries = e

    def __len__(self):
        return len(self.entries)

    def save(self, path):
        Path(path).write_text(json.dumps(self.entries.tolist()))

    @classmethod
    def load(cls, path):
        return cls(np.asarray(json.loads(Path(path).read_text()), dtype=np.float64))


@dataclass
class GaussianFit:
    mu: np.ndarray
    sigma: np.ndarray


def fit_illuminant_gaussian(dictionary) -> GaussianFit:
    """Mean and population covariance (divisor M) of the chromaticities."""
    e = dictionary.entries if isinstance(dictionary, IlluminantDictionary) else np.asarray(dictionary, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != 2 or len(e) == 0:
        raise DictionaryError("cannot fit a Gaussian to this dictionary")
    mu = e.mean(axis=0)
    d = e - mu
    return GaussianFit(mu=mu, sigma=d.T @ d / len(e))


@dataclass
class SamplerConfig:
    """Sampling hyper-parameters; ``modules`` lists which stages are randomised.

    Stages left out of ``modules`` stay at the camera default (no exposure
    change, the image's own neutral, LUT 2, identity tone polynomial).
    """

    sigma_ev: float = 0.75
    k_luts: int = 15
    max_poly_degree: int = 5
    wb_threshold: float = 0.15
    seed: int = 0
    modules: tuple = MODULES

    def __post_init__(self):
        if self.sigma_ev <= 0 or self.k_luts < 1 or self.max_poly_degree < 1 or self.wb_threshold <= 0:
            raise ValueError(f"invalid sampler configuration {self}")
        unknown = set(self.modules) - set(MODULES)
        if unknown:
            raise ValueError(f"unknown ISP modules {sorted(unknown)}")
        self.modules = tuple(m for m in MODULES if m in self.modules)

    def to_dict(self):
        d = asdict(self)
        d["modules"] = list(self.modules)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "modules" in d:
            d["modules"] = tuple(d["modules"])
        return cls(**d)


# -- geometry helpers -----------------------------------------------------------
def hull_equations(points) -> np.ndarray:
    try:
        return ConvexHull(np.asarray(points, dtype=np.float64)).equations
    except QhullError as exc:
        raise DictionaryError("dictionary entries are collinear") from exc


def in_hull(equations, point, tol=1e-12) -> bool:
    p = np.asarray(point, dtype=np.float64)
    return bool(np.all(equations[:, :2] @ p + equations[:, 2] <= tol))


# -- individual samplers -------------------------------------------------------
def sample_exposure(cfg: SamplerConfig, rng) -> float:
    return float(check_random_state(rng).normal(0.0, cfg.sigma_ev))


def sample_illuminant(fit: GaussianFit, dictionary, asn, cfg: SamplerConfig, rng, equations=None):
    """Rejection-sample ``N(mu, Sigma)`` inside the hull and near ``asn``.

    Falls back to ``asn`` after ``MAX_REJECTIONS`` failed draws.
    """
    rng = check_random_state(rng)
    asn = np.asarray(asn, dtype=np.float64)
    if asn.shape != (2,) or np.any(asn <= 0):
        raise ValueError("asn must be two positive numbers")
    if equations is None:
        entries = dictionary.entries if isinstance(dictionary, IlluminantDictionary) else dictionary
        equations = hull_equations(entries)
    for _ in range(MAX_REJECTIONS):
        w = rng.multivariate_normal(fit.mu, fit.sigma, method="eigh")
        if np.linalg.norm(w - asn) <= cfg.wb_threshold and in_hull(equations, w) and np.all(w > 0):
            return (float(w[0]), float(w[1]))
    return (float(asn[0]), float(asn[1]))


def sample_lut_index(cfg: SamplerConfig, rng) -> int:
    return int(check_random_state(rng).integers(1, cfg.k_luts + 1))


def monotone_poly_from_bernstein(weights) -> np.ndarray:
    """Power-basis coefficients of ``S(u) = int_0^u q / int_0^1 q``.

    ``q`` is the Bernstein polynomial with the given non-negative weights,
    so ``q >= 0`` on [0, 1] and ``S`` is non-decreasing with S(0)=0, S(1)=1.
    """
    b = np.asarray(weights, dtype=np.float64)
    n = b.size - 1
    q = np.zeros(n + 1)
    for j, bj in enumerate(b):
        # B_{j,n}(t) = C(n,j) t^j (1-t)^(n-j)
        basis = comb(n, j) * P.polymul(np.eye(1, j + 1, j)[0], P.polypow([1.0, -1.0], n - j))
        q[: basis.size] += bj * basis
    s = P.polyint(q)
    total = P.polyval(1.0, s)
    if not total > 0:
        return np.array(IDENTITY_TONE)
    s = s / total
    s[0] = 0.0
    return s


def sample_tone_polynomial(cfg: SamplerConfig, rng) -> tuple:
    rng = check_random_state(rng)
    degree = int(rng.integers(1, cfg.max_poly_degree + 1))
    coef = monotone_poly_from_bernstein(rng.uniform(0.0, 1.0, size=degree))
    # pin S(1)=1 exactly against rounding in the normalisation
    coef[-1] += 1.0 - P.polyval(1.0, coef)
    return tuple(float(c) for c in coef)


def camera_default_params(asn) -> EditParams:
    return EditParams(0.0, tuple(asn), CAMERA_DEFAULT_LUT, IDENTITY_TONE)


def sample_edit_params(fit, dictionary, asn, cfg: SamplerConfig, rng, rho=None, equations=None):
    """Draw one EditParams; ``rho`` overrides the LUT draw (per-mini-batch LUTs)."""
    rng = check_random_state(rng)
    mods = cfg.modules
    eps = sample_exposure(cfg, rng) if "exposure" in mods else 0.0
    if "white_balance" in mods:
        omega = sample_illuminant(fit, dictionary, asn, cfg, rng, equations)
    else:
        omega = tuple(asn)
    if "color" in mods:
        rho = sample_lut_index(cfg, rng) if rho is None else rho
    else:
        rho = CAMERA_DEFAULT_LUT
    tone = sample_tone_polynomial(cfg, rng) if "tone" in mods else IDENTITY_TONE
    return EditParams(eps, omega, rho, tone)


class EditSampler(BaseEstimator):
    """Fits the illuminant model on a dictionary and draws EditParams.

    Parameters mirror :class:`SamplerConfig`. ``fixed=True`` disables all
    sampling and always returns the camera default configuration.
    """

    def __init__(self, sigma_ev=0.75, k_luts=15, max_poly_degree=5, wb_threshold=0.15,
                 modules=MODULES, fixed=False):
        self.sigma_ev = sigma_ev
        self.k_luts = k_luts
        self.max_poly_degree = max_poly_degree
        self.wb_threshold = wb_threshold
        self.modules = modules
        self.fixed = fixed

    @property
    def config(self) -> SamplerConfig:
        return SamplerConfig(self.sigma_ev, self.k_luts, self.max_poly_degree, self.wb_threshold,
                             modules=tuple(self.modules))

    @classmethod
    def from_config(cls, cfg: SamplerConfig, fixed=False):
        return cls(cfg.sigma_ev, cfg.k_luts, cfg.max_poly_degree, cfg.wb_threshold, cfg.modules, fixed)

    def fit(self, X, y=None):
        self.dictionary_ = X if isinstance(X, IlluminantDictionary) else IlluminantDictionary(X)
        self.gaussian_ = fit_illuminant_gaussian(self.dictionary_)
        self.hull_ = hull_equations(self.dictionary_.entries)
        return self

    def sample(self, asn, rng, rho=None) -> EditParams:
        if self.fixed:
            return camera_default_params(asn)
        check_is_fitted(self, "gaussian_")
        return sample_edit_params(self.gaussian_, self.dictionary_, asn, self.config, rng, rho, self.hull_)

    def sample_lut(self, rng) -> int:
        return sample_lut_index(self.config, rng)
