"""Central finite-difference checks of every hand-written gradient.

Each suite draws random cases, compares the analytic gradient with
``(f(t + h) - f(t - h)) / 2h`` at ``h = 1e-5`` on coordinates away from
clamp boundaries, and reports the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_random_state
from .imagecore import ImageMeta, downsample_bilinear
from .isp import EditISP, EditParams, boundary_distance
from .losses import l_ft_masked, l_raw, l_srgb, l_srgb_ft_downsampled, l_total
from .sampling import sample_tone_polynomial, SamplerConfig
from .unet import ModelConfig, UNet

H = 1e-5
ISP_TOL = 1e-4
MODEL_TOL = 1e-3
# coordinates closer than this to a clamp edge are skipped
MARGIN = 1e-3


@dataclass
class SuiteResult:
    name: str
    cases: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<10} cases={self.cases:<4} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} {status}"


def rel_error(fd, an, floor=1e-8):
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def central_difference(f, arr, idx, h=H):
    v = arr[idx]
    arr[idx] = v + h
    up = f()
    arr[idx] = v - h
    down = f()
    arr[idx] = v
    return (up - down) / (2 * h)


def random_meta(rng) -> ImageMeta:
    asn = tuple(rng.uniform(0.6, 1.6, 2))
    return ImageMeta(asn, np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)),
                     np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)))


def random_params(rng, meta, n_luts) -> EditParams:
    omega = tuple(np.asarray(meta.asn) + rng.uniform(-0.1, 0.1, 2))
    tone = sample_tone_polynomial(SamplerConfig(), rng)
    return EditParams(float(rng.uniform(-1, 1)), omega, int(rng.integers(1, n_luts + 1)), tone)


def _pick(rng, mask, count):
    """Random indices of ``True`` entries of ``mask``."""
    idx = np.argwhere(mask)
    if len(idx) == 0:
        return []
    sel = rng.choice(len(idx), size=min(count, len(idx)), replace=False)
    return [tuple(idx[i]) for i in sel]


def _safe_pixels(isp, x, phi, meta):
    _, tape = isp.forward(x, phi, meta)
    return boundary_distance(tape) > MARGIN


def check_isp(isp: EditISP, n_cases=100, rng=0, tamper=None) -> SuiteResult:
    rng = check_random_state(rng)
    worst, done = 0.0, 0
    while done < n_cases:
        meta = random_meta(rng)
        phi = random_params(rng, meta, isp.n_luts)
        x = rng.uniform(0.02, 0.6, (4, 4, 3))
        g = rng.normal(size=x.shape)
        z, tape = isp.forward(x, phi, meta)
        an = isp.backward(tape, g)
        if tamper is not None:
            an = tamper(an)
        safe = _safe_pixels(isp, x, phi, meta)
        for (i, j) in _pick(rng, safe, 1):
            c = int(rng.integers(3))
            fd = central_difference(lambda: float(np.sum(isp.render(x, phi, meta) * g)), x, (i, j, c))
            worst = max(worst, rel_error(fd, an[i, j, c]))
            done += 1
    return SuiteResult("isp", done, worst, ISP_TOL)


def check_losses(isp: EditISP, n_cases=100, rng=0, tamper=None) -> SuiteResult:
    """Cycles through all five losses; gradients are w.r.t. the reconstruction."""
    rng = check_random_state(rng)
    worst, done, k = 0.0, 0, 0
    while done < n_cases:
        meta = random_meta(rng)
        phi = random_params(rng, meta, isp.n_luts)
        x = rng.uniform(0.02, 0.6, (8, 8, 3))
        xhat = np.clip(x + rng.normal(0, 0.03, x.shape), 0.0, 1.0)
        kind = k % 5
        k += 1
        if kind == 0:
            fn = lambda: l_raw(x, xhat)
        elif kind == 1:
            fn = lambda: l_srgb(x, xhat, phi, meta, isp)
        elif kind == 2:
            fn = lambda: l_total(x, xhat, phi, meta, isp, lam=2.0)
        elif kind == 3:
            x_d = downsample_bilinear(x, 2)
            fn = lambda: l_srgb_ft_downsampled(x_d, xhat, 2, phi, meta, isp)
        else:
            mask = (rng.uniform(size=(8, 8)) < 0.5).astype(float)
            mask[0, 0] = 1.0
            fn = lambda: l_ft_masked(x, xhat, mask, phi, meta, isp, lam=1.5)
        an = fn().grad
        if tamper is not None:
            an = tamper(an)
        if kind == 3:
            safe = np.repeat(np.repeat(
                _safe_pixels(isp, downsample_bilinear(xhat, 2), phi, meta), 2, 0), 2, 1)
        else:
            safe = _safe_pixels(isp, xhat, phi, meta)
        if kind == 4:
            safe &= mask > 0
        for (i, j) in _pick(rng, safe, 1):
            c = int(rng.integers(3))
            fd = central_difference(lambda: fn().value, xhat, (i, j, c))
            worst = max(worst, rel_error(fd, an[i, j, c]))
            done += 1
    return SuiteResult("losses", done, worst, ISP_TOL)


def check_model(n_cases=100, rng=0, tamper=None, config=None) -> SuiteResult:
    """Random weight coordinates of a small UNet on a 16x16 input."""
    rng = check_random_state(rng)
    cfg = config or ModelConfig(base_filters=4, depth=2, patch_side=16, batch_size=1)
    net = UNet.init(cfg, rng)
    for p in net.params[1::2]:
        p[:] = rng.normal(0.0, 0.1, p.shape)
    srgb = rng.uniform(size=(1, 16, 16, 3))
    meta_up = rng.uniform(size=(1, 16, 16, 3))
    g = rng.normal(size=(1, 16, 16, 3))
    out, tape = net.forward(srgb, meta_up)
    grads = net.backward(tape, g)
    if tamper is not None:
        grads = [tamper(gr) for gr in grads]
    f = lambda: float(np.sum(net.forward(srgb, meta_up)[0] * g))
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(len(net.params)))
        p = net.params[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = central_difference(f, p, idx)
        worst = max(worst, rel_error(fd, grads[k][idx]))
    return SuiteResult("model", n_cases, worst, MODEL_TOL)


def run_all(isp: EditISP, n_cases=100, rng=0, tamper=None) -> list[SuiteResult]:
    rng = check_random_state(rng)
    return [
        check_isp(isp, n_cases, rng, tamper),
        check_losses(isp, n_cases, rng, tamper),
        check_model(n_cases, rng, tamper),
    ]
