"""Training and fine-tuning objectives, each with its gradient w.r.t. ``xhat``.

All squared errors use mean reduction so that loss weights do not depend
on patch size. Every sRGB-space loss takes a single ``EditParams`` which is
used for both renders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_mask, check_same_shape
from .imagecore import downsample_adjoint, downsample_bilinear


@dataclass
class LossValue:
    value: float
    grad: np.ndarray

    def __add__(self, other):
        return LossValue(self.value + other.value, self.grad + other.grad)

    def scaled(self, weight):
        return LossValue(weight * self.value, weight * self.grad)


def l_raw(x, xhat) -> LossValue:
    check_same_shape(x, xhat, ("x", "xhat"))
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    d = xhat - x
    return LossValue(float(np.mean(d * d)), 2.0 * d / d.size)


def _srgb_term(z, xhat, phi, meta, isp, weights=None, count=None):
    zhat, tape = isp.forward(xhat, phi, meta)
    d = zhat - z
    if weights is None:
        n = d.size
        return LossValue(float(np.sum(d * d) / n), isp.backward(tape, 2.0 * d / n))
    wd = weights * d
    return LossValue(float(np.sum(wd * d) / count), isp.backward(tape, 2.0 * wd / count))


def l_srgb(x, xhat, phi, meta, isp, z=None) -> LossValue:
    """Mean squared error between ``g_phi(x)`` and ``g_phi(xhat)``.

    ``z`` may be passed to reuse a cached render of ``x``.
    """
    check_same_shape(x, xhat, ("x", "xhat"))
    if z is None:
        z = isp.render(x, phi, meta)
    return _srgb_term(z, xhat, phi, meta, isp)


def l_total(x, xhat, phi, meta, isp, lam, include_raw=True, misc=None, z=None) -> LossValue:
    """``l_raw + misc + lam * l_srgb``; ``include_raw=False`` drops the RAW term."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    xhat = np.asarray(xhat, dtype=np.float64)
    total = l_raw(x, xhat) if include_raw else LossValue(0.0, np.zeros_like(xhat))
    if misc is not None:
        total = total + misc
    if lam > 0:
        total = total + l_srgb(x, xhat, phi, meta, isp, z).scaled(lam)
    return total


def l_srgb_ft_downsampled(x_d, xhat, factor, phi, meta, isp, z_d=None) -> LossValue:
    """Fine-tuning loss on the downsampled RAW kept as capture metadata.

    ``xhat`` is reduced by ``factor`` before rendering; the gradient is
    pushed back through the box-average. Pass ``z_d`` to reuse the render
    of ``x_d`` when ``phi`` is fixed.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    x_d = np.asarray(x_d, dtype=np.float64)
    h, w = xhat.shape[:2]
    if h % factor or w % factor or x_d.shape != (h // factor, w // factor, 3):
        raise ValueError(
            f"metadata of shape {x_d.shape} does not match a {h}x{w} output at factor {factor}"
        )
    if z_d is None:
        z_d = isp.render(x_d, phi, meta)
    xhat_d = downsample_bilinear(xhat, factor)
    loss = _srgb_term(z_d, xhat_d, phi, meta, isp)
    return LossValue(loss.value, downsample_adjoint(loss.grad, factor))


def l_ft_masked(x, xhat, mask, phi, meta, isp, lam) -> LossValue:
    """Masked RAW + ``lam`` * masked sRGB loss, each averaged over masked samples."""
    check_same_shape(x, xhat, ("x", "xhat"))
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    m = check_mask(mask, x.shape)[..., None]
    count = float(m.sum()) * x.shape[-1]
    if count == 0:
        raise ValueError("mask selects no pixels")
    d = m * (xhat - x)
    total = LossValue(float(np.sum(d * d) / count), 2.0 * m * d / count)
    if lam > 0:
        z = isp.render(x, phi, meta)
        total = total + _srgb_term(z, xhat, phi, meta, isp, m, count).scaled(lam)
    return total
