"""Metadata-assisted UNet in numpy with hand-written reverse mode.

Input is the sRGB image concatenated with the bilinearly upsampled
low-resolution RAW (6 channels, NHWC). Each level has two 3x3 convolutions
with ELU; downsampling is 2x2 average pooling, upsampling is nearest
neighbour followed by concatenation with the skip. A 1x1 linear head
produces the 3-channel RAW estimate.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .isp import StaleTapeError

LOSS_MODES = ("raw-only", "srgb-only", "combined")


@dataclass
class ModelConfig:
    """Architecture and optimisation settings.

    Defaults are the full-size settings; :meth:`desk_scale` gives the
    CPU-sized variant used for tests and the acceptance runs.
    """

    base_filters: int = 32
    depth: int = 3
    metadata_factor: int = 8
    patch_side: int = 304
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-3
    ft_learning_rate: float = 1e-4
    ft_iterations: int = 100
    ft_patch_pixels: int = 1024
    loss_mode: str = "srgb-only"
    lam: float = 2.0

    def __post_init__(self):
        ints = ("base_filters", "depth", "metadata_factor", "patch_side", "batch_size", "epochs")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ft_patch_pixels < 1 or self.ft_iterations < 0 or self.learning_rate <= 0 or self.ft_learning_rate <= 0:
            raise ValueError("invalid optimiser settings")
        if self.patch_side % self.metadata_factor or self.patch_side % (2**self.depth):
            raise ValueError("patch_side must be divisible by metadata_factor and 2**depth")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @classmethod
    def desk_scale(cls, **overrides):
        base = dict(base_filters=8, patch_side=64, batch_size=8, epochs=12)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- layer primitives ------------------------------------------------------------
def conv3x3(x, w, b):
    """Zero-padded 3x3 convolution, NHWC; ``w`` has shape (Cin*9, Cout)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, c * 9)
    out = cols @ w + b
    return out.reshape(n, h, wd, -1), cols


def conv3x3_backward(g, cols, w, x_shape):
    n, h, wd, c = x_shape
    g2 = g.reshape(-1, g.shape[-1])
    gw = cols.T @ g2
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.T).reshape(n, h, wd, c, 3, 3)
    gxp = np.zeros((n, h + 2, wd + 2, c))
    for i in range(3):
        for j in range(3):
            gxp[:, i : i + h, j : j + wd, :] += gcols[..., i, j]
    return gxp[:, 1:-1, 1:-1, :], gw, gb


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(out):
    # for x <= 0, d/dx expm1(x) = out + 1
    return np.where(out > 0, 1.0, out + 1.0)


def avgpool2(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_backward(g):
    return np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(g):
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# -- the network ---------------------------------------------------------------------
_versions = itertools.count(1)


def layer_plan(base_filters, depth, in_channels=6, out_channels=3):
    """Ordered ``(name, cin, cout)`` for every convolution, head last."""
    f = base_filters
    plan = []
    cin = in_channels
    for lvl in range(depth):
        cout = f * 2**lvl
        plan += [(f"enc{lvl}a", cin, cout), (f"enc{lvl}b", cout, cout)]
        cin = cout
    bott = f * 2**depth
    plan += [("bottom_a", cin, bott), ("bottom_b", bott, bott)]
    cin = bott
    for lvl in reversed(range(depth)):
        cout = f * 2**lvl
        plan += [(f"dec{lvl}a", cin + cout, cout), (f"dec{lvl}b", cout, cout)]
        cin = cout
    plan.append(("head", cin, out_channels))
    return plan


@dataclass
class ModelTape:
    version: int
    input_shape: tuple
    records: dict


class UNet:
    """Weights plus forward/backward. ``params`` is an ordered list of arrays:
    for each conv in :func:`layer_plan` its kernel then its bias."""

    def __init__(self, config: ModelConfig, params=None):
        self.config = config
        self.plan = layer_plan(config.base_filters, config.depth)
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            if [p.shape for p in self.params] != self.param_shapes():
                raise ValueError("parameter shapes do not match the configuration")
        else:
            self.params = [np.zeros(s) for s in self.param_shapes()]
        self.version = next(_versions)

    def param_shapes(self):
        shapes = []
        for name, cin, cout in self.plan:
            k = cin if name == "head" else cin * 9
            shapes += [(k, cout), (cout,)]
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, rng):
        net = cls(config)
        for i, (name, cin, cout) in enumerate(net.plan):
            fan_in = cin if name == "head" else cin * 9
            scale = np.sqrt(1.0 / fan_in) if name == "head" else np.sqrt(2.0 / fan_in)
            net.params[2 * i] = rng.normal(0.0, scale, size=net.params[2 * i].shape)
        return net

    def copy(self):
        return UNet(self.config, [p.copy() for p in self.params])

    def touch(self):
        """Mark weights as modified so older tapes are rejected."""
        self.version = next(_versions)

    def _w(self, name):
        i = [p[0] for p in self.plan].index(name)
        return self.params[2 * i], self.params[2 * i + 1]

    def forward(self, srgb, meta_up):
        srgb = np.asarray(srgb, dtype=np.float64)
        meta_up = np.asarray(meta_up, dtype=np.float64)
        if srgb.ndim == 3:
            srgb, meta_up = srgb[None], meta_up[None]
        if srgb.shape != meta_up.shape or srgb.shape[-1] != 3:
            raise ValueError(f"input shapes differ: {srgb.shape} vs {meta_up.shape}")
        h, w = srgb.shape[1:3]
        if h % 2**self.config.depth or w % 2**self.config.depth:
            raise ValueError(f"spatial size {h}x{w} not divisible by 2**depth")
        x = np.concatenate([srgb, meta_up], axis=-1)
        rec = {}

        def block(name, inp):
            wt, bs = self._w(name)
            pre, cols = conv3x3(inp, wt, bs)
            out = elu(pre)
            rec[name] = (cols, inp.shape, out)
            return out

        skips = []
        h_ = x
        for lvl in range(self.config.depth):
            h_ = block(f"enc{lvl}b", block(f"enc{lvl}a", h_))
            skips.append(h_)
            h_ = avgpool2(h_)
        h_ = block("bottom_b", block("bottom_a", h_))
        for lvl in reversed(range(self.config.depth)):
            h_ = np.concatenate([upsample2(h_), skips[lvl]], axis=-1)
            h_ = block(f"dec{lvl}b", block(f"dec{lvl}a", h_))
        wt, bs = self._w("head")
        rec["head"] = h_
        out = h_ @ wt + bs
        return out, ModelTape(self.version, x.shape, rec)

    def predict(self, srgb, meta_up):
        return self.forward(srgb, meta_up)[0]

    def backward(self, tape: ModelTape, grad_out, return_input=False):
        """Gradients of all parameters, in ``params`` order.

        With ``return_input=True`` also returns the gradient w.r.t. the
        two inputs as ``(grads, (g_srgb, g_meta))``.
        """
        if tape.version != self.version:
            raise StaleTapeError("weights changed since this tape was recorded")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        rec = tape.records
        if grad_out.shape != tape.input_shape[:3] + (3,):
            raise StaleTapeError("gradient shape does not match the recorded forward")
        grads = {}
        wt, _ = self._w("head")
        hd = rec["head"]
        c = hd.shape[-1]
        grads["head"] = (hd.reshape(-1, c).T @ grad_out.reshape(-1, 3), grad_out.reshape(-1, 3).sum(0))
        g = grad_out @ wt.T

        def unblock(name, g):
            cols, in_shape, out = rec[name]
            wt, _ = self._w(name)
            g = g * elu_grad(out)
            gx, gw, gb = conv3x3_backward(g, cols, wt, in_shape)
            grads[name] = (gw, gb)
            return gx

        depth = self.config.depth
        skip_grads = [None] * depth
        for lvl in range(depth):
            g = unblock(f"dec{lvl}a", unblock(f"dec{lvl}b", g))
            c_up = g.shape[-1] - rec[f"enc{lvl}b"][2].shape[-1]
            skip_grads[lvl] = g[..., c_up:]
            g = upsample2_backward(g[..., :c_up])
        g = unblock("bottom_a", unblock("bottom_b", g))
        for lvl in reversed(range(depth)):
            g = avgpool2_backward(g) + skip_grads[lvl]
            g = unblock(f"enc{lvl}a", unblock(f"enc{lvl}b", g))
        out = []
        for name, _, _ in self.plan:
            out += list(grads[name])
        if return_input:
            return out, (g[..., :3], g[..., 3:])
        return out


# -- optimiser -------------------------------------------------------------------------
class Adam:
    """Adam with bias correction; ``step`` updates the parameter arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr=None):
    state.step(params, grads, lr)
    return params, state


# -- checkpoints ---------------------------------------------------------------------
CKPT_MAGIC = b"RNET"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(net: UNet, path, extra=None) -> None:
    cfg = json.dumps({"config": net.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(net.params))]
    for p in net.params:
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(UNet, extra)`` from an RNET file."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic, not an RNET checkpoint")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        pos = 10
        head = json.loads(data[pos : pos + n])
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape))
            params.append(np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64))
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError("truncated checkpoint") from exc
    return UNet(ModelConfig.from_dict(head["config"]), params), head.get("extra", {})
