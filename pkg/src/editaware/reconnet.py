"""Training, fine-tuning and the estimator wrapper for the reconstruction UNet."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_batch, check_random_state
from .imagecore import crop_random_patch, crop_side, downsample_bilinear, upsample_bilinear
from .isp import EditISP, EditParams
from .losses import l_srgb, l_srgb_ft_downsampled, l_total
from .sampling import EditSampler
from .unet import Adam, ModelConfig, UNet, load_checkpoint, save_checkpoint

# Validation edits: (exposure, LUT index, tone polynomial) at each image's own neutral.
VALIDATION_EDITS = (
    (0.0, 2, (0.0, 1.0)),
    (1.0, 3, (0.0, 1.2, -0.2)),
    (-0.5, 6, (0.0, 0.8, 0.2)),
)
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "wall_seconds")


class TrainingDivergedError(FloatingPointError):
    """Raised when the training loss stops being finite."""


def metadata_input(raw_d, factor):
    """Network-side metadata channels: the low-res RAW upsampled back."""
    raw_d = np.asarray(raw_d, dtype=np.float64)
    if raw_d.ndim == 3:
        return upsample_bilinear(raw_d, factor)
    return np.stack([upsample_bilinear(r, factor) for r in raw_d])


def validation_params(meta) -> list[EditParams]:
    return [EditParams(e, meta.asn, rho, tone) for e, rho, tone in VALIDATION_EDITS]


def _loss_terms(cfg: ModelConfig):
    """(include_raw, lambda) for the configured loss mode."""
    if cfg.loss_mode == "raw-only":
        return True, 0.0
    if cfg.loss_mode == "srgb-only":
        return False, 1.0
    return True, cfg.lam


def _predict(net: UNet, srgb, meta_up, chunk=8):
    out = [net.predict(srgb[i : i + chunk], meta_up[i : i + chunk]) for i in range(0, len(srgb), chunk)]
    return np.concatenate(out)


def validation_loss(net: UNet, data, isp: EditISP, factor, z_cache=None) -> float:
    """Mean ``l_srgb`` over the validation images and the fixed validation edits."""
    raw_d = np.stack([downsample_bilinear(x, factor) for x in data.raw])
    xhat = _predict(net, data.srgb, metadata_input(raw_d, factor))
    total, n = 0.0, 0
    for i, (x, xh, meta) in enumerate(zip(data.raw, xhat, data.metas)):
        for j, phi in enumerate(validation_params(meta)):
            z = None if z_cache is None else z_cache.get((i, j))
            if z is None:
                z = isp.render(x, phi, meta)
                if z_cache is not None:
                    z_cache[(i, j)] = z
            total += l_srgb(x, xh, phi, meta, isp, z=z).value
            n += 1
    return total / n


@dataclass
class TrainResult:
    net: UNet
    log: list
    best_epoch: int

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def train(cfg: ModelConfig, dataset, sampler: EditSampler, isp: EditISP, rng=0, val=None,
          progress=None) -> TrainResult:
    """Mini-batch Adam on the configured objective; returns the best-validation weights.

    Weight init, patch cropping/shuffling and edit sampling draw from three
    independent child streams of ``rng``, so switching the loss mode does
    not perturb the other two.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    seed = rng if isinstance(rng, (int, np.integer)) else check_random_state(rng).integers(2**63)
    init_ss, crop_ss, edit_ss = np.random.SeedSequence(int(seed)).spawn(3)
    init_rng, crop_rng, edit_rng = (np.random.default_rng(s) for s in (init_ss, crop_ss, edit_ss))
    factor = cfg.metadata_factor
    h, w = dataset.raw.shape[1:3]
    side = min(cfg.patch_side, h, w)
    if side % factor or side % 2**cfg.depth:
        raise ValueError(f"patch side {side} incompatible with factor {factor} and depth {cfg.depth}")
    include_raw, lam = _loss_terms(cfg)
    if lam > 0 and not sampler.fixed and sampler.k_luts > isp.n_luts:
        raise ValueError(f"sampler draws from {sampler.k_luts} LUTs but the ISP has {isp.n_luts}")
    net = UNet.init(cfg, init_rng)
    adam = Adam(net.params, lr=cfg.learning_rate)
    val = dataset if val is None or len(val) == 0 else val
    z_cache = {}
    best_val, best_params, best_epoch = np.inf, [p.copy() for p in net.params], 0
    log = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = crop_rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xs, ys, metas = [], [], []
            for i in idx:
                patch, (top, left) = crop_random_patch(dataset.raw[i], side * side, crop_rng, align=factor)
                xs.append(patch)
                ys.append(dataset.srgb[i, top : top + side, left : left + side])
                metas.append(dataset.metas[i])
            xs, ys = np.stack(xs), np.stack(ys)
            meta_up = metadata_input(np.stack([downsample_bilinear(x, factor) for x in xs]), factor)
            xhat, tape = net.forward(ys, meta_up)
            if not np.all(np.isfinite(xhat)):
                raise TrainingDivergedError(f"non-finite network output at epoch {epoch}")
            rho = sampler.sample_lut(edit_rng) if lam > 0 and not sampler.fixed else None
            grad = np.empty_like(xhat)
            value = 0.0
            for b, (x, meta) in enumerate(zip(xs, metas)):
                phi = sampler.sample(meta.asn, edit_rng, rho=rho) if lam > 0 else None
                term = l_total(x, xhat[b], phi, meta, isp, lam, include_raw=include_raw)
                value += term.value / len(idx)
                grad[b] = term.grad / len(idx)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}"
                )
            grads = net.backward(tape, grad)
            adam.step(net.params, grads)
            net.touch()
            batch_losses.append(value)
        v = validation_loss(net, val, isp, factor, z_cache)
        if not np.isfinite(v):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        if v < best_val:
            best_val, best_params, best_epoch = v, [p.copy() for p in net.params], epoch
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": float(v),
               "wall_seconds": round(time.perf_counter() - t0, 3)}
        log.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(UNet(cfg, best_params), log, best_epoch)


def finetune(net: UNet, srgb, raw_d, meta, isp: EditISP, cfg: ModelConfig | None = None,
             target_phi: EditParams | None = None, sampler: EditSampler | None = None, rng=0) -> UNet:
    """Adapt a copy of ``net`` to one image using only its low-res RAW.

    With ``target_phi`` the ISP is fixed to that edit; otherwise a fresh
    edit is drawn from ``sampler`` at every iteration.
    """
    cfg = net.config if cfg is None else cfg
    factor = cfg.metadata_factor
    if net.config.metadata_factor != factor:
        raise ValueError("metadata factor differs from the one used in training")
    srgb = np.asarray(srgb, dtype=np.float64)
    raw_d = np.asarray(raw_d, dtype=np.float64)
    h, w = srgb.shape[:2]
    if raw_d.shape != (h // factor, w // factor, 3):
        raise ValueError(f"low-res RAW {raw_d.shape} does not match {h}x{w} at factor {factor}")
    if target_phi is None and sampler is None:
        raise ValueError("either target_phi or a sampler is required")
    rng = check_random_state(rng)
    out = net.copy()
    if cfg.ft_iterations == 0:
        return out
    adam = Adam(out.params, lr=cfg.ft_learning_rate)
    meta_up = upsample_bilinear(raw_d, factor)
    z_d = isp.render(raw_d, target_phi, meta) if target_phi is not None else None
    side = crop_side(cfg.ft_patch_pixels)
    side = min(side - side % max(factor, 2**cfg.depth), h, w)
    for _ in range(cfg.ft_iterations):
        _, (top, left) = crop_random_patch(srgb, side * side, rng, align=factor)
        rows, cols = slice(top, top + side), slice(left, left + side)
        drows = slice(top // factor, (top + side) // factor)
        dcols = slice(left // factor, (left + side) // factor)
        phi = target_phi if target_phi is not None else sampler.sample(meta.asn, rng)
        xhat, tape = out.forward(srgb[rows, cols], meta_up[rows, cols])
        zc = None if z_d is None else z_d[drows, dcols]
        loss = l_srgb_ft_downsampled(raw_d[drows, dcols], xhat[0], factor, phi, meta, isp, z_d=zc)
        if not np.isfinite(loss.value):
            raise TrainingDivergedError("non-finite fine-tuning loss")
        adam.step(out.params, out.backward(tape, loss.grad[None]))
        out.touch()
    return out


class RawReconstructor(BaseEstimator):
    """Estimator wrapper: ``fit`` trains the UNet, ``predict(srgb, raw_d)`` reconstructs RAW.

    Constructor arguments are the :class:`ModelConfig` fields plus
    ``random_state``. The ISP and edit sampler are passed to :meth:`fit`.
    """

    def __init__(self, base_filters=8, depth=3, metadata_factor=8, patch_side=64, batch_size=8,
                 epochs=12, learning_rate=1e-3, ft_learning_rate=1e-4, ft_iterations=100,
                 ft_patch_pixels=1024, loss_mode="srgb-only", lam=2.0, random_state=0):
        self.base_filters = base_filters
        self.depth = depth
        self.metadata_factor = metadata_factor
        self.patch_side = patch_side
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.ft_learning_rate = ft_learning_rate
        self.ft_iterations = ft_iterations
        self.ft_patch_pixels = ft_patch_pixels
        self.loss_mode = loss_mode
        self.lam = lam
        self.random_state = random_state

    @property
    def config(self) -> ModelConfig:
        params = self.get_params()
        params.pop("random_state")
        return ModelConfig(**params)

    @classmethod
    def from_config(cls, cfg: ModelConfig, random_state=0):
        return cls(**cfg.to_dict(), random_state=random_state)

    def fit(self, X, y=None, *, isp: EditISP, sampler: EditSampler | None = None, val=None,
            progress=None):
        """Train on ``X`` (a split with ``raw``, ``srgb`` and ``metas``)."""
        sampler = EditSampler(fixed=True) if sampler is None else sampler
        result = train(self.config, X, sampler, isp, self.random_state, val, progress)
        self.net_ = result.net
        self.log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.result_ = result
        return self

    def predict(self, srgb, raw_d):
        check_is_fitted(self, "net_")
        srgb = check_image_batch(srgb, "srgb")
        raw_d = check_image_batch(raw_d, "raw_d")
        return _predict(self.net_, srgb, metadata_input(raw_d, self.metadata_factor))

    def finetune(self, srgb, raw_d, meta, isp, target_phi=None, sampler=None, rng=0):
        """Return a new fitted estimator adapted to one image."""
        check_is_fitted(self, "net_")
        clone = RawReconstructor(**self.get_params())
        clone.net_ = finetune(self.net_, srgb, raw_d, meta, isp, self.config, target_phi, sampler, rng)
        return clone

    def save(self, path, extra=None):
        check_is_fitted(self, "net_")
        save_checkpoint(self.net_, path, extra={"random_state": self.random_state, **(extra or {})})

    @classmethod
    def load(cls, path):
        net, extra = load_checkpoint(path)
        est = cls.from_config(net.config, extra.get("random_state", 0))
        est.net_ = net
        return est
