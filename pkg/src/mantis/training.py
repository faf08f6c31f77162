"""Model-augmented training objective, sampling-augmented training loop and inference."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import T2_MAX, T2_MIN, EchoSeries, NumericError, ParamMaps, normalize_dataset
from .encoding import adjoint_array, forward_array, undersample
from .network import (T2_SCALE, NetParams, NetSpec, adam_step, forward_backward, forward_net,
                      init_params)
from .sampling import MaskSet
from .sigmodel import model_jacobian, model_signal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam_data: float = 0.1
    lam_cnn: float = 1.0
    lr: float = 2e-4
    batch: int = 3
    epochs: int = 100
    seed: int = 0
    loss2_form: str = "squared"  # or "l2" for the unsquared norm
    i0_weight: float = 1.0  # relative weight of the I0 channel inside loss 2
    log_every: int = 0

    def __post_init__(self):
        if self.lam_data < 0 or self.lam_cnn < 0:
            raise ValueError("loss weights must be >= 0")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        if self.loss2_form not in ("squared", "l2"):
            raise ValueError("loss2_form must be 'squared' or 'l2'")


@dataclass(frozen=True)
class TrainSample:
    """One normalized training example.

    ``i_u`` is the normalized complex zero-filled series, ``d`` the normalized
    undersampled k-space, ``ref_i0`` the normalized reference proton density
    and ``ref_t2_ms`` the reference T2 in ms.
    """

    i_u: np.ndarray
    d: np.ndarray
    lines: np.ndarray
    te_ms: np.ndarray
    ref_i0: np.ndarray
    ref_t2_ms: np.ndarray
    scale: float = 1.0

    @property
    def net_input(self) -> np.ndarray:
        return np.abs(self.i_u)


@dataclass(frozen=True)
class PhantomData:
    """Fully sampled echoes of one slice with its reference and ground-truth maps."""

    echoes: EchoSeries
    reference: ParamMaps
    truth: ParamMaps | None = None


def make_sample(full: EchoSeries, reference: ParamMaps, maskset: MaskSet) -> TrainSample:
    k, zf = undersample(full, maskset)
    _, scale = normalize_dataset(zf)
    return TrainSample(
        i_u=np.asarray(zf.data) / scale,
        d=np.asarray(k.data) / scale,
        lines=np.asarray(maskset.lines),
        te_ms=np.asarray(full.te_ms),
        ref_i0=np.asarray(reference.i0, dtype=np.float64) / scale,
        ref_t2_ms=np.asarray(reference.t2_ms, dtype=np.float64),
        scale=scale,
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def smooth_t2(t2_ms):
    """Differentiable floor T2_MIN + softplus(t2 - T2_MIN) and its derivative."""
    z = np.asarray(t2_ms, dtype=np.float64) - T2_MIN
    return T2_MIN + _softplus(z), _sigmoid(z)


def loss_terms(output_maps: np.ndarray, sample: TrainSample, need_data: bool = True,
               loss2_form: str = "squared", i0_weight: float = 1.0):
    """Return (loss1, grad1, loss2, grad2) for one sample.

    ``output_maps`` is the raw network output [2, ny, nx]: channel 0 is I0 in
    normalized units, channel 1 is T2 / T2_SCALE.
    """
    out = np.asarray(output_maps, dtype=np.float64)
    i0 = out[0]
    npix = i0.size
    loss1, g1 = 0.0, np.zeros_like(out)
    if need_data:
        t2, dt2 = smooth_t2(T2_SCALE * out[1])
        s = model_signal(i0, t2, sample.te_ms, t2_floor=T2_MIN)
        r = forward_array(s, sample.lines) - sample.d
        loss1 = float(np.vdot(r, r).real) / npix
        gs = (2.0 / npix) * adjoint_array(r, sample.lines).real
        ds_di0, ds_dt2 = model_jacobian(i0, t2, sample.te_ms, t2_floor=T2_MIN)
        g1[0] = (gs * ds_di0).sum(axis=0)
        g1[1] = (gs * ds_dt2).sum(axis=0) * dt2 * T2_SCALE

    diff = np.stack([np.sqrt(i0_weight) * (i0 - sample.ref_i0),
                     out[1] - sample.ref_t2_ms / T2_SCALE])
    wscale = np.array([np.sqrt(i0_weight), 1.0])[:, None, None]
    if loss2_form == "squared":
        loss2 = float((diff**2).sum()) / npix
        g2 = (2.0 / npix) * diff * wscale
    else:
        norm = float(np.sqrt((diff**2).sum()))
        loss2 = norm
        g2 = diff * wscale / norm if norm > 0 else np.zeros_like(diff)
    return loss1, g1, loss2, g2


def loss_mantis(output_maps: np.ndarray, sample, lam_data: float = 0.1, lam_cnn: float = 1.0,
                loss2_form: str = "squared", i0_weight: float = 1.0):
    """lam_data * data-consistency + lam_cnn * supervised mapping loss.

    ``output_maps`` may be one map pair [2, ny, nx] with one sample, or a
    batch [B, 2, ny, nx] with a list of B samples (the loss is averaged).
    Returns (total, gradient with the shape of ``output_maps``).
    """
    out = np.asarray(output_maps, dtype=np.float64)
    if out.ndim == 3:
        out, samples = out[None], [sample]
    else:
        samples = list(sample)
    if len(samples) != out.shape[0]:
        raise ValueError("one sample per output map pair required")
    total = 0.0
    grad = np.zeros_like(out)
    nb = len(samples)
    for b, smp in enumerate(samples):
        l1, g1, l2, g2 = loss_terms(out[b], smp, lam_data != 0, loss2_form, i0_weight)
        if not np.isfinite(l1):
            raise NumericError("non-finite data-consistency loss (loss 1)")
        if not np.isfinite(l2):
            raise NumericError("non-finite mapping loss (loss 2)")
        total += (lam_data * l1 + lam_cnn * l2) / nb
        grad[b] = (lam_data * g1 + lam_cnn * g2) / nb
    return total, (grad[0] if np.ndim(output_maps) == 3 else grad)


@dataclass
class TrainResult:
    params: NetParams
    history: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r}" for h in self.history]
        return "\n".join(lines) + "\n"


def validation_loss(params: NetParams, spec: NetSpec, samples, config: TrainConfig) -> float:
    x = np.stack([s.net_input for s in samples])
    out = forward_net(params, spec, x, "infer")
    loss, _ = loss_mantis(out, samples, config.lam_data, config.lam_cnn,
                          config.loss2_form, config.i0_weight)
    return loss


def train(config: TrainConfig, phantoms, mask_library, netspec: NetSpec, seed: int | None = None,
          val_phantoms=None, val_masks=None, init: NetParams | None = None) -> TrainResult:
    """Sampling-augmented mini-batch ADAM training.

    Each iteration draws a mini-batch of phantoms and one mask-set uniformly
    from ``mask_library``. Validation uses ``val_masks`` (one per validation
    phantom, defaulting to library entries) and the snapshot with the lowest
    validation loss is returned.
    """
    seed = config.seed if seed is None else seed
    train_set = list(phantoms)
    val_set = list(val_phantoms) if val_phantoms is not None else []
    if not train_set or not val_set:
        raise ValueError("need at least one training and one validation phantom")
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(netspec, seed)
    if val_masks is None:
        val_masks = [mask_library[i % len(mask_library)] for i in range(len(val_set))]
    val_samples = [make_sample(p.echoes, p.reference, m) for p, m in zip(val_set, val_masks)]

    result = TrainResult(params.copy())
    best = np.inf
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            mask = mask_library[rng.integers(len(mask_library))]
            samples = [make_sample(train_set[i].echoes, train_set[i].reference, mask) for i in idx]
            x = np.stack([s.net_input for s in samples])

            def loss_fn(out, samples=samples):
                return loss_mantis(out, samples, config.lam_data, config.lam_cnn,
                                   config.loss2_form, config.i0_weight)

            try:
                loss, g = forward_backward(params, netspec, x, loss_fn)
                adam_step(params, g, lr=config.lr)
            except NumericError as exc:
                result.seconds = time.perf_counter() - t0
                raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
            losses.append(loss)
        val = validation_loss(params, netspec, val_samples, config)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": float(val)}
        result.history.append(entry)
        if val < best:
            best = val
            result.params = params.copy()
            result.best_epoch = epoch
        if config.log_every and epoch % config.log_every == 0:
            logger.info("epoch %d train %.5g val %.5g", epoch, entry["train_loss"], val)
    if config.epochs == 0:
        result.params = params.copy()
    result.seconds = time.perf_counter() - t0
    return result


def infer(params: NetParams, netspec: NetSpec, i_u: EchoSeries, roi_labels=None,
          threshold: float = 0.02) -> ParamMaps:
    """Map zero-filled echoes straight to (I0, T2) maps."""
    normed, scale = normalize_dataset(i_u)
    out = forward_net(params, netspec, np.abs(normed.data), "infer")
    i0 = np.maximum(out[0].astype(np.float64), 0.0) * scale
    t2 = np.clip(T2_SCALE * out[1].astype(np.float64), T2_MIN, T2_MAX)
    if roi_labels is not None:
        labels = np.where(i0 > 0, np.asarray(roi_labels), 0)
    else:
        labels = (i0 > threshold * i0.max()).astype(np.int32) if i0.max() > 0 else np.zeros(i0.shape, int)
    return ParamMaps(i0, t2, labels)
