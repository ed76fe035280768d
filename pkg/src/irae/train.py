"""L1 training loop: Adam, plateau learning-rate schedule, history logging.

The schedule holds the learning rate at 1e-3 for the first 50 epochs, drops
to 2e-4 at epoch 51, and from then on divides by 5 whenever the validation
PSNR fails to improve for 10 consecutive epochs; training terminates once
the rate falls below 1e-6.  Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, absolute, backward, mul, no_grad, sub, sum_all
from .degrade import apply_awgn, apply_blind_awgn, apply_inpaint, apply_jpeg_sim, make_inpaint_mask
from .metrics import psnr

__all__ = [
    "TrainingPair",
    "NonFiniteGradError",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "LrSchedule",
    "run_schedule",
    "l1_loss",
    "train",
    "EpochRecord",
    "history_lines",
]


@dataclass
class TrainingPair:
    """One ground-truth image x and its corrupted counterpart y."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"pair shape mismatch: {self.x.shape} vs {self.y.shape}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("pair contains non-finite values")


class NonFiniteGradError(RuntimeError):
    """A gradient went NaN/Inf; the optimizer refuses to apply it."""


def l1_loss(restored, reference):
    """(1/N) * sum_i ||restored_i - reference_i||_1 over a batch of N images."""
    if restored.shape != reference.shape:
        raise ValueError(f"l1_loss: shape mismatch {restored.shape} vs {reference.shape}")
    n = restored.shape[0]
    return mul(sum_all(absolute(sub(restored, reference))), 1.0 / n)


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def clip_global_norm(grads, max_norm):
    """Rescale grads in place so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads:
            if g is not None:
                g *= factor
    return grads


def adam_step(params, grads, state, lr):
    """Standard bias-corrected Adam update, applied in place.

    grads may contain None for parameters untouched by the last backward
    (treated as zero gradient, i.e. no update contribution).
    """
    if len(params) != len(grads):
        raise ValueError("adam_step: params and grads length mismatch")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradError("non-finite gradient; aborting epoch")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LrSchedule:
    """Learning-rate state machine driven once per epoch by validation PSNR."""

    initial_lr: float = 1e-3
    post_drop_lr: float = 2e-4
    drop_epoch: int = 50
    patience: int = 10
    decay: float = 0.2
    stop_threshold: float = 1e-6
    lr: float = 1e-3
    best_val_psnr: float = -math.inf
    epochs_since_improve: int = 0


def run_schedule(epoch, val_psnr, sched):
    """Advance the schedule; returns (lr for this epoch, stop flag).

    Called at the top of each epoch with the most recent validation PSNR
    (None when no validation has happened yet).  The plateau counter starts
    fresh when the rate drops to 2e-4, and a decay that lands below the
    stop threshold terminates training.
    """
    if val_psnr is not None:
        if val_psnr > sched.best_val_psnr:
            sched.best_val_psnr = val_psnr
            sched.epochs_since_improve = 0
        else:
            sched.epochs_since_improve += 1
    stop = False
    if epoch <= sched.drop_epoch:
        sched.lr = sched.initial_lr
    elif epoch == sched.drop_epoch + 1:
        sched.lr = sched.post_drop_lr
        sched.epochs_since_improve = 0
    elif sched.epochs_since_improve >= sched.patience:
        sched.lr = sched.lr * sched.decay
        sched.epochs_since_improve = 0
        if sched.lr < sched.stop_threshold:
            stop = True
    return sched.lr, stop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_psnr: float
    lr: float


def history_lines(history):
    """One machine-parseable key=value record per epoch."""
    return [
        f"epoch={r.epoch} loss={r.train_loss:.8g} val_psnr={r.val_psnr:.8g} lr={r.lr:.8g}"
        for r in history
    ]


def _degrade_batch(images, spec, rng):
    """Corrupt a list of (C,H,W) images; fresh draws per call where random."""
    out = []
    for x in images:
        if spec.kind == "awgn":
            out.append(apply_awgn(x, spec.sigma, rng))
        elif spec.kind == "blind_awgn":
            out.append(apply_blind_awgn(x, spec.sigma_range, rng)[0])
        elif spec.kind == "jpeg":
            out.append(apply_jpeg_sim(x, spec.quality_factor))
        elif spec.kind == "inpaint":
            mask = make_inpaint_mask(x.shape[-2:], spec.mask_size, rng)
            out.append(apply_inpaint(x, mask))
        else:
            raise ValueError(f"unknown degradation kind {spec.kind!r}")
    return out


def _validate(model, val_pairs, batch_size):
    scores = []
    with no_grad():
        for start in range(0, len(val_pairs), batch_size):
            chunk = val_pairs[start : start + batch_size]
            ys = np.stack([p.y for p in chunk])
            restored = np.clip(model.forward(ys).data, 0.0, 1.0)
            for r, pair in zip(restored, chunk):
                scores.append(psnr(r, pair.x))
    return float(np.mean(scores))


def train(model, images, spec, epochs_max, batch_size=16, seed=0, schedule=None, clip_grad_norm=None):
    """Minimize the L1 restoration loss; returns (model, history).

    images: list of (C,H,W) arrays in [0,1].  A 10% validation split (at
    least one image) is held out, fixed by the seed, with its corruptions
    drawn once so per-epoch PSNR is comparable.  Training corruptions are
    redrawn every epoch for the stochastic kinds.  clip_grad_norm, when
    set, caps the global gradient norm before each update (off by
    default).  The model is left at the best-validation-PSNR parameters;
    a NaN loss or gradient stops training early at the last good state.
    """
    if len(images) == 0:
        raise ValueError("train: dataset is empty")
    spec.validate()
    images = [np.asarray(x, dtype=np.float64) for x in images]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_val = max(1, len(images) // 10)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if len(train_idx) == 0:
        raise ValueError("train: dataset too small to split")

    val_images = [images[i] for i in val_idx]
    val_pairs = [
        TrainingPair(x, y) for x, y in zip(val_images, _degrade_batch(val_images, spec, rng))
    ]
    train_images = [images[i] for i in train_idx]

    params = model.parameters()
    adam = AdamState.for_params(params)
    sched = schedule if schedule is not None else LrSchedule()
    history = []
    best = None  # (val_psnr, snapshot)
    last_val_psnr = None
    dtype = model.config.dtype

    for epoch in range(1, epochs_max + 1):
        lr, stop = run_schedule(epoch, last_val_psnr, sched)
        if stop:
            break
        perm = rng.permutation(len(train_images))
        epoch_pairs = []
        shuffled = [train_images[i] for i in perm]
        for x, y in zip(shuffled, _degrade_batch(shuffled, spec, rng)):
            epoch_pairs.append(TrainingPair(x, y))

        total = 0.0
        diverged = False
        for start in range(0, len(epoch_pairs), batch_size):
            chunk = epoch_pairs[start : start + batch_size]
            ys = Tensor(np.stack([p.y for p in chunk]).astype(dtype))
            xs = Tensor(np.stack([p.x for p in chunk]).astype(dtype))
            loss = l1_loss(model.forward(ys), xs)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                diverged = True
                break
            backward(loss)
            grads = [p.grad for p in params]
            if clip_grad_norm is not None:
                clip_global_norm(grads, clip_grad_norm)
            try:
                adam_step(params, grads, adam, lr)
            except NonFiniteGradError:
                diverged = True
                break
            finally:
                for p in params:
                    p.grad = None
            total += loss_val * len(chunk)
        if diverged:
            break

        train_loss = total / len(epoch_pairs)
        val_psnr = _validate(model, val_pairs, batch_size)
        history.append(EpochRecord(epoch, train_loss, val_psnr, lr))
        if best is None or val_psnr > best[0]:
            best = (val_psnr, model.snapshot())
        last_val_psnr = val_psnr

    if best is not None:
        model.restore(best[1])
    return model, history
