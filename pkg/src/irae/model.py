"""Symmetric invertible encoder-decoder assembled from flow layers.

The encoder runs L levels of [squeeze, then K x (ActNorm, 1x1 conv, affine
coupling)]; the decoder mirrors the structure with its own parameters, each
level being [K flow steps, then unsqueeze].  Output shape always equals
input shape, and the whole map has an exact algebraic inverse.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .layers import (
    ActNorm,
    AffineCoupling,
    InvertibleConv1x1,
    random_orthogonal,
    squeeze,
    squeeze_array,
    unsqueeze,
    unsqueeze_array,
)

__all__ = [
    "IraeConfig",
    "IraeModel",
    "build",
    "param_count_formula",
    "randomize_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

PRECISION_DTYPES = {"float32": np.float32, "float64": np.float64}

CHECKPOINT_MAGIC = b"IRAE"
CHECKPOINT_VERSION = 1
# magic, version, flow_steps, levels, hidden_width, in_channels,
# precision code, actnorm-initialized flag, padding, seed, parameter count
_HEADER = struct.Struct("<4sIIIIIBBHQQ")


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or of an unknown version."""


@dataclass(frozen=True)
class IraeConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    flow_steps: int = 16  # K: flow steps per level
    levels: int = 2  # L: squeeze levels in the encoder (mirrored in decoder)
    hidden_width: int = 64  # coupling net hidden channels
    in_channels: int = 1
    precision: str = "float32"
    seed: int = 0

    def validate(self):
        problems = []
        if self.flow_steps < 1:
            problems.append(f"flow_steps must be >= 1, got {self.flow_steps}")
        if self.levels < 1:
            problems.append(f"levels must be >= 1, got {self.levels}")
        if self.hidden_width < 1:
            problems.append(f"hidden_width must be >= 1, got {self.hidden_width}")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.precision not in PRECISION_DTYPES:
            problems.append(f"precision must be one of {sorted(PRECISION_DTYPES)}, got {self.precision!r}")
        if not 0 <= self.seed < 2**64:
            problems.append(f"seed must fit in 64 bits, got {self.seed}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def dtype(self):
        return PRECISION_DTYPES[self.precision]


class _FlowStep:
    """One (ActNorm, invertible 1x1 convolution, affine coupling) triple."""

    def __init__(self, channels, hidden, rng, dtype):
        self.norm = ActNorm(channels, dtype=dtype)
        self.mix = InvertibleConv1x1(channels, rng=rng, dtype=dtype)
        self.coupling = AffineCoupling(channels, hidden, rng=rng, dtype=dtype)

    def forward(self, x):
        if not self.norm.initialized:
            self.norm.initialize(x)
        x = self.norm.forward(x)
        x = self.mix.forward(x)
        return self.coupling.forward(x)

    def inverse(self, y):
        y = self.coupling.inverse(y)
        y = self.mix.inverse(y)
        return self.norm.inverse(y)

    def parameters(self):
        return self.norm.parameters() + self.mix.parameters() + self.coupling.parameters()


class IraeModel:
    """Built via build(); holds independent encoder and decoder stacks."""

    def __init__(self, config, encoder_levels, decoder_levels):
        self.config = config
        self.encoder_levels = encoder_levels
        self.decoder_levels = decoder_levels

    # -- shape plumbing ----------------------------------------------------

    def _check_input(self, shape):
        cfg = self.config
        if len(shape) != 4:
            raise ValueError(f"expected [N,C,H,W] input, got shape {shape}")
        n, c, h, w = shape
        if c != cfg.in_channels:
            raise ValueError(f"model expects {cfg.in_channels} channels, got {c}")
        div = 2**cfg.levels
        if h % div or w % div:
            raise ValueError(f"H and W must be divisible by {div}, got {h}x{w}")

    def _as_input_tensor(self, x):
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        self._check_input(data.shape)
        if data.dtype == self.config.dtype:
            return x if isinstance(x, Tensor) else Tensor(data)
        if isinstance(x, Tensor) and x.requires_grad:
            raise ValueError(
                f"differentiable input dtype {data.dtype} must match model precision "
                f"{self.config.precision}"
            )
        return Tensor(data.astype(self.config.dtype))

    # -- the invertible map ------------------------------------------------

    def forward(self, y):
        """Restoration estimate for a degraded batch; same shape out as in.

        On the very first batch each ActNorm initializes itself from the
        activations it sees (the decoder thereby sees the encoder's output).
        """
        x = self._as_input_tensor(y)
        for level in self.encoder_levels:
            x = squeeze(x)
            for step in level:
                x = step.forward(x)
        for level in self.decoder_levels:
            for step in level:
                x = step.forward(x)
            x = unsqueeze(x)
        return x

    def inverse(self, xhat):
        """Exact algebraic inverse of forward (decoder first, then encoder)."""
        data = xhat.data if isinstance(xhat, Tensor) else np.asarray(xhat)
        self._check_input(data.shape)
        data = data.astype(self.config.dtype, copy=False)
        for level in reversed(self.decoder_levels):
            data = squeeze_array(data)
            for step in reversed(level):
                data = step.inverse(data)
        for level in reversed(self.encoder_levels):
            for step in reversed(level):
                data = step.inverse(data)
            data = unsqueeze_array(data)
        return Tensor(data)

    # -- parameter access ----------------------------------------------------

    def parameters(self):
        """All learnable tensors in the fixed (checkpoint) traversal order."""
        params = []
        for level in self.encoder_levels + self.decoder_levels:
            for step in level:
                params.extend(step.parameters())
        return params

    def param_count(self):
        return sum(p.size for p in self.parameters())

    @property
    def actnorms_initialized(self):
        return all(
            step.norm.initialized
            for level in self.encoder_levels + self.decoder_levels
            for step in level
        )

    def _set_actnorms_initialized(self, flag):
        for level in self.encoder_levels + self.decoder_levels:
            for step in level:
                step.norm.initialized = flag

    def snapshot(self):
        """Copy of all parameter values plus the ActNorm-initialized flag."""
        return [p.data.copy() for p in self.parameters()], self.actnorms_initialized

    def restore(self, snapshot):
        arrays, initialized = snapshot
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("snapshot does not match model structure")
        for p, a in zip(params, arrays):
            p.data[...] = a
        self._set_actnorms_initialized(initialized)


def build(config):
    """Deterministically construct a model from its config and seed.

    Couplings start as near-identities (zero-initialized final conv) and
    every ActNorm is flagged uninitialized until the first batch.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    enc = []
    for level in range(1, config.levels + 1):
        channels = config.in_channels * 4**level
        enc.append(
            [
                _FlowStep(channels, config.hidden_width, rng, dtype)
                for _ in range(config.flow_steps)
            ]
        )
    dec = []
    for level in range(config.levels, 0, -1):
        channels = config.in_channels * 4**level
        dec.append(
            [
                _FlowStep(channels, config.hidden_width, rng, dtype)
                for _ in range(config.flow_steps)
            ]
        )
    return IraeModel(config, enc, dec)


def param_count_formula(flow_steps, levels, in_channels, hidden_width):
    """Closed-form learnable-scalar count for a (K, L, C, h) configuration.

    Per flow step at channel count c: ActNorm 2c, 1x1 conv c^2, coupling net
    9*h*(c/2) + h  +  9*h*h + h  +  9*h*c + c.  Each of the L levels holds K
    steps at c = C*4^level, and the decoder doubles everything.
    """
    k, c_in, h = flow_steps, in_channels, hidden_width
    total = 0
    for level in range(1, levels + 1):
        c = c_in * 4**level
        step = 2 * c + c * c + (9 * h * (c // 2) + h) + (9 * h * h + h) + (9 * h * c + c)
        total += k * step
    return 2 * total


def randomize_parameters(model, rng):
    """Overwrite all parameters with random valid values (verification use).

    Draws stay inside the numerically well-conditioned regime that
    data-dependent initialization and training produce: ActNorm scales near
    1, fresh random orthogonal 1x1 weights, small Gaussian coupling nets,
    and the coupling scale gate biased so s stays close to 1 (a scale gate
    stuck far below 1 amplifies inverse rounding error exponentially in the
    flow depth, which would measure float noise, not invertibility).  All
    ActNorms are marked initialized.
    """
    dtype = model.config.dtype
    for level in model.encoder_levels + model.decoder_levels:
        for step in level:
            step.norm.scale.data[...] = rng.uniform(0.85, 1.2, step.norm.channels).astype(dtype)
            step.norm.bias.data[...] = (0.1 * rng.standard_normal(step.norm.channels)).astype(dtype)
            step.norm.initialized = True
            step.mix.weight.data[...] = random_orthogonal(step.mix.channels, rng, dtype)
            coupling = step.coupling
            for p in (coupling.w1, coupling.b1, coupling.w2, coupling.b2, coupling.w3):
                p.data[...] = (0.05 * rng.standard_normal(p.shape)).astype(dtype)
            half = coupling.channels // 2
            gate_bias = np.empty(coupling.channels)
            gate_bias[:half] = rng.uniform(1.0, 3.0, half)
            gate_bias[half:] = 0.05 * rng.standard_normal(half)
            coupling.b3.data[...] = gate_bias.astype(dtype)
    return model


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

_PRECISION_CODES = {"float32": 0, "float64": 1}
_CODE_PRECISIONS = {v: k for k, v in _PRECISION_CODES.items()}


def save_checkpoint(model, path):
    """Write magic, version, config block, then the little-endian parameter
    stream in traversal order (f32 for float32 models, f64 for float64)."""
    cfg = model.config
    params = model.parameters()
    count = sum(p.size for p in params)
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        cfg.flow_steps,
        cfg.levels,
        cfg.hidden_width,
        cfg.in_channels,
        _PRECISION_CODES[cfg.precision],
        1 if model.actnorms_initialized else 0,
        0,
        cfg.seed,
        count,
    )
    wire = np.dtype(cfg.dtype).newbyteorder("<")
    with open(path, "wb") as f:
        f.write(header)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype=wire).tobytes())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; the file's config wins."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"checkpoint truncated: {len(blob)} bytes is too short")
    (
        magic,
        version,
        flow_steps,
        levels,
        hidden_width,
        in_channels,
        precision_code,
        initialized,
        _pad,
        seed,
        count,
    ) = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if precision_code not in _CODE_PRECISIONS:
        raise CheckpointError(f"unknown precision code {precision_code}")
    config = IraeConfig(
        flow_steps=flow_steps,
        levels=levels,
        hidden_width=hidden_width,
        in_channels=in_channels,
        precision=_CODE_PRECISIONS[precision_code],
        seed=seed,
    )
    try:
        config.validate()
    except ValueError as e:
        raise CheckpointError(f"checkpoint config invalid: {e}") from None
    wire = np.dtype(config.dtype).newbyteorder("<")
    payload = blob[_HEADER.size :]
    expected = count * wire.itemsize
    if len(payload) != expected:
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, expected {expected}"
        )
    model = build(config)
    params = model.parameters()
    if sum(p.size for p in params) != count:
        raise CheckpointError("parameter count does not match the stored config")
    values = np.frombuffer(payload, dtype=wire)
    offset = 0
    for p in params:
        chunk = values[offset : offset + p.size]
        p.data[...] = chunk.reshape(p.shape).astype(config.dtype)
        offset += p.size
    model._set_actnorms_initialized(bool(initialized))
    return model
