"""Multi-path sub-encoder: channel split, linear time transform, spiking channel
attention, causal dilated temporal convolution, fusion and concatenation.

All operations accept arbitrary leading axes in front of the ``[C, 1, T]``
block, so the same functions serve a single sub-encoder and a batch of
stacked sub-encoders.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .spiking import LifParams, run_window


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int = 128
    n_subencoders: int = 16
    t_in: int = 50
    t_out: int = 10
    kernel_size: int = 3
    dilation: int = 2
    bottleneck_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {v}")
        if self.n_channels % self.n_subencoders:
            raise ConfigError(
                f"n_channels={self.n_channels} not divisible by n_subencoders={self.n_subencoders}")
        if self.t_in % self.t_out:
            raise ConfigError(f"t_in={self.t_in} not divisible by t_out={self.t_out}")
        if self.channels_per_subencoder % self.bottleneck_ratio:
            raise ConfigError(
                f"C={self.channels_per_subencoder} not divisible by "
                f"bottleneck_ratio={self.bottleneck_ratio}")

    @property
    def channels_per_subencoder(self) -> int:
        return self.n_channels // self.n_subencoders

    @property
    def bottleneck(self) -> int:
        return self.channels_per_subencoder // self.bottleneck_ratio

    @property
    def pool_window(self) -> int:
        return self.t_in // self.t_out


@dataclass
class SubEncoderWeights:
    """Weights of one sub-encoder, or of all of them stacked on a leading axis."""

    lt_matrix: Tensor        # [..., T, T']
    ca_compress: Tensor      # [..., C/r, C]
    ca_compress_bias: Tensor  # [..., C/r]
    ca_expand: Tensor        # [..., C, C/r]
    ca_expand_bias: Tensor   # [..., C]
    tcn_kernels: Tensor      # [..., C, k]
    tcn_bias: Tensor         # [..., C]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def select(self, i: int) -> SubEncoderWeights:
        """Slice sub-encoder ``i`` out of stacked weights (shares no graph)."""
        return SubEncoderWeights(**{k: Tensor(v.data[i]) for k, v in self.named().items()})


def weight_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c, cr, k = cfg.channels_per_subencoder, cfg.bottleneck, cfg.kernel_size
    return {
        "lt_matrix": (cfg.t_in, cfg.t_out),
        "ca_compress": (cr, c),
        "ca_compress_bias": (cr,),
        "ca_expand": (c, cr),
        "ca_expand_bias": (c,),
        "tcn_kernels": (c, k),
        "tcn_bias": (c,),
    }


_FAN_IN = {
    "lt_matrix": lambda cfg: cfg.t_in,
    "ca_compress": lambda cfg: cfg.channels_per_subencoder,
    "ca_compress_bias": lambda cfg: cfg.channels_per_subencoder,
    "ca_expand": lambda cfg: cfg.bottleneck,
    "ca_expand_bias": lambda cfg: cfg.bottleneck,
    "tcn_kernels": lambda cfg: cfg.kernel_size,
    "tcn_bias": lambda cfg: cfg.kernel_size,
}


def init_weights(cfg: EncoderConfig, rng: np.random.Generator) -> SubEncoderWeights:
    """Stacked weights for all sub-encoders, uniform in +-sqrt(1/fan_in)."""
    out = {}
    for name, shape in weight_shapes(cfg).items():
        bound = np.sqrt(1.0 / _FAN_IN[name](cfg))
        data = rng.uniform(-bound, bound, size=(cfg.n_subencoders,) + shape)
        out[name] = Tensor(data, requires_grad=True)
    return SubEncoderWeights(**out)


# -- the per-block operations ---------------------------------------------

def split_channels(x, cfg: EncoderConfig) -> list[Tensor]:
    x = nm.as_tensor(x)
    if cfg.n_channels % cfg.n_subencoders:
        raise ConfigError("n_channels not divisible by n_subencoders")
    if x.ndim < 3 or x.shape[-3] != cfg.n_channels:
        raise ValueError(f"expected [..., {cfg.n_channels}, 1, T], got {x.shape}")
    c = cfg.channels_per_subencoder
    return [x[..., i * c:(i + 1) * c, :, :] for i in range(cfg.n_subencoders)]


def concat_subencoders(blocks: Sequence[Tensor]) -> Tensor:
    if not blocks:
        raise ValueError("no sub-encoder outputs to concatenate")
    first = blocks[0].shape
    for b in blocks[1:]:
        if b.shape != first:
            raise ValueError(f"inconsistent block shapes {first} vs {b.shape}")
    if len(blocks) == 1:
        return blocks[0]
    return nm.concat(blocks, axis=-3)


def linear_transform(x, lt_matrix) -> Tensor:
    x, m = nm.as_tensor(x), nm.as_tensor(lt_matrix)
    if x.shape[-1] != m.shape[-2]:
        raise ValueError(f"time axis {x.shape[-1]} does not match LT matrix {m.shape}")
    return nm.matmul(x, m)


def global_avg_pool(x) -> Tensor:
    return nm.mean(x, axis=-1, keepdims=True)


def temporal_avg_pool(x, p: int) -> Tensor:
    x = nm.as_tensor(x)
    t = x.shape[-1]
    if p < 1 or t % p:
        raise ValueError(f"window {p} does not divide length {t}")
    return nm.mean(x.reshape(x.shape[:-1] + (t // p, p)), axis=-1)


def tcn_conv(x, kernels, biases, k: int, d: int) -> Tensor:
    """Depthwise causal dilated convolution along time.

    ``out[t] = b + sum_i w[i] * x[t - (k-1-i)*d]`` with zeros before t=0, so
    the length is preserved and no output looks ahead.
    """
    x, w, b = nm.as_tensor(x), nm.as_tensor(kernels), nm.as_tensor(biases)
    if k < 1 or d < 1:
        raise ValueError("kernel size and dilation must be >= 1")
    if w.shape[-1] != k:
        raise ValueError(f"kernel width {w.shape[-1]} != k={k}")
    t = x.shape[-1]
    xp = nm.pad_left(x, (k - 1) * d)
    lead = w.shape[:-1] + (1, 1)
    out = nm.reshape(b, b.shape + (1, 1))
    for i in range(k):
        wi = nm.reshape(w[..., i], lead)
        out = out + wi * xp[..., i * d:i * d + t]
    return out


def fuse(lt_out, gate, tcn_out) -> Tensor:
    lt_out, gate, tcn_out = map(nm.as_tensor, (lt_out, gate, tcn_out))
    if lt_out.shape != tcn_out.shape:
        raise ValueError(f"LT {lt_out.shape} and TCN {tcn_out.shape} outputs differ")
    if gate.shape[-1] != 1 or gate.shape[-3] != lt_out.shape[-3]:
        raise ValueError(f"gate {gate.shape} does not broadcast over {lt_out.shape}")
    return lt_out + gate * tcn_out


def channel_attention(x, w: SubEncoderWeights, lif: LifParams, spiking: bool = True,
                      probe: dict | None = None) -> Tensor:
    """Per-channel gate from pooled features through a compress/expand bottleneck.

    With ``spiking`` each 1x1 conv drives LIF neurons over the window and the
    gate is their firing rate, so it lies in [0, 1].  Otherwise a rectifier is
    used (the non-spiking twin).  ``probe`` collects per-step spikes under
    ``"ca_compress"`` and ``"ca_expand"``.
    """
    x = nm.as_tensor(x)
    c = x.shape[-3]
    if w.ca_compress.shape[-1] != c or w.ca_expand.shape[-2] != c:
        raise ValueError(f"attention weights do not match {c} channels")
    lead = x.shape[:-3]
    f = global_avg_pool(x).reshape(lead + (1, c))

    def compress(inp):
        bias = nm.reshape(w.ca_compress_bias, w.ca_compress_bias.shape[:-1] + (1, -1))
        return nm.matmul(inp, nm.swapaxes(w.ca_compress, -1, -2)) + bias

    def expand(inp):
        bias = nm.reshape(w.ca_expand_bias, w.ca_expand_bias.shape[:-1] + (1, -1))
        return nm.matmul(inp, nm.swapaxes(w.ca_expand, -1, -2)) + bias

    if spiking:
        rec1 = [] if probe is not None else None
        rec2 = [] if probe is not None else None
        u = run_window(f, compress, lif, rec1)
        gate = run_window(u, expand, lif, rec2)
        if probe is not None:
            probe["ca_compress"] = np.stack(rec1)
            probe["ca_expand"] = np.stack(rec2)
    else:
        gate = nm.relu(expand(nm.relu(compress(f))))
    return gate.reshape(lead + (c, 1, 1))


# -- the whole encoder -----------------------------------------------------

FEATURE_PATHS = ("CA", "TCN", "LT")


def encode(x, w: SubEncoderWeights, cfg: EncoderConfig, lif: LifParams,
           spiking: bool = True, disabled: frozenset = frozenset(),
           probe: dict | None = None) -> Tensor:
    """[B, N_c, 1, T] -> E_out [B, N_c, 1, T'] with all sub-encoders vectorised.

    Contiguous reshaping of the channel axis is the same split as
    :func:`split_channels`; the weights carry a leading sub-encoder axis.
    ``disabled`` may name ``CA`` (gate fixed at 1), ``TCN`` or ``LT`` (path
    dropped from the fusion).
    """
    x = nm.as_tensor(x)
    b = x.shape[0]
    ns, c = cfg.n_subencoders, cfg.channels_per_subencoder
    if x.shape[1:] != (cfg.n_channels, 1, cfg.t_in):
        raise ValueError(f"expected [B, {cfg.n_channels}, 1, {cfg.t_in}], got {x.shape}")
    xs = x.reshape(b, ns, c, 1, cfg.t_in)
    if probe is not None:
        probe["input"] = xs.data

    out = None
    if "LT" not in disabled:
        m = nm.reshape(w.lt_matrix, (ns, 1, cfg.t_in, cfg.t_out))
        out = linear_transform(xs, m)
    if "TCN" not in disabled:
        tcn = temporal_avg_pool(
            tcn_conv(xs, w.tcn_kernels, w.tcn_bias, cfg.kernel_size, cfg.dilation),
            cfg.pool_window)
        if "CA" in disabled:
            gated = tcn
        else:
            gated = channel_attention(xs, w, lif, spiking, probe) * tcn
        out = gated if out is None else out + gated
    if out is None:
        raise ConfigError("no feature path left enabled")
    return out.reshape(b, cfg.n_channels, 1, cfg.t_out)
