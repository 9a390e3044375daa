"""State-space image denoiser.

A U-shaped encoder/bottleneck/decoder of dual scan blocks. Each dual block
applies, with pre-norm residuals, a global gated scan (sequences over the
whole feature map), a local gated scan (sequences inside non-overlapping
windows), and a gated feed-forward network. The two scan blocks share one
architecture and differ only in how the map is unfolded into sequences.

The denoiser consumes the current iterate together with a scalar noise-level
plane and returns the iterate plus a learned residual, so zero weights make
it an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import ssm
from .autodiff import ShapeError, Tensor


class NetworkError(Exception):
    pass


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    v = rng.standard_normal(shape) * std
    while np.any(np.abs(v) > 2 * std):
        bad = np.abs(v) > 2 * std
        v[bad] = rng.standard_normal(int(bad.sum())) * std
    return v.astype(dtype)


class Module:
    """Minimal container: walks attributes to collect named parameters."""

    def named_params(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            out.extend(_collect(val, path))
        return out

    def params(self):
        ps = []
        for name, t in self.named_params():
            t.name = name
            ps.append(t)
        return ps

    def param_count(self):
        return int(sum(t.data.size for _, t in self.named_params()))


def _collect(val, path):
    if isinstance(val, Tensor):
        return [(path, val)] if val.requires_grad else []
    if isinstance(val, Module):
        return val.named_params(path)
    if isinstance(val, ssm.SsmParams):
        return val.named(path)
    if isinstance(val, (list, tuple)):
        out = []
        for i, item in enumerate(val):
            out.extend(_collect(item, f"{path}.{i}"))
        return out
    return []


class Dense(Module):
    """Pointwise projection on the channel (last) axis."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype),
                        requires_grad=True)
        self.b = (Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
                  if bias else None)

    def __call__(self, x):
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y


class Conv(Module):
    def __init__(self, k, c_in, c_out, rng, stride=1, padding=0,
                 dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (k, k, c_in, c_out), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride,
                         padding=self.padding)


class DepthwiseConv(Module):
    def __init__(self, k, channels, rng, dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (k, k, channels), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.padding = (k - 1) // 2

    def __call__(self, x):
        return ad.depthwise_conv2d(x, self.w, self.b, padding=self.padding)


class TransposedConv(Module):
    def __init__(self, k, c_in, c_out, rng, stride=2, dtype=np.float32):
        self.w = Tensor(trunc_normal(rng, (k, k, c_in, c_out), dtype=dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return ad.transposed_conv2d(x, self.w, self.b, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.layernorm(x, self.gamma, self.beta)


@dataclass
class DhmConfig:
    """Denoiser hyperparameters.

    state_dim None means the state dimension tracks the channel count of
    each pyramid level. scan_impl "auto" picks the parallel kernel for long
    sequences and the direct loop for short ones.
    """

    base_channels: int = 28
    window: int = 8
    enc_depth: int = 2
    bottleneck_depth: int = 1
    state_dim: int | None = None
    variant: str = "full"
    block_order: str = "gs_ls"
    share_scan_params: bool = False
    scan_impl: str = "auto"
    dtype: str = "float32"

    def __post_init__(self):
        if self.base_channels < 1 or self.window < 1:
            raise NetworkError("base_channels and window must be >= 1")
        if self.enc_depth < 1 or self.bottleneck_depth < 1:
            raise NetworkError("encoder and bottleneck depths must be >= 1")
        if self.variant not in ("full", "light"):
            raise NetworkError(f"unknown variant {self.variant!r}")
        if self.block_order not in ("gs_ls", "ls_gs"):
            raise NetworkError(f"unknown block order {self.block_order!r}")
        if self.scan_impl not in ("auto", "seq", "par"):
            raise NetworkError(f"unknown scan implementation {self.scan_impl!r}")
        if self.dtype not in ("float32", "float64"):
            raise NetworkError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def pad_multiple(self):
        return self.window * 2 ** self.enc_depth


def light_config(config: DhmConfig) -> DhmConfig:
    """Variant that drops the local scan path from every dual block."""
    return replace(config, variant="light")


def _scan_mode_for(impl, length):
    if impl == "auto":
        return "par" if length >= 32 else "seq"
    return impl


class GateBlock(Module):
    """Gated selective-scan block over global or windowed sequences.

    Upper branch: depthwise conv, pointwise projection, SiLU, then the
    four-direction scan; its merged output is layer-normalized and gated by
    the SiLU lower branch before the output projection.
    """

    def __init__(self, dim, state_dim, mode, window, rng, share_dirs=False,
                 scan_impl="auto", dtype=np.float32):
        self.mode = mode
        self.window = window
        self.scan_impl = scan_impl
        self.dw = DepthwiseConv(3, dim, rng, dtype=dtype)
        self.proj_up = Dense(dim, dim, rng, dtype=dtype)
        self.proj_low = Dense(dim, dim, rng, dtype=dtype)
        self.proj_out = Dense(dim, dim, rng, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        n_dirs = 1 if share_dirs else 4
        self.dirs = [ssm.SsmParams.create(dim, state_dim, rng, dtype=dtype)
                     for _ in range(n_dirs)]

    def _dir_params(self, u):
        return self.dirs[0] if len(self.dirs) == 1 else self.dirs[u]

    def scan_stage(self, upper):
        """Four-direction scan of already-encoded features; pre-gate output."""
        h, w, _ = upper.shape
        seqs = ssm.cross_scan(upper, mode=self.mode, n=self.window)
        mode = _scan_mode_for(self.scan_impl, seqs[0].shape[1])
        ys = ssm.scan_four_directions(
            seqs, [self._dir_params(u) for u in range(4)], mode=mode)
        return ssm.cross_merge(ys, h, w, mode=self.mode, n=self.window)

    def __call__(self, f):
        upper = ad.silu(self.proj_up(self.dw(f)))
        lower = ad.silu(self.proj_low(f))
        merged = self.scan_stage(upper)
        return self.proj_out(ad.mul(self.norm(merged), lower))


class GatedFeedForward(Module):
    """Pointwise expansion gated by GELU, with a depthwise spatial mix."""

    def __init__(self, dim, rng, expansion=2, dtype=np.float32):
        hidden = dim * expansion
        self.proj_gate = Dense(dim, hidden, rng, dtype=dtype)
        self.proj_val = Dense(dim, hidden, rng, dtype=dtype)
        self.dw = DepthwiseConv(3, hidden, rng, dtype=dtype)
        self.proj_out = Dense(hidden, dim, rng, dtype=dtype)

    def __call__(self, f):
        gate = ad.gelu(self.proj_gate(f))
        val = self.dw(self.proj_val(f))
        return self.proj_out(ad.mul(gate, val))


class DualBlock(Module):
    """Pre-norm residual stack: global scan, local scan, feed-forward."""

    def __init__(self, dim, state_dim, config, rng):
        dt = config.np_dtype
        self.order = config.block_order
        self.norm_a = LayerNorm(dim, dtype=dt)
        self.block_a = GateBlock(
            dim, state_dim, "global" if self.order == "gs_ls" else "local",
            config.window, rng, share_dirs=config.share_scan_params,
            scan_impl=config.scan_impl, dtype=dt)
        if config.variant == "light":
            self.norm_b = None
            self.block_b = None
        else:
            self.norm_b = LayerNorm(dim, dtype=dt)
            self.block_b = GateBlock(
                dim, state_dim, "local" if self.order == "gs_ls" else "global",
                config.window, rng, share_dirs=config.share_scan_params,
                scan_impl=config.scan_impl, dtype=dt)
        self.norm_ffn = LayerNorm(dim, dtype=dt)
        self.ffn = GatedFeedForward(dim, rng, dtype=dt)

    def __call__(self, f):
        f = ad.add(f, self.block_a(self.norm_a(f)))
        if self.block_b is not None:
            f = ad.add(f, self.block_b(self.norm_b(f)))
        return ad.add(f, self.ffn(self.norm_ffn(f)))


class Denoiser(Module):
    """U-shaped dual-scan denoiser with a residual output head."""

    def __init__(self, bands, config: DhmConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        dt = config.np_dtype
        self.bands = bands
        self.config = config
        c = config.base_channels
        dims = [c * 2 ** i for i in range(config.enc_depth + 1)]
        sd = lambda dim: config.state_dim if config.state_dim else dim

        self.in_conv = Conv(3, bands + 1, c, rng, padding=1, dtype=dt)
        self.enc_blocks = [DualBlock(d, sd(d), config, rng)
                           for d in dims[:-1]]
        self.downs = [Conv(3, d, d * 2, rng, stride=2, padding=1, dtype=dt)
                      for d in dims[:-1]]
        self.bottleneck = [DualBlock(dims[-1], sd(dims[-1]), config, rng)
                           for _ in range(config.bottleneck_depth)]
        self.ups = [TransposedConv(2, d * 2, d, rng, stride=2, dtype=dt)
                    for d in reversed(dims[:-1])]
        self.fuses = [Dense(d * 2, d, rng, dtype=dt)
                      for d in reversed(dims[:-1])]
        self.dec_blocks = [DualBlock(d, sd(d), config, rng)
                           for d in reversed(dims[:-1])]
        self.out_conv = Conv(3, c, bands, rng, padding=1, dtype=dt)

    def denoise(self, x, rho):
        """One restoration pass: (H, W*, bands) plus scalar noise level."""
        x = ad.as_tensor(x)
        if x.data.ndim != 3 or x.shape[2] != self.bands:
            raise ShapeError(f"denoiser expects (H, W*, {self.bands}), got "
                             f"{x.shape}")
        rho = ad.as_tensor(rho)
        if rho.data.size != 1:
            raise NetworkError(f"noise level must be scalar, got shape "
                               f"{rho.shape}")
        if float(rho.data.reshape(-1)[0]) <= 0:
            raise NetworkError("noise level must be positive")

        h, w, _ = x.shape
        plane = ad.broadcast_to(ad.reshape(rho, (1, 1, 1)), (h, w, 1))
        f = ad.concat([x, plane], axis=2)

        m = self.config.pad_multiple
        ph = (m - h % m) % m
        pw = (m - w % m) % m
        if ph or pw:
            f = ad.pad(f, ((0, ph), (0, pw), (0, 0)))

        f = self.in_conv(f)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            f = block(f)
            skips.append(f)
            f = down(f)
        for block in self.bottleneck:
            f = block(f)
        for up, fuse, block, skip in zip(self.ups, self.fuses,
                                         self.dec_blocks, reversed(skips)):
            f = up(f)
            f = fuse(ad.concat([f, skip], axis=2))
            f = block(f)
        fz = self.out_conv(f)
        if ph or pw:
            fz = ad.slice_nd(fz, (slice(0, h), slice(0, w)))
        return ad.add(x, fz)

    __call__ = denoise
