"""Complex-valued layers built from paired real tensors.

A complex feature map is carried as :class:`ComplexTensor`, two real tensors
of identical shape ``[batch, channels, freq, time]``.  Convolutions follow the
product rule ``(Xr + jXi)(Wr + jWi)``, realized as one real convolution over
the channel-stacked input ``[Xr; Xi]`` with the block kernel
``[[Wr, -Wi], [Wi, Wr]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInput, ShapeError


class ComplexTensor(NamedTuple):
    real: torch.Tensor
    imag: torch.Tensor

    @property
    def shape(self):
        return self.real.shape

    def abs(self):
        return torch.sqrt(self.real**2 + self.imag**2)

    def cat(self, other: "ComplexTensor", dim: int = 1) -> "ComplexTensor":
        return ComplexTensor(
            torch.cat([self.real, other.real], dim), torch.cat([self.imag, other.imag], dim)
        )

    def map(self, fn) -> "ComplexTensor":
        return ComplexTensor(fn(self.real), fn(self.imag))

    @classmethod
    def from_complex(cls, z: torch.Tensor) -> "ComplexTensor":
        return cls(z.real.contiguous(), z.imag.contiguous())

    def to_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


@dataclass
class ComplexConvParams:
    """Kernel pair plus geometry.

    For forward convolution the kernels are ``[out_ch, in_ch, kh, kw]``; for the
    transposed form they follow the transposed layout ``[in_ch, out_ch, kh, kw]``.
    """

    w_real: torch.Tensor
    w_imag: torch.Tensor
    bias_real: torch.Tensor | None = None
    bias_imag: torch.Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.w_real.shape != self.w_imag.shape:
            raise ShapeError(
                f"real/imag kernels differ: {tuple(self.w_real.shape)} vs {tuple(self.w_imag.shape)}"
            )
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")


def _check_input(x: ComplexTensor):
    if x.real.shape != x.imag.shape:
        raise ShapeError(f"real/imag shapes differ: {tuple(x.real.shape)} vs {tuple(x.imag.shape)}")
    if x.real.dim() != 4:
        raise ShapeError(f"expected [batch, channels, freq, time], got {tuple(x.real.shape)}")


def _complex_bias(p: ComplexConvParams, out_ch: int, like: torch.Tensor):
    if p.bias_real is None and p.bias_imag is None:
        return None
    zeros = like.new_zeros(out_ch)
    br = p.bias_real if p.bias_real is not None else zeros
    bi = p.bias_imag if p.bias_imag is not None else zeros
    return torch.cat([br, bi])


def complex_conv2d(x: ComplexTensor, p: ComplexConvParams) -> ComplexTensor:
    _check_input(x)
    out_ch, in_ch, kh, kw = p.w_real.shape
    if x.real.shape[1] != in_ch:
        raise ShapeError(f"input has {x.real.shape[1]} channels, kernel expects {in_ch}")
    ph, pw = p.padding
    if x.real.shape[2] + 2 * ph < kh or x.real.shape[3] + 2 * pw < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{x.real.shape[2] + 2 * ph}x{x.real.shape[3] + 2 * pw}"
        )
    weight = torch.cat(
        [torch.cat([p.w_real, -p.w_imag], 1), torch.cat([p.w_imag, p.w_real], 1)], 0
    )
    out = F.conv2d(
        torch.cat([x.real, x.imag], 1),
        weight,
        _complex_bias(p, out_ch, x.real),
        stride=p.stride,
        padding=p.padding,
    )
    return ComplexTensor(out[:, :out_ch], out[:, out_ch:])


def complex_conv_transpose2d(x: ComplexTensor, p: ComplexConvParams) -> ComplexTensor:
    _check_input(x)
    in_ch, out_ch, kh, kw = p.w_real.shape
    if x.real.shape[1] != in_ch:
        raise ShapeError(f"input has {x.real.shape[1]} channels, kernel expects {in_ch}")
    ph, pw = p.padding
    sh, sw = p.stride
    h_out = (x.real.shape[2] - 1) * sh - 2 * ph + kh
    w_out = (x.real.shape[3] - 1) * sw - 2 * pw + kw
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"transposed convolution would produce empty output {h_out}x{w_out}")
    weight = torch.cat(
        [torch.cat([p.w_real, p.w_imag], 1), torch.cat([-p.w_imag, p.w_real], 1)], 0
    )
    out = F.conv_transpose2d(
        torch.cat([x.real, x.imag], 1),
        weight,
        _complex_bias(p, out_ch, x.real),
        stride=p.stride,
        padding=p.padding,
    )
    return ComplexTensor(out[:, :out_ch], out[:, out_ch:])


@dataclass
class ComplexBatchNormParams:
    """Per-channel statistics and affine terms; every field is a [C] tensor."""

    running_mean_r: torch.Tensor
    running_mean_i: torch.Tensor
    running_vrr: torch.Tensor
    running_vii: torch.Tensor
    running_vri: torch.Tensor
    gamma_rr: torch.Tensor
    gamma_ii: torch.Tensor
    gamma_ri: torch.Tensor
    beta_r: torch.Tensor
    beta_i: torch.Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise InvalidInput("batch-norm eps must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise InvalidInput("batch-norm momentum must lie in [0, 1]")


def inv_sqrt_2x2(vrr, vii, vri):
    """Inverse square root of symmetric positive-definite [[vrr, vri], [vri, vii]].

    Returns the three distinct entries (wrr, wii, wri).
    """
    s = torch.sqrt(vrr * vii - vri * vri)
    t = torch.sqrt(vrr + vii + 2.0 * s)
    inv = 1.0 / (s * t)
    return (vii + s) * inv, (vrr + s) * inv, -vri * inv


def complex_batch_norm(
    x: ComplexTensor, p: ComplexBatchNormParams, mode: str = "train"
) -> ComplexTensor:
    _check_input(x)
    c = x.real.shape[1]
    if p.gamma_rr.shape[0] != c:
        raise ShapeError(f"batch norm has {p.gamma_rr.shape[0]} channels, input has {c}")
    view = (1, c, 1, 1)
    if mode == "train":
        n = x.real.numel() // c
        if n < 2:
            raise InvalidInput("complex batch norm needs at least 2 values per channel in train mode")
        dims = (0, 2, 3)
        mr = x.real.mean(dims)
        mi = x.imag.mean(dims)
        cr = x.real - mr.view(view)
        ci = x.imag - mi.view(view)
        vrr = (cr * cr).mean(dims)
        vii = (ci * ci).mean(dims)
        vri = (cr * ci).mean(dims)
        with torch.no_grad():
            m = p.momentum
            for buf, val in (
                (p.running_mean_r, mr), (p.running_mean_i, mi),
                (p.running_vrr, vrr), (p.running_vii, vii), (p.running_vri, vri),
            ):
                buf.mul_(1.0 - m).add_(m * val.detach().to(buf.dtype))
    elif mode == "eval":
        mr, mi = p.running_mean_r, p.running_mean_i
        vrr, vii, vri = p.running_vrr, p.running_vii, p.running_vri
        cr = x.real - mr.view(view)
        ci = x.imag - mi.view(view)
    else:
        raise InvalidInput(f"mode must be 'train' or 'eval', got {mode!r}")

    wrr, wii, wri = inv_sqrt_2x2(vrr + p.eps, vii + p.eps, vri)
    wrr, wii, wri = wrr.view(view), wii.view(view), wri.view(view)
    xr = wrr * cr + wri * ci
    xi = wri * cr + wii * ci
    grr, gii, gri = p.gamma_rr.view(view), p.gamma_ii.view(view), p.gamma_ri.view(view)
    return ComplexTensor(
        grr * xr + gri * xi + p.beta_r.view(view),
        gri * xr + gii * xi + p.beta_i.view(view),
    )


def prelu(x: ComplexTensor, slope: torch.Tensor) -> ComplexTensor:
    """Real PReLU applied independently to the real and imaginary parts."""
    _check_input(x)
    if slope.dim() != 1 or slope.shape[0] != x.real.shape[1]:
        raise ShapeError(f"need one slope per channel ({x.real.shape[1]}), got {tuple(slope.shape)}")
    a = slope.view(1, -1, 1, 1)
    return ComplexTensor(
        torch.where(x.real >= 0, x.real, a * x.real),
        torch.where(x.imag >= 0, x.imag, a * x.imag),
    )


def _uniform(shape, fan_in, generator):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator) * 2.0 - 1.0) * bound


class ComplexConv2d(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, generator=None):
        super().__init__()
        kh, kw = _pair(kernel)
        fan_in = in_ch * kh * kw
        self.w_real = nn.Parameter(_uniform((out_ch, in_ch, kh, kw), fan_in, generator))
        self.w_imag = nn.Parameter(_uniform((out_ch, in_ch, kh, kw), fan_in, generator))
        if bias:
            self.b_real = nn.Parameter(torch.zeros(out_ch))
            self.b_imag = nn.Parameter(torch.zeros(out_ch))
        else:
            self.b_real = self.b_imag = None
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def params(self) -> ComplexConvParams:
        return ComplexConvParams(
            self.w_real, self.w_imag, self.b_real, self.b_imag, self.stride, self.padding
        )

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv2d(x, self.params())


class ComplexConvTranspose2d(ComplexConv2d):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, generator=None):
        nn.Module.__init__(self)
        kh, kw = _pair(kernel)
        fan_in = in_ch * kh * kw
        self.w_real = nn.Parameter(_uniform((in_ch, out_ch, kh, kw), fan_in, generator))
        self.w_imag = nn.Parameter(_uniform((in_ch, out_ch, kh, kw), fan_in, generator))
        if bias:
            self.b_real = nn.Parameter(torch.zeros(out_ch))
            self.b_imag = nn.Parameter(torch.zeros(out_ch))
        else:
            self.b_real = self.b_imag = None
        self.stride = _pair(stride)
        self.padding = _pair(padding)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_conv_transpose2d(x, self.params())


class ComplexBatchNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        root_half = 1.0 / math.sqrt(2.0)
        self.gamma_rr = nn.Parameter(torch.full((channels,), root_half))
        self.gamma_ii = nn.Parameter(torch.full((channels,), root_half))
        self.gamma_ri = nn.Parameter(torch.zeros(channels))
        self.beta_r = nn.Parameter(torch.zeros(channels))
        self.beta_i = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean_r", torch.zeros(channels))
        self.register_buffer("running_mean_i", torch.zeros(channels))
        self.register_buffer("running_vrr", torch.ones(channels))
        self.register_buffer("running_vii", torch.ones(channels))
        self.register_buffer("running_vri", torch.zeros(channels))

    def params(self) -> ComplexBatchNormParams:
        return ComplexBatchNormParams(
            self.running_mean_r, self.running_mean_i,
            self.running_vrr, self.running_vii, self.running_vri,
            self.gamma_rr, self.gamma_ii, self.gamma_ri, self.beta_r, self.beta_i,
            self.eps, self.momentum,
        )

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return complex_batch_norm(x, self.params(), "train" if self.training else "eval")


class ComplexPReLU(nn.Module):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.slope = nn.Parameter(torch.full((channels,), init))

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        return prelu(x, self.slope)
