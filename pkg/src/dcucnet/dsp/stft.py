"""Short-time Fourier analysis and synthesis as strided 1-D convolutions.

The forward transform convolves the reflect-padded waveform with a bank of
windowed DFT kernels (one real and one imaginary kernel per one-sided bin).
The inverse applies the transposed bank, multiplies by the synthesis window
and divides by the summed window product so that any hop/window pair whose
overlap never vanishes reconstructs exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigMismatch, InvalidInput, ShapeError, SynthesisError

WINDOW_KINDS = ("hann", "sqrt_hann")


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 400
    hop_length: int = 160
    fft_length: int = 512
    window_kind: str = "sqrt_hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if not 1 <= self.hop_length <= self.win_length <= self.fft_length:
            raise ConfigMismatch(
                "need hop_length <= win_length <= fft_length, got "
                f"{self.hop_length}/{self.win_length}/{self.fft_length}"
            )
        if self.fft_length & (self.fft_length - 1):
            raise ConfigMismatch(f"fft_length must be a power of two, got {self.fft_length}")
        if self.window_kind not in WINDOW_KINDS:
            raise ConfigMismatch(f"unknown window_kind {self.window_kind!r}")
        if self.sample_rate <= 0:
            raise ConfigMismatch("sample_rate must be positive")

    @property
    def freq_bins(self) -> int:
        return self.fft_length // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length // 2

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_length


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInput("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInput("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """One-sided complex spectrogram, shape [freq_bins, frames]."""

    data: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None  # analysed signal length, needed to trim synthesis

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[0] != self.config.freq_bins:
            raise ShapeError(
                f"spectrogram must be [{self.config.freq_bins}, frames], got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidInput("spectrogram contains non-finite entries")

    @property
    def frames(self) -> int:
        return self.data.shape[1]


def make_window(cfg: StftConfig) -> np.ndarray:
    """Periodic Hann (or its square root) of length win_length."""
    n = np.arange(cfg.win_length)
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.win_length)
    if cfg.window_kind == "sqrt_hann":
        return np.sqrt(hann)
    return hann


def num_frames(length: int, cfg: StftConfig) -> int:
    return (length + 2 * cfg.pad - cfg.win_length) // cfg.hop_length + 1


def _analysis_kernels(cfg: StftConfig) -> np.ndarray:
    # rows 0..F-1 real part, F..2F-1 imaginary part of w[n] e^{-j 2 pi k n / N}
    n = np.arange(cfg.win_length)
    k = np.arange(cfg.freq_bins)[:, None]
    phase = 2.0 * np.pi * k * n / cfg.fft_length
    w = make_window(cfg)
    return np.concatenate([np.cos(phase) * w, -np.sin(phase) * w])[:, None, :]


def _synthesis_kernels(cfg: StftConfig) -> np.ndarray:
    # one-sided inverse DFT restricted to the first win_length samples, times synthesis window
    n = np.arange(cfg.win_length)
    k = np.arange(cfg.freq_bins)[:, None]
    phase = 2.0 * np.pi * k * n / cfg.fft_length
    scale = np.full((cfg.freq_bins, 1), 2.0)
    scale[0] = 1.0
    scale[-1] = 1.0
    scale /= cfg.fft_length
    w = make_window(cfg)
    return np.concatenate([scale * np.cos(phase) * w, -scale * np.sin(phase) * w])[:, None, :]


class ConvSTFT(nn.Module):
    """Waveform batch [B, N] -> (real, imag) each [B, F, T]."""

    def __init__(self, cfg: StftConfig = StftConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("kernels", torch.from_numpy(_analysis_kernels(cfg)), persistent=False)

    def forward(self, x):
        cfg = self.cfg
        if x.shape[-1] <= cfg.pad:
            raise InvalidInput(
                f"signal of {x.shape[-1]} samples is too short to reflect-pad by {cfg.pad}"
            )
        x = F.pad(x[:, None, :], (cfg.pad, cfg.pad), mode="reflect")
        out = F.conv1d(x, self.kernels.to(x.dtype), stride=cfg.hop_length)
        return out[:, : cfg.freq_bins], out[:, cfg.freq_bins :]


class ConvISTFT(nn.Module):
    """(real, imag) each [B, F, T] -> waveform batch [B, length]."""

    def __init__(self, cfg: StftConfig = StftConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("kernels", torch.from_numpy(_synthesis_kernels(cfg)), persistent=False)
        w = make_window(cfg)
        self.register_buffer("wsq", torch.from_numpy(w * w)[None, None, :], persistent=False)

    def forward(self, real, imag, length: int):
        cfg = self.cfg
        frames = real.shape[-1]
        if length is None:
            length = (frames - 1) * cfg.hop_length
        spec = torch.cat([real, imag], dim=1)
        y = F.conv_transpose1d(spec, self.kernels.to(spec.dtype), stride=cfg.hop_length)
        ones = torch.ones(1, 1, frames, dtype=spec.dtype, device=spec.device)
        denom = F.conv_transpose1d(ones, self.wsq.to(spec.dtype), stride=cfg.hop_length)
        start, stop = cfg.pad, cfg.pad + length
        if stop > y.shape[-1]:
            raise ShapeError(f"{frames} frames cannot cover a {length}-sample signal")
        denom = denom[..., start:stop]
        if torch.any(denom < 1e-10):
            raise SynthesisError(
                "overlap-add window sum vanishes inside the output; "
                f"window {cfg.window_kind!r} with hop {cfg.hop_length} is not invertible"
            )
        return (y[..., start:stop] / denom)[:, 0]


def conv_stft(x: Waveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    if len(x) == 0:
        raise InvalidInput("cannot analyse an empty waveform")
    if x.sample_rate != cfg.sample_rate:
        raise ConfigMismatch(f"waveform is {x.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    with torch.no_grad():
        re, im = ConvSTFT(cfg)(torch.from_numpy(x.samples)[None])
    data = re[0].numpy() + 1j * im[0].numpy()
    return Spectrogram(data, cfg, length=len(x))


def conv_istft(s: Spectrogram, length: int | None = None) -> Waveform:
    cfg = s.config
    if length is None:
        length = s.length if s.length is not None else (s.frames - 1) * cfg.hop_length
    re = torch.from_numpy(np.ascontiguousarray(s.data.real))[None]
    im = torch.from_numpy(np.ascontiguousarray(s.data.imag))[None]
    with torch.no_grad():
        y = ConvISTFT(cfg)(re, im, length)
    return Waveform(y[0].numpy(), cfg.sample_rate)
