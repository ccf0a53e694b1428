"""Complex-valued masking network with conformer audio-visual fusion.

Pipeline for one utterance::

    waveform --ConvSTFT--> X --5 x [cconv, cBN, PReLU]--> latent (+ skips)
    frames --ResNet--> embeddings --upsample--> aligned with latent frames
    concat(latent.real flattened, embeddings) --proj--> conformers --proj--> latent.real'
    (latent.real', latent.imag) --5 x [concat skip, cconvT, cBN, PReLU]--> mask M
    X * M --ConviSTFT--> enhanced waveform
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .complex_nn import (
    ComplexBatchNorm2d,
    ComplexConv2d,
    ComplexConvTranspose2d,
    ComplexPReLU,
    ComplexTensor,
)
from .conformer import Conformer, ConformerConfig
from .dsp.stft import ConvISTFT, ConvSTFT, Spectrogram, StftConfig, Waveform, num_frames
from .errors import ConfigMismatch, InvalidInput, ShapeError
from .visual import VideoFrames, VisualFrontend, temporal_upsample


@dataclass(frozen=True)
class ModelConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    kernel: tuple[int, ...] = (5, 2)
    stride: tuple[int, ...] = (2, 1)
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    visual_embed_dim: int = 32
    visual_channels: tuple[int, ...] = (16, 32)
    frame_size: tuple[int, ...] = (32, 32)
    fps: float = 25.0
    upsample_mode: str = "nearest"
    use_visual: bool = True
    mask_bound: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.encoder_channels) < 1:
            raise ConfigMismatch("need at least one encoder block")
        if len(self.kernel) != 2 or len(self.stride) != 2:
            raise ConfigMismatch("kernel and stride are (freq, time) pairs")
        if self.kernel[0] % 2 == 0:
            raise ConfigMismatch("frequency kernel size must be odd")
        if self.stride[1] != 1:
            raise ConfigMismatch("time stride must be 1 to keep audio and video frames aligned")
        if self.mask_bound is not None and self.mask_bound <= 0:
            raise ConfigMismatch("mask_bound must be positive (or none for an unbounded mask)")
        if self.upsample_mode not in ("nearest", "linear"):
            raise ConfigMismatch(f"unknown upsample_mode {self.upsample_mode!r}")

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_channels[:-1])) + (1,)

    def freq_sizes(self) -> list[int]:
        """Frequency extent at the input of the encoder and after each block."""
        sizes = [self.stft.freq_bins]
        kh, sh = self.kernel[0], self.stride[0]
        for _ in self.encoder_channels:
            sizes.append((sizes[-1] + 2 * (kh // 2) - kh) // sh + 1)
        return sizes

    @property
    def latent_features(self) -> int:
        return self.encoder_channels[-1] * self.freq_sizes()[-1]


def micro_config(**overrides) -> ModelConfig:
    """Tiny topology for gradient checks and fast tests (9 frequency bins)."""
    base = ModelConfig(
        stft=StftConfig(win_length=12, hop_length=4, fft_length=16, sample_rate=16000),
        encoder_channels=(2, 3),
        conformer=ConformerConfig(model_dim=8, num_heads=2, ffn_expansion=2, conv_kernel=3, num_blocks=1),
        visual_embed_dim=4,
        visual_channels=(2,),
        frame_size=(8, 8),
        fps=4000.0,
    )
    return dataclasses.replace(base, **overrides)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, generator=None):
        super().__init__()
        self.kernel = kernel
        self.conv = ComplexConv2d(in_ch, out_ch, kernel, stride, 0, generator=generator)
        self.bn = ComplexBatchNorm2d(out_ch)
        self.act = ComplexPReLU(out_ch)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        kh, kw = self.kernel
        # symmetric in frequency, causal in time
        x = x.map(lambda t: F.pad(t, (kw - 1, 0, kh // 2, kh // 2)))
        return self.act(self.bn(self.conv(x)))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, last=False, generator=None):
        super().__init__()
        self.kernel = kernel
        self.conv = ComplexConvTranspose2d(in_ch, out_ch, kernel, stride, (kernel[0] // 2, 0), generator=generator)
        self.last = last
        if not last:
            self.bn = ComplexBatchNorm2d(out_ch)
            self.act = ComplexPReLU(out_ch)

    def forward(self, x: ComplexTensor, freq_out: int) -> ComplexTensor:
        frames = x.real.shape[-1]
        y = self.conv(x)
        y = y.map(lambda t: _fit_freq(t[..., :frames], freq_out))
        if self.last:
            return y
        return self.act(self.bn(y))


def _fit_freq(t, size):
    have = t.shape[-2]
    if have >= size:
        return t[..., :size, :]
    return F.pad(t, (0, 0, 0, size - have))


def bound_mask(m: ComplexTensor, bound: float | None) -> ComplexTensor:
    """Squash the mask magnitude with ``bound * tanh(|m| / bound)``, keeping phase."""
    if bound is None:
        return m
    mag = torch.sqrt(m.real**2 + m.imag**2 + 1e-24)
    # keep the result at or under the bound after rounding
    squash = torch.tanh(mag / bound).clamp(max=1.0 - 4 * torch.finfo(mag.dtype).eps)
    scale = bound * squash / mag
    return ComplexTensor(m.real * scale, m.imag * scale)


def apply_mask(x: ComplexTensor, m: ComplexTensor) -> ComplexTensor:
    if x.real.shape != m.real.shape:
        raise ShapeError(f"mask {tuple(m.real.shape)} does not match spectrum {tuple(x.real.shape)}")
    return ComplexTensor(
        x.real * m.real - x.imag * m.imag,
        x.real * m.imag + x.imag * m.real,
    )


def apply_mask_spectrogram(noisy: Spectrogram, mask: np.ndarray) -> Spectrogram:
    mask = np.asarray(mask)
    if mask.shape != noisy.data.shape:
        raise ShapeError(f"mask {mask.shape} does not match spectrogram {noisy.data.shape}")
    return Spectrogram(noisy.data * mask, noisy.config, noisy.length)


class DCUCNet(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = cfg = config
        gen = torch.Generator().manual_seed(cfg.seed)
        torch_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)  # nn.Linear / nn.Conv default initializers draw from here
        try:
            self.stft = ConvSTFT(cfg.stft)
            self.istft = ConvISTFT(cfg.stft)
            kernel, stride = tuple(cfg.kernel), tuple(cfg.stride)
            chans = (1,) + tuple(cfg.encoder_channels)
            self.encoder = nn.ModuleList(
                EncoderBlock(chans[i], chans[i + 1], kernel, stride, gen)
                for i in range(len(cfg.encoder_channels))
            )
            dec_in = list(reversed(cfg.encoder_channels))
            dec_out = cfg.decoder_channels
            n = len(dec_out)
            self.decoder = nn.ModuleList(
                DecoderBlock(2 * dec_in[i], dec_out[i], kernel, stride, last=i == n - 1, generator=gen)
                for i in range(n)
            )
            self.visual = VisualFrontend(cfg.visual_embed_dim, cfg.visual_channels, cfg.frame_size)
            d = cfg.conformer.model_dim
            self.fuse_in = nn.Linear(cfg.latent_features + cfg.visual_embed_dim, d)
            self.conformer = Conformer(cfg.conformer)
            self.fuse_out = nn.Linear(d, cfg.latent_features)
        finally:
            torch.random.set_rng_state(torch_state)

    # -- stages -------------------------------------------------------------

    def encode(self, x: ComplexTensor):
        """Returns (latent, skips); skips[i] is the output of encoder block i."""
        if x.real.shape[1:3] != (1, self.config.stft.freq_bins):
            raise ShapeError(
                f"expected [batch, 1, {self.config.stft.freq_bins}, frames], got {tuple(x.real.shape)}"
            )
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        return x, skips

    def embed_video(self, frames: torch.Tensor, audio_frames: int) -> torch.Tensor:
        """[B, N, H, W] frames -> [B, audio_frames, embed_dim] aligned embeddings."""
        if not self.config.use_visual:
            return frames.new_zeros(
                (frames.shape[0], audio_frames, self.config.visual_embed_dim),
                dtype=self.fuse_in.weight.dtype,
            )
        e = self.visual(frames)
        return temporal_upsample(e, audio_frames, self.config.upsample_mode)

    def fuse(self, latent: ComplexTensor, visual: torch.Tensor) -> ComplexTensor:
        b, c, f, t = latent.real.shape
        if visual.dim() != 3 or visual.shape[0] != b or visual.shape[1] != t:
            raise InvalidInput(
                f"visual embedding {tuple(visual.shape)} not aligned with {t} latent frames; "
                "upsample it first"
            )
        audio = latent.real.permute(0, 3, 1, 2).reshape(b, t, c * f)
        h = self.fuse_in(torch.cat([audio, visual], dim=-1))
        h = self.fuse_out(self.conformer(h))
        real = h.reshape(b, t, c, f).permute(0, 2, 3, 1)
        return ComplexTensor(real, latent.imag)

    def decode(self, fused: ComplexTensor, skips) -> ComplexTensor:
        if len(skips) != len(self.decoder):
            raise ShapeError(f"expected {len(self.decoder)} skips, got {len(skips)}")
        sizes = self.config.freq_sizes()
        h = fused
        for i, block in enumerate(self.decoder):
            skip = skips[-1 - i]
            if skip.real.shape[0] != h.real.shape[0] or skip.real.shape[2:] != h.real.shape[2:]:
                raise ShapeError(
                    f"skip {tuple(skip.real.shape)} does not match decoder input {tuple(h.real.shape)}"
                )
            h = block(h.cat(skip), sizes[-2 - i])
        return bound_mask(h, self.config.mask_bound)

    # -- end to end ---------------------------------------------------------

    def estimate_mask(self, spec: ComplexTensor, frames: torch.Tensor) -> ComplexTensor:
        latent, skips = self.encode(spec)
        visual = self.embed_video(frames, spec.real.shape[-1])
        return self.decode(self.fuse(latent, visual), skips)

    def forward(self, noisy: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """[B, N] waveforms and [B, num_frames, H, W] video -> [B, N] enhanced waveforms."""
        re, im = self.stft(noisy.to(self.fuse_in.weight.dtype))
        spec = ComplexTensor(re[:, None], im[:, None])
        mask = self.estimate_mask(spec, frames)
        out = apply_mask(spec, mask)
        return self.istft(out.real[:, 0], out.imag[:, 0], noisy.shape[-1])


def identity_mask_model(config: ModelConfig = ModelConfig()) -> DCUCNet:
    """Model whose decoder emits the mask 1+0j everywhere (unbounded, zero final kernel)."""
    model = DCUCNet(dataclasses.replace(config, mask_bound=None))
    last = model.decoder[-1].conv
    with torch.no_grad():
        last.w_real.zero_()
        last.w_imag.zero_()
        last.b_real.fill_(1.0)
        last.b_imag.zero_()
    return model


def check_durations(noisy: Waveform, video: VideoFrames) -> None:
    gap = abs(noisy.duration - video.duration)
    if gap > 1.0 / video.fps + 1e-9:
        raise InvalidInput(
            f"audio lasts {noisy.duration:.4f} s but video lasts {video.duration:.4f} s "
            f"(tolerance one frame, {1.0 / video.fps:.4f} s)"
        )


def enhance(noisy: Waveform, video: VideoFrames, model: DCUCNet) -> Waveform:
    cfg = model.config
    if noisy.sample_rate != cfg.stft.sample_rate:
        raise ConfigMismatch(f"waveform is {noisy.sample_rate} Hz, model expects {cfg.stft.sample_rate} Hz")
    check_durations(noisy, video)
    dtype = model.fuse_in.weight.dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(noisy.samples).to(dtype)[None]
            frames = torch.from_numpy(video.frames)[None]
            y = model(x, frames)[0]
    finally:
        model.train(was_training)
    return Waveform(y.double().numpy(), noisy.sample_rate)


def expected_frames(length: int, cfg: ModelConfig) -> int:
    return num_frames(length, cfg.stft)
