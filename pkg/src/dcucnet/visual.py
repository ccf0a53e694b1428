"""Visual stream: DVID frame files, a reduced ResNet frame encoder, and
temporal upsampling of frame embeddings onto the audio frame grid."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, InvalidInput, ShapeError

DVID_MAGIC = b"DVID"
DVID_VERSION = 1
_DVID_HEADER = struct.Struct("<4sIIIIf")


@dataclass
class VideoFrames:
    frames: np.ndarray  # uint8 [num_frames, height, width]
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.dtype != np.uint8:
            raise InvalidInput(f"frames must be uint8 grayscale, got {self.frames.dtype}")
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"frames must be [num_frames>=1, height, width], got {self.frames.shape}")
        if not self.fps > 0:
            raise InvalidInput("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self) -> int:
        return self.num_frames

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


def write_dvid(path, video: VideoFrames) -> None:
    n, h, w = video.frames.shape
    header = _DVID_HEADER.pack(DVID_MAGIC, DVID_VERSION, n, h, w, video.fps)
    Path(path).write_bytes(header + np.ascontiguousarray(video.frames).tobytes())


def read_dvid(path) -> VideoFrames:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _DVID_HEADER.size:
        raise FormatError(f"{path}: truncated DVID header")
    magic, version, n, h, w, fps = _DVID_HEADER.unpack_from(blob)
    if magic != DVID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {DVID_MAGIC!r}")
    if version != DVID_VERSION:
        raise FormatError(f"{path}: unsupported DVID version {version}")
    payload = blob[_DVID_HEADER.size :]
    if len(payload) != n * h * w:
        raise FormatError(f"{path}: expected {n * h * w} frame bytes, found {len(payload)}")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w).copy()
    return VideoFrames(frames, float(fps))


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu2 = nn.ReLU()
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            # shape change: 1x1 projection instead of identity
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        h = self.relu1(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return self.relu2(h + skip)


class VisualFrontend(nn.Module):
    """Per-frame encoder: stem conv, residual stages, global pooling, linear head.

    Input ``[..., height, width]`` uint8 or float in [0, 255]; output ``[..., embed_dim]``.
    """

    def __init__(self, embed_dim=32, channels=(16, 32), frame_size=(32, 32)):
        super().__init__()
        self.frame_size = tuple(frame_size)
        self.embed_dim = embed_dim
        self.stem = nn.Sequential(
            nn.Conv2d(1, channels[0], 3, 1, 1, bias=False), nn.BatchNorm2d(channels[0]), nn.ReLU()
        )
        stages, prev = [], channels[0]
        for i, ch in enumerate(channels):
            stages.append(BasicBlock(prev, ch, stride=1 if i == 0 else 2))
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(prev, embed_dim)

    def forward(self, frames):
        if tuple(frames.shape[-2:]) != self.frame_size:
            raise ShapeError(f"frames are {tuple(frames.shape[-2:])}, encoder expects {self.frame_size}")
        lead = frames.shape[:-2]
        dtype = self.head.weight.dtype
        x = frames.reshape(-1, 1, *self.frame_size).to(dtype) / 255.0
        h = self.stages(self.stem(x))
        return self.head(h.mean(dim=(2, 3))).reshape(*lead, self.embed_dim)


def encode_frames(video: VideoFrames, frontend: VisualFrontend) -> torch.Tensor:
    """[num_frames, embed_dim] embedding of a frame stack."""
    return frontend(torch.from_numpy(video.frames))


def upsample_index(source: int, target: int) -> np.ndarray:
    """Nearest-neighbour source row for each target row: floor(t * source / target)."""
    return (np.arange(target) * source) // target


def temporal_upsample(e: torch.Tensor, target_frames: int, mode: str = "nearest") -> torch.Tensor:
    """Stretch ``e`` of shape [..., frames, dim] along the frame axis to target_frames rows."""
    source = e.shape[-2]
    if source < 1:
        raise InvalidInput("embedding has no frames")
    if target_frames < source:
        raise InvalidInput(f"cannot downsample {source} frames to {target_frames}")
    if mode == "nearest":
        idx = torch.from_numpy(upsample_index(source, target_frames))
        return e.index_select(-2, idx)
    if mode == "linear":
        pos = (torch.arange(target_frames, dtype=torch.float64) + 0.5) * source / target_frames - 0.5
        pos = pos.clamp(0, source - 1)
        lo = pos.floor().long()
        hi = torch.clamp(lo + 1, max=source - 1)
        frac = (pos - lo).to(e.dtype).unsqueeze(-1)
        return e.index_select(-2, lo) * (1 - frac) + e.index_select(-2, hi) * frac
    raise InvalidInput(f"unknown upsampling mode {mode!r}")
