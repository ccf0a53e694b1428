"""16-bit PCM mono WAV I/O on top of the stdlib ``wave`` module."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .stft import Waveform

SAMPLE_RATE = 16000


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            raw = f.readframes(f.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV header") from exc
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if channels != 1:
        raise FormatError(f"{path}: expected mono, got {channels} channels")
    if expected_rate is not None and rate != expected_rate:
        raise FormatError(f"{path}: expected {expected_rate} Hz, got {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, x: Waveform) -> None:
    """Clamp to [-1, 1] and quantize to 16-bit little-endian PCM."""
    samples = np.clip(x.samples, -1.0, 1.0)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(x.sample_rate)
        f.writeframes(pcm.tobytes())
