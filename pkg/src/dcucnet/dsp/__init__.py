from .stft import (
    ConvSTFT,
    ConvISTFT,
    Spectrogram,
    StftConfig,
    Waveform,
    conv_istft,
    conv_stft,
    make_window,
    num_frames,
)
from .wavio import read_wav, write_wav

__all__ = [
    "ConvSTFT",
    "ConvISTFT",
    "Spectrogram",
    "StftConfig",
    "Waveform",
    "conv_istft",
    "conv_stft",
    "make_window",
    "num_frames",
    "read_wav",
    "write_wav",
]
