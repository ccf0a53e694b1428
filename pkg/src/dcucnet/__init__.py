"""Audio-visual speech enhancement with complex ratio masks and conformer fusion."""

__version__ = "0.1.0"

from .complex_nn import ComplexTensor
from .dsp import Spectrogram, StftConfig, Waveform, conv_istft, conv_stft, read_wav, write_wav
from .model import DCUCNet, ModelConfig, enhance, identity_mask_model, micro_config
from .visual import VideoFrames, read_dvid, write_dvid

__all__ = [
    "ComplexTensor",
    "DCUCNet",
    "ModelConfig",
    "Spectrogram",
    "StftConfig",
    "VideoFrames",
    "Waveform",
    "conv_istft",
    "conv_stft",
    "enhance",
    "identity_mask_model",
    "micro_config",
    "read_dvid",
    "read_wav",
    "write_dvid",
    "write_wav",
]
