"""Blind room-impulse-response estimation and acoustic matching.

The package estimates a full time-domain room impulse response from a few
seconds of reverberant speech and re-applies it to dry audio with a single
convolution.  Everything runs on numpy; training uses a small bundled
reverse-mode differentiation engine.
"""

__version__ = "0.1.0"

from .autograd import Tensor
from .dsp import AudioBuffer, FirFilter, Spectrogram, fft_convolve, stft_magnitude
from .metrics import AcousticParams, StftLossConfig, analyze_rir, stft_loss, stft_loss_value
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, fit

__all__ = [
    "AcousticParams",
    "AudioBuffer",
    "FirFilter",
    "ModelConfig",
    "Spectrogram",
    "StftLossConfig",
    "Tensor",
    "TrainConfig",
    "analyze_rir",
    "fft_convolve",
    "fit",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "stft_loss",
    "stft_loss_value",
    "stft_magnitude",
    "__version__",
]
