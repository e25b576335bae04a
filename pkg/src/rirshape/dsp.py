"""Pure signal-processing primitives: FFT convolution, STFT magnitudes,
windowed-sinc filter bank design, seeded noise.

Everything here is a pure function of its arguments (seeds included), uses
64-bit arithmetic internally, and carries no state, so any routine may be
called concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 48000


@dataclass
class AudioBuffer:
    """Mono sample sequence plus its sample rate.

    Samples are dimensionless amplitudes, nominally within [-1, 1] although
    intermediate products (convolutions, unnormalized synthesis) may exceed
    that range.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioBuffer requires a 1-D sample array, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Non-negative STFT magnitudes, shape (frames, bins)."""

    magnitudes: np.ndarray
    frame_size: int
    hop_size: int

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.ndim != 2:
            raise ValueError("magnitudes must be 2-D (frames, bins)")
        if self.magnitudes.shape[1] != self.frame_size // 2 + 1:
            raise ValueError(
                f"bin count {self.magnitudes.shape[1]} inconsistent with frame_size {self.frame_size}"
            )

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[0]


@dataclass
class FirFilter:
    """FIR filter described by its coefficient sequence (length order+1)."""

    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 1:
            raise ValueError("coefficients must be 1-D")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")

    @property
    def order(self) -> int:
        return self.coefficients.size - 1


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def fft_convolve(a: AudioBuffer, b: AudioBuffer, mode: str = "full") -> AudioBuffer:
    """Linear convolution of two buffers via the FFT.

    mode "full" returns the complete length len(a)+len(b)-1 result; mode
    "same" truncates to the first len(a) samples (so convolving with a
    unit impulse at lag 0 returns `a` unchanged).
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("fft_convolve requires non-empty inputs")
    if a.sample_rate != b.sample_rate:
        raise ValueError(f"sample-rate mismatch: {a.sample_rate} vs {b.sample_rate}")
    if mode not in ("full", "same"):
        raise ValueError(f"unknown mode {mode!r}")

    n = len(a) + len(b) - 1
    nfft = _next_pow2(n)
    spec = np.fft.rfft(a.samples, nfft) * np.fft.rfft(b.samples, nfft)
    full = np.fft.irfft(spec, nfft)[:n]
    if mode == "same":
        full = full[: len(a)]
    return AudioBuffer(full, a.sample_rate)


def hann_window(size: int, periodic: bool = True) -> np.ndarray:
    """Hann window; the periodic variant is used for STFT analysis."""
    if periodic:
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / (size - 1))


def frame_count(signal_len: int, frame_size: int, hop_size: int) -> int:
    """Number of STFT frames after reflection padding of frame_size//2."""
    padded = signal_len + 2 * (frame_size // 2)
    return (padded - frame_size) // hop_size + 1


def stft_magnitude(x: AudioBuffer | np.ndarray, frame_size: int, hop_size: int) -> Spectrogram:
    """Magnitude STFT with a periodic Hann window.

    The signal is reflection-padded by frame_size//2 on both ends so frames
    are centred on the original samples; hop_size must be frame_size//2.
    """
    samples = x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)
    if frame_size <= 0 or frame_size & (frame_size - 1):
        raise ValueError(f"frame_size must be a power of two, got {frame_size}")
    if hop_size != frame_size // 2:
        raise ValueError(f"hop_size must be frame_size//2, got {hop_size}")
    if samples.size < frame_size:
        raise ValueError(f"signal of length {samples.size} shorter than frame_size {frame_size}")

    pad = frame_size // 2
    padded = np.pad(samples, pad, mode="reflect")
    frames = frame_count(samples.size, frame_size, hop_size)
    idx = hop_size * np.arange(frames)[:, None] + np.arange(frame_size)[None, :]
    windowed = padded[idx] * hann_window(frame_size)
    mags = np.abs(np.fft.rfft(windowed, axis=-1))
    return Spectrogram(mags, frame_size, hop_size)


def _windowed_sinc_band(length: int, lo: float, hi: float) -> np.ndarray:
    """Hann-windowed ideal bandpass with normalized edge frequencies.

    lo/hi are in cycles per sample (0..0.5); lo=0 gives a lowpass, hi=0.5 a
    highpass-reaching band.  The kernel is symmetric about (length-1)/2.
    """
    n = np.arange(length) - (length - 1) / 2.0
    ideal = 2.0 * hi * np.sinc(2.0 * hi * n)
    if lo > 0.0:
        ideal = ideal - 2.0 * lo * np.sinc(2.0 * lo * n)
    return ideal * hann_window(length, periodic=False)


def octave_band_edges(m: int, sample_rate: int) -> np.ndarray:
    """m+1 octave-spaced band edges from sample_rate/2^(m+1) up to Nyquist."""
    nyquist = sample_rate / 2.0
    return nyquist * 2.0 ** (np.arange(m + 1) - m)


def design_octave_bandpass_bank(m: int, order: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[FirFilter]:
    """Bank of m windowed-sinc filters on octave-spaced edges.

    The lowest band is a lowpass and the highest reaches Nyquist, so the
    ideal responses telescope to an allpass: the summed magnitude response
    is flat to within the window ripple.  The lowest band edge must stay
    above 20 Hz, which bounds m for a given sample rate.
    """
    if m < 1:
        raise ValueError("need at least one band")
    if order < 1 or order % 2 == 0:
        raise ValueError(f"order must be odd, got {order}")
    edges = octave_band_edges(m, sample_rate)
    if edges[0] < 20.0:
        raise ValueError(
            f"m={m} puts the lowest octave edge at {edges[0]:.2f} Hz (< 20 Hz); reduce the band count"
        )
    length = order + 1
    bank = []
    for i in range(m):
        lo = 0.0 if i == 0 else edges[i] / sample_rate
        hi = 0.5 if i == m - 1 else edges[i + 1] / sample_rate
        bank.append(FirFilter(_windowed_sinc_band(length, lo, hi)))
    return bank


def filter_response(filt: FirFilter, num_points: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude response on a dense normalized-frequency grid (cycles/sample)."""
    spec = np.fft.rfft(filt.coefficients, 2 * num_points)
    freqs = np.fft.rfftfreq(2 * num_points)
    return freqs, np.abs(spec)


def white_noise(length: int, seed: int) -> AudioBuffer:
    """Zero-mean unit-variance Gaussian noise; identical output for identical seed."""
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    return AudioBuffer(rng.standard_normal(length))
