"""Minimal RIFF/WAVE codec for mono audio.

Writes 32-bit IEEE float PCM (format tag 3).  Reads both float32 files and
16-bit integer PCM (format tag 1), converting integers to float by dividing
by 32768.  Anything else (compressed formats, >2 channels sharing, odd bit
depths) is rejected loudly rather than guessed at.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer

_FMT_PCM = 1
_FMT_FLOAT = 3


class WavFormatError(ValueError):
    pass


def write_wav(path: str | Path, buf: AudioBuffer) -> None:
    """Write a mono float32 WAV (format tag 3, little-endian)."""
    samples = np.asarray(buf.samples, dtype="<f4")
    data = samples.tobytes()
    byte_rate = buf.sample_rate * 4
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 4 + 8 + 16 + 8 + len(data)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, _FMT_FLOAT, 1, buf.sample_rate, byte_rate, 4, 32))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(data)))
        fh.write(data)


def read_wav(path: str | Path) -> AudioBuffer:
    """Read a mono WAV file (float32 or int16 PCM)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_len,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_len]
        if chunk_id == b"fmt ":
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt/data chunk")
    tag, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")

    if tag == _FMT_FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif tag == _FMT_PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    else:
        raise WavFormatError(f"{path}: unsupported format (tag={tag}, bits={bits})")
    return AudioBuffer(samples, sample_rate)
