import numpy as np
import pytest

from rirshape.dsp import (
    AudioBuffer,
    FirFilter,
    Spectrogram,
    design_octave_bandpass_bank,
    fft_convolve,
    filter_response,
    frame_count,
    hann_window,
    octave_band_edges,
    stft_magnitude,
    white_noise,
)


def direct_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """O(n*m) reference convolution, no FFT anywhere."""
    out = np.zeros(len(a) + len(b) - 1)
    for j, bj in enumerate(b):
        out[j : j + len(a)] += bj * a
    return out


# ---------------------------------------------------------------------------
# fft_convolve
# ---------------------------------------------------------------------------

def test_convolve_delta_pair():
    a = AudioBuffer([1.0, 0.0, 0.0])
    b = AudioBuffer([0.5, 0.25])
    out = fft_convolve(a, b, mode="full")
    assert np.allclose(out.samples, [0.5, 0.25, 0.0, 0.0], atol=1e-12)
    assert len(out) == 4


def test_convolve_identity():
    rng = np.random.default_rng(0)
    a = AudioBuffer(rng.standard_normal(777))
    delta = AudioBuffer(np.array([1.0]))
    out = fft_convolve(a, delta, mode="same")
    assert out.samples.shape == a.samples.shape
    assert np.max(np.abs(out.samples - a.samples)) < 1e-12


def test_convolve_matches_direct_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        na = int(rng.integers(1, 1000))
        nb = int(rng.integers(1, 1000))
        a = rng.standard_normal(na)
        b = rng.standard_normal(nb)
        got = fft_convolve(AudioBuffer(a), AudioBuffer(b)).samples
        want = direct_convolve(a, b)
        assert np.max(np.abs(got - want)) < 1e-6


def test_convolve_long_inputs_against_oracle():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(10_000)
    b = rng.standard_normal(4_321)
    got = fft_convolve(AudioBuffer(a), AudioBuffer(b)).samples
    assert np.max(np.abs(got - direct_convolve(a, b))) < 1e-6


def test_convolve_linearity():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(500)
    y = rng.standard_normal(500)
    h = rng.standard_normal(200)
    alpha, beta = 0.7, -1.3
    lhs = fft_convolve(AudioBuffer(alpha * x + beta * y), AudioBuffer(h)).samples
    rhs = alpha * fft_convolve(AudioBuffer(x), AudioBuffer(h)).samples + beta * fft_convolve(
        AudioBuffer(y), AudioBuffer(h)
    ).samples
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_convolve_same_mode_truncates():
    a = AudioBuffer(np.ones(10))
    b = AudioBuffer(np.ones(4))
    out = fft_convolve(a, b, mode="same")
    assert len(out) == 10
    full = fft_convolve(a, b, mode="full")
    assert np.allclose(out.samples, full.samples[:10])


def test_convolve_rejects_bad_inputs():
    a = AudioBuffer(np.ones(4), 48000)
    b = AudioBuffer(np.ones(4), 44100)
    with pytest.raises(ValueError):
        fft_convolve(a, b)
    with pytest.raises(ValueError):
        fft_convolve(a, AudioBuffer(np.zeros(0)))
    with pytest.raises(ValueError):
        fft_convolve(a, AudioBuffer(np.ones(4)), mode="weird")


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def test_stft_zero_signal():
    spec = stft_magnitude(AudioBuffer(np.zeros(4096)), 256, 128)
    assert np.all(spec.magnitudes == 0)
    assert spec.magnitudes.shape[1] == 129


def test_stft_frame_count_formula():
    # 48000 samples at frame 64 / hop 32 pads to 48064 and yields 1501 frames
    assert frame_count(48000, 64, 32) == 1501
    spec = stft_magnitude(AudioBuffer(np.zeros(48000)), 64, 32)
    assert spec.num_frames == 1501
    for sig_len in (4096, 48000, 131072, 5000):
        for frame in (64, 512, 2048):
            spec = stft_magnitude(AudioBuffer(np.zeros(sig_len)), frame, frame // 2)
            assert spec.num_frames == frame_count(sig_len, frame, frame // 2)


def test_stft_sinusoid_bin_peak():
    # A sinusoid exactly on bin k with a periodic Hann window puts magnitude
    # 0.25*A*N on bin k and 0.125*A*N on its neighbours (windowed DFT in
    # closed form); interior frames see a pure windowed sinusoid.
    frame, hop = 256, 128
    fs = 48000
    k = 19
    amp = 0.8
    n = np.arange(fs)
    x = amp * np.sin(2.0 * np.pi * k * n / frame)
    spec = stft_magnitude(AudioBuffer(x, fs), frame, hop)
    interior = spec.magnitudes[2:-2]
    peak = interior[:, k]
    assert np.allclose(peak, 0.25 * amp * frame, rtol=1e-9)
    assert np.allclose(interior[:, k - 1], 0.125 * amp * frame, rtol=1e-9)
    assert np.allclose(interior[:, k + 1], 0.125 * amp * frame, rtol=1e-9)
    # off-band bins carry nothing
    assert np.max(interior[:, : k - 1]) < 1e-8 * amp * frame


def test_stft_reversal_energy():
    # Parseval-style check: reversing the signal leaves total spectrogram
    # energy unchanged (window tiling is only approximately symmetric, so
    # the residual is statistical; 1e-4 relative holds with margin here).
    T = 1 << 20
    for frame in (256, 1024, 2048):
        for seed in range(3):
            x = np.random.default_rng(seed).standard_normal(T)
            e_fwd = np.sum(stft_magnitude(AudioBuffer(x), frame, frame // 2).magnitudes ** 2)
            e_rev = np.sum(stft_magnitude(AudioBuffer(x[::-1]), frame, frame // 2).magnitudes ** 2)
            assert abs(e_fwd - e_rev) / e_fwd < 1e-4


def test_stft_preconditions():
    x = AudioBuffer(np.zeros(1000))
    with pytest.raises(ValueError):
        stft_magnitude(x, 100, 50)  # not a power of two
    with pytest.raises(ValueError):
        stft_magnitude(x, 256, 64)  # hop must be frame/2
    with pytest.raises(ValueError):
        stft_magnitude(AudioBuffer(np.zeros(100)), 256, 128)  # too short


def test_spectrogram_bin_invariant():
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((10, 100)), frame_size=256, hop_size=128)


def test_hann_window_endpoints():
    w = hann_window(64, periodic=True)
    assert w[0] == 0.0
    assert abs(w[32] - 1.0) < 1e-12
    ws = hann_window(65, periodic=False)
    assert abs(ws[0]) < 1e-12 and abs(ws[64]) < 1e-12
    assert abs(ws[32] - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# filter bank
# ---------------------------------------------------------------------------

def test_bank_shapes_and_edges():
    bank = design_octave_bandpass_bank(10, 1023, 48000)
    assert len(bank) == 10
    assert all(f.coefficients.shape == (1024,) for f in bank)
    assert all(f.order == 1023 for f in bank)
    edges = octave_band_edges(10, 48000)
    assert edges[-1] == 24000.0
    assert abs(edges[0] - 24000.0 / 1024.0) < 1e-9  # ~23.4 Hz


def test_bank_band_peaks_inside_band():
    sr = 48000
    m = 10
    bank = design_octave_bandpass_bank(m, 1023, sr)
    edges = octave_band_edges(m, sr)
    for i, filt in enumerate(bank):
        freqs, mag = filter_response(filt, 8192)
        lo = 0.0 if i == 0 else edges[i] / sr
        hi = 0.5 if i == m - 1 else edges[i + 1] / sr
        peak_f = freqs[np.argmax(mag)]
        assert lo <= peak_f <= hi
        # response inside the band clearly dominates the stopband; the guard
        # must cover the windowed-sinc transition width (~4/length)
        inside = mag[(freqs >= lo) & (freqs <= hi)]
        guard = max(0.5 * (hi - lo), 4.0 / len(filt.coefficients))
        outside = mag[(freqs < max(lo - guard, 0.0)) | (freqs > min(hi + guard, 0.5))]
        if outside.size:
            assert inside.max() > 10.0 * outside.max()


def test_bank_sums_flat():
    # summed magnitude response stays within +/-3 dB of unity, 100 Hz - 20 kHz
    sr = 48000
    bank = design_octave_bandpass_bank(10, 1023, sr)
    total = np.zeros(8193)
    for filt in bank:
        freqs, mag = filter_response(filt, 8192)
        total += mag
    hz = freqs * sr
    sel = (hz >= 100.0) & (hz <= 20000.0)
    db = 20.0 * np.log10(total[sel])
    assert np.max(np.abs(db)) < 3.0


def test_bank_filter_is_its_impulse_response():
    bank = design_octave_bandpass_bank(4, 255, 48000)
    delta = AudioBuffer(np.concatenate([[1.0], np.zeros(511)]))
    out = fft_convolve(delta, AudioBuffer(bank[2].coefficients), mode="full")
    assert np.max(np.abs(out.samples[:256] - bank[2].coefficients)) < 1e-9


def test_bank_rejects_bad_params():
    with pytest.raises(ValueError):
        design_octave_bandpass_bank(0, 1023)
    with pytest.raises(ValueError):
        design_octave_bandpass_bank(4, 256)  # even order
    with pytest.raises(ValueError):
        design_octave_bandpass_bank(12, 1023, 48000)  # lowest edge < 20 Hz


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def test_white_noise_deterministic():
    a = white_noise(48000, seed=7)
    b = white_noise(48000, seed=7)
    assert np.array_equal(a.samples, b.samples)
    c = white_noise(48000, seed=8)
    assert not np.array_equal(a.samples, c.samples)


def test_white_noise_moments():
    x = white_noise(48000, seed=123).samples
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_white_noise_rejects_empty():
    with pytest.raises(ValueError):
        white_noise(0, seed=1)


def test_audio_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        AudioBuffer([np.nan, 0.0])
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros(10), sample_rate=0)
    buf = AudioBuffer(np.zeros(24000), 48000)
    assert buf.duration == 0.5


def test_fir_filter_validation():
    with pytest.raises(ValueError):
        FirFilter(np.zeros((2, 3)))
    f = FirFilter(np.zeros(1024))
    assert f.order == 1023
