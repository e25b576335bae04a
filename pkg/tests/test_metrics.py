import numpy as np
import pytest

from rirshape import autograd as ag
from rirshape.dsp import AudioBuffer, white_noise
from rirshape.metrics import (
    EvalSummary,
    MetricStats,
    StftLossConfig,
    UndefinedDecayError,
    aggregate,
    analyze_rir,
    estimate_drr,
    estimate_t60,
    pearson,
    schroeder_edc,
    stft_loss,
    stft_loss_value,
)

FS = 48000


# ---------------------------------------------------------------------------
# independent loss oracle: per-frame python loop, no shared STFT code
# ---------------------------------------------------------------------------

def naive_stft_mag(x, frame, hop):
    pad = frame // 2
    xp = np.concatenate([x[1 : pad + 1][::-1], x, x[-pad - 1 : -1][::-1]])
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame) / frame)
    rows = []
    start = 0
    while start + frame <= xp.size:
        rows.append(np.abs(np.fft.rfft(xp[start : start + frame] * win)))
        start += hop
    return np.array(rows)


def naive_loss_components(h_hat, h, resolutions):
    sc_terms, sm_terms = [], []
    for frame, hop in resolutions:
        a = naive_stft_mag(h_hat, frame, hop)
        b = naive_stft_mag(h, frame, hop)
        sc_terms.append(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
        la = np.log(np.maximum(a, 1e-7))
        lb = np.log(np.maximum(b, 1e-7))
        sm_terms.append(np.abs(la - lb).sum() / a.shape[0])
    return sc_terms, sm_terms


def naive_loss(h_hat_batch, h_batch, resolutions):
    totals = []
    for h_hat, h in zip(h_hat_batch, h_batch):
        sc, sm = naive_loss_components(h_hat, h, resolutions)
        totals.append(sum(sc) + sum(sm))
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# stft_loss
# ---------------------------------------------------------------------------

def test_loss_zero_on_identical():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 48000))
    loss = stft_loss(ag.Tensor(h), h)
    assert loss.item() == 0.0


def test_loss_zero_estimate_gives_unit_spectral_convergence():
    rng = np.random.default_rng(1)
    h = rng.standard_normal(48000)
    sc, _sm = naive_loss_components(np.zeros(48000), h, StftLossConfig().resolutions)
    assert np.allclose(sc, 1.0, atol=1e-12)
    got = stft_loss_value(np.zeros(48000), h)
    want = naive_loss([np.zeros(48000)], [h], StftLossConfig().resolutions)
    assert abs(got - want) / want < 1e-10


def test_loss_matches_naive_oracle():
    rng = np.random.default_rng(2)
    cfg = StftLossConfig()
    for trial in range(20):
        if trial < 17:
            res = ((64, 32), (256, 128))
            T = 3000
        else:
            res = cfg.resolutions  # full-size spot checks
            T = 48000
        h_hat = rng.standard_normal((2, T))
        h = rng.standard_normal((2, T))
        got = float(stft_loss(ag.Tensor(h_hat), h, StftLossConfig(resolutions=res)).data)
        want = naive_loss(h_hat, h, res)
        assert abs(got - want) / want < 1e-5


def test_loss_nonnegative_and_batch_mean():
    rng = np.random.default_rng(3)
    res = ((64, 32),)
    a = rng.standard_normal((3, 1000))
    b = rng.standard_normal((3, 1000))
    loss = float(stft_loss(ag.Tensor(a), b, StftLossConfig(resolutions=res)).data)
    assert loss >= 0
    per = [
        float(stft_loss(ag.Tensor(a[i : i + 1]), b[i : i + 1], StftLossConfig(resolutions=res)).data)
        for i in range(3)
    ]
    assert abs(loss - np.mean(per)) < 1e-12


def test_loss_frame_shuffle_increases_loss():
    # frames carry position: permuting the estimate's frames must hurt, on
    # nonstationary (decaying) signals
    res = ((256, 128),)
    cfg = StftLossConfig(resolutions=res)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        env = np.exp(-np.linspace(0, 6, 8192))
        h = env * rng.standard_normal(8192)
        h_hat = h + 0.05 * rng.standard_normal(8192)
        base = stft_loss_value(h_hat, h, cfg)
        blocks = h_hat.reshape(32, 256)
        shuffled = blocks[rng.permutation(32)].reshape(-1)
        assert stft_loss_value(shuffled, h, cfg) > base


def test_loss_zero_energy_target_guard():
    events = []
    loss = stft_loss(
        ag.Tensor(np.ones((1, 1000))),
        np.zeros((1, 1000)),
        StftLossConfig(resolutions=((64, 32),)),
        guard_events=events,
    )
    assert np.isfinite(loss.item())
    assert events, "guard did not flag the zero-energy target"


def test_loss_is_differentiable_end_to_end():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        h_hat = ag.Tensor(rng.standard_normal((1, 48)), requires_grad=True)
        h = rng.standard_normal((1, 48))
        cfg = StftLossConfig(resolutions=((16, 8),))

        def loss():
            return stft_loss(h_hat, h, cfg)

        # small eps: the L1 term has |.| kinks that a wide stencil can straddle
        assert ag.check_gradients(loss, [h_hat], n_samples=8, eps=1e-4, seed=seed) < 1e-4


def test_loss_config_validation():
    with pytest.raises(ValueError):
        StftLossConfig(resolutions=())
    with pytest.raises(ValueError):
        StftLossConfig(resolutions=((64, 16),))
    with pytest.raises(ValueError):
        stft_loss(ag.Tensor(np.zeros((1, 100))), np.zeros((1, 99)))


# ---------------------------------------------------------------------------
# EDC
# ---------------------------------------------------------------------------

def test_edc_delta():
    h = AudioBuffer(np.concatenate([[1.0], np.zeros(999)]), FS)
    edc = schroeder_edc(h)
    assert edc[0] == 0.0
    assert np.all(edc[1:] == -120.0)


def test_edc_exponential_slope_closed_form():
    # EDC of a pure exponential e^{-an} is exactly linear: -20*a*n/ln(10) dB
    t60 = 0.5
    a = 3.0 * np.log(10.0) / (t60 * FS)
    n = np.arange(FS)
    edc = schroeder_edc(AudioBuffer(np.exp(-a * n), FS))
    want = -20.0 * a * n / np.log(10.0)
    # the closed form assumes an infinite tail; stay where truncation of the
    # backward integral is negligible
    sel = want > -60
    assert np.max(np.abs(edc[sel] - want[sel])) < 1e-4


def test_edc_monotone_for_any_input():
    for seed in range(10):
        x = np.random.default_rng(seed).standard_normal(5000)
        edc = schroeder_edc(AudioBuffer(x, FS))
        assert np.all(np.diff(edc) <= 0)
        assert edc[0] == 0.0


def test_edc_rejects_zero_energy():
    with pytest.raises(ValueError):
        schroeder_edc(AudioBuffer(np.zeros(100), FS))


# ---------------------------------------------------------------------------
# T60
# ---------------------------------------------------------------------------

def make_decay(t60, seed, length=FS, fs=FS):
    rng = np.random.default_rng(seed)
    n = np.arange(length)
    env = np.exp(-3.0 * np.log(10.0) * n / (t60 * fs))
    return AudioBuffer(env * rng.standard_normal(length), fs)


def test_t60_recovers_constructed_decays():
    for t60 in (0.2, 0.4, 0.6, 0.8, 1.0):
        for seed in range(10):
            length = FS if t60 <= 0.6 else 2 * FS  # long decays need room to reach -35 dB
            est = estimate_t60(make_decay(t60, seed, length))
            assert abs(est - t60) / t60 < 0.05


def test_t60_fallback_to_t20():
    # a noise floor flattens the EDC below about -28 dB, wrecking the
    # -5..-35 dB fit; the -5..-25 dB fit stays admissible
    t60 = 0.6
    rng = np.random.default_rng(0)
    n = np.arange(2 * FS)
    env = np.exp(-3.0 * np.log(10.0) * n / (t60 * FS))
    decay = env * rng.standard_normal(n.size)
    floor_amp = np.sqrt(10.0**-2.8 * np.sum(decay**2) / n.size)
    h = AudioBuffer(decay + floor_amp * rng.standard_normal(n.size), FS)
    est, method = estimate_t60(h, detail=True)
    assert method == "t20"
    assert abs(est - t60) / t60 < 0.15


def test_t60_undefined_for_white_noise():
    with pytest.raises(UndefinedDecayError):
        estimate_t60(white_noise(48000, seed=3))


# ---------------------------------------------------------------------------
# DRR
# ---------------------------------------------------------------------------

def test_drr_delta_alone_clamps():
    h = AudioBuffer(np.concatenate([[1.0], np.zeros(999)]), FS)
    val, flag = estimate_drr(h, detail=True)
    assert val == 60.0 and flag == "clamped"


def test_drr_equal_energy_split_is_zero():
    x = np.zeros(48000)
    x[0] = 1.0
    rng = np.random.default_rng(4)
    tail = rng.standard_normal(47760)
    tail /= np.linalg.norm(tail)  # unit energy, same as the delta
    x[240:] = tail
    assert abs(estimate_drr(AudioBuffer(x, FS))) < 1e-9


def test_drr_constructed_targets():
    for drr_db in (-12, -6, 0, 6, 12):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            x = np.zeros(48000)
            x[0] = 1.0
            tail = rng.standard_normal(47760)
            tail /= np.linalg.norm(tail)
            x[240:] = tail * 10.0 ** (-drr_db / 20.0)
            est = estimate_drr(AudioBuffer(x, FS))
            assert abs(est - drr_db) < 0.5


def test_drr_rejects_zero_energy():
    with pytest.raises(ValueError):
        estimate_drr(AudioBuffer(np.zeros(10), FS))


def test_analyze_rir_bundles_everything():
    params = analyze_rir(make_decay(0.4, seed=1))
    assert params.t60 is not None and abs(params.t60 - 0.4) / 0.4 < 0.05
    assert params.t60_method == "t30"
    assert np.isfinite(params.drr)
    assert params.edc[0] == 0.0
    noisy = analyze_rir(white_noise(48000, seed=9))
    assert noisy.t60 is None and noisy.t60_method == "undefined"


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_aggregate_identity():
    s = aggregate([(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])
    assert s.bias == 0.0 and s.mse == 0.0 and s.rho == 1.0 and s.count == 3


def test_aggregate_constant_offset():
    s = aggregate([(1.1, 1.0), (2.1, 2.0), (3.1, 3.0)])
    assert abs(s.bias - 0.1) < 1e-12
    assert abs(s.mse - 0.01) < 1e-12
    assert abs(s.rho - 1.0) < 1e-12


def test_aggregate_anticorrelated():
    s = aggregate([(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)])
    assert abs(s.rho + 1.0) < 1e-12


def test_aggregate_zero_variance_rho_undefined():
    s = aggregate([(1.0, 5.0), (1.0, 6.0)])
    assert s.rho is None
    assert pearson(np.array([1.0]), np.array([2.0])) is None


def test_eval_summary_serialization():
    summary = EvalSummary(
        model="noise_shaping",
        stft=3.25,
        t60=MetricStats(bias=0.01, mse=0.002, rho=0.9, count=20),
        drr=MetricStats(bias=-0.5, mse=1.0, rho=None, count=20),
    )
    text = summary.to_text()
    assert "stft_loss 3.250000" in text
    assert "t60_rho 0.900000" in text
    assert "drr_rho undefined" in text
    row = summary.to_csv_row()
    assert row.startswith("noise_shaping,3.250000,")
    assert row.endswith(",")  # undefined rho serializes as empty cell
    assert len(row.split(",")) == len(EvalSummary.CSV_HEADER.split(","))
