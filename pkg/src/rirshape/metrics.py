"""Training loss and objective evaluation.

The training loss is a multiresolution STFT loss: at each resolution a
spectral-convergence term (Frobenius-normalized magnitude difference) plus
a log-magnitude L1 term averaged over frame count, summed over resolutions
and averaged over the batch.

Evaluation covers the standard room-acoustics numbers: Schroeder energy
decay curve, T60 via a least-squares fit to the -5..-35 dB decay range
(falling back to -5..-25 dB when the decay is short), and the
direct-to-reverberant ratio with a +/-2.5 ms direct window.  Batches of
(estimate, truth) pairs aggregate into bias / MSE / Pearson rho.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .dsp import AudioBuffer

DEFAULT_RESOLUTIONS = ((64, 32), (512, 256), (2048, 1024), (8192, 4096))
LOG_FLOOR = 1e-7
ENERGY_GUARD = 1e-8
EDC_FLOOR_DB = -120.0
DIRECT_WINDOW_SECONDS = 0.0025
DRR_CLAMP_DB = 60.0
FIT_MIN_R2 = 0.95


class UndefinedDecayError(ValueError):
    """Raised when a signal has no admissible linear decay region."""


@dataclass(frozen=True)
class StftLossConfig:
    resolutions: tuple = DEFAULT_RESOLUTIONS
    log_floor: float = LOG_FLOOR
    energy_guard: float = ENERGY_GUARD

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValueError("need at least one STFT resolution")
        for frame, hop in self.resolutions:
            if hop != frame // 2:
                raise ValueError(f"hop {hop} must be half of frame {frame}")


def stft_loss(
    h_hat: ag.Tensor,
    h: ag.Tensor | np.ndarray,
    cfg: StftLossConfig | None = None,
    guard_events: list | None = None,
) -> ag.Tensor:
    """Multiresolution STFT loss between batches of signals, shape (B, T).

    Differentiable in h_hat.  When a target has near-zero energy at some
    resolution the spectral-convergence denominator is floored at
    cfg.energy_guard and, if guard_events is a list, a note is appended.
    """
    cfg = cfg or StftLossConfig()
    if not isinstance(h, ag.Tensor):
        h = ag.Tensor(np.asarray(h))
    if h_hat.data.shape != h.data.shape:
        raise ValueError(f"shape mismatch: {h_hat.data.shape} vs {h.data.shape}")
    if h_hat.data.ndim != 2:
        raise ValueError(f"expected (batch, time) signals, got shape {h_hat.data.shape}")

    B = h_hat.data.shape[0]
    total = None
    for r, (frame, hop) in enumerate(cfg.resolutions):
        mag_hat = ag.stft_mag(h_hat, frame, hop)
        mag_ref = ag.stft_mag(h, frame, hop).data  # constant w.r.t. h_hat
        n_frames = mag_ref.shape[1]

        # spectral convergence, per example
        diff = ag.sub(mag_hat, ag.Tensor(mag_ref))
        sc_num = ag.sqrt(ag.sum_axes(ag.square(diff), (1, 2)))
        denom = np.sqrt((mag_ref.astype(np.float64) ** 2).sum(axis=(1, 2)))
        if guard_events is not None and np.any(denom < cfg.energy_guard):
            guard_events.append(f"resolution {frame}: target energy below guard {cfg.energy_guard}")
        denom = np.maximum(denom, cfg.energy_guard)
        l_sc = ag.cmul(sc_num, (1.0 / denom).astype(h_hat.data.dtype))

        # log-magnitude L1 over all entries, divided by frame count
        log_hat = ag.log(ag.clamp_min(mag_hat, cfg.log_floor))
        log_ref = np.log(np.maximum(mag_ref, cfg.log_floor))
        l_sm = ag.sum_axes(ag.absolute(ag.sub(log_hat, ag.Tensor(log_ref))), (1, 2))
        l_sm = ag.scale(l_sm, 1.0 / n_frames)

        res = ag.add(l_sc, l_sm)
        total = res if total is None else ag.add(total, res)
    return ag.scale(ag.sum_axes(total), 1.0 / B)


def stft_loss_value(h_hat: np.ndarray, h: np.ndarray, cfg: StftLossConfig | None = None) -> float:
    """Loss as a plain float for evaluation (no gradient graph)."""
    return float(stft_loss(ag.Tensor(np.atleast_2d(h_hat)), np.atleast_2d(h), cfg).data)


# ---------------------------------------------------------------------------
# acoustic parameter estimation
# ---------------------------------------------------------------------------

@dataclass
class AcousticParams:
    """T60 (None when undefined), DRR, and the EDC the estimates came from."""

    t60: float | None
    drr: float
    edc: np.ndarray = field(repr=False)
    t60_method: str = "t30"


def schroeder_edc(h: AudioBuffer | np.ndarray) -> np.ndarray:
    """Energy decay curve in dB: backward-integrated squared amplitude.

    edc[0] is exactly 0 dB and the curve never increases; values are floored
    at -120 dB.
    """
    samples = h.samples if isinstance(h, AudioBuffer) else np.asarray(h, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty signal")
    energy = samples.astype(np.float64) ** 2
    tail = np.cumsum(energy[::-1])[::-1]
    if tail[0] <= 0.0:
        raise ValueError("zero-energy signal has no decay curve")
    with np.errstate(divide="ignore"):
        edc = 10.0 * np.log10(tail / tail[0])
    return np.maximum(edc, EDC_FLOOR_DB)


def _fit_decay(edc: np.ndarray, sample_rate: int, lo_db: float, hi_db: float):
    """LSQ line through the EDC between its lo_db and hi_db crossings.

    Returns (t60_seconds, r_squared) or None when hi_db is never reached.
    """
    below_lo = np.nonzero(edc <= lo_db)[0]
    below_hi = np.nonzero(edc <= hi_db)[0]
    if below_lo.size == 0 or below_hi.size == 0:
        return None
    start, stop = below_lo[0], below_hi[0]
    if stop - start < 2:
        return None
    seg = edc[start : stop + 1]
    n = np.arange(start, stop + 1, dtype=np.float64)
    coeffs = np.polyfit(n, seg, 1)
    slope = coeffs[0]  # dB per sample
    if slope >= 0:
        return None
    pred = np.polyval(coeffs, n)
    ss_res = float(np.sum((seg - pred) ** 2))
    ss_tot = float(np.sum((seg - seg.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    t60 = (60.0 / -slope) / sample_rate
    return t60, r2


def estimate_t60(h: AudioBuffer, detail: bool = False):
    """Reverberation time from the EDC decay slope.

    Primary fit spans -5..-35 dB (T30 method); when the curve never reaches
    -35 dB a -5..-25 dB fit is used instead and reported as "t20".  A fit
    whose r^2 falls below 0.95 is rejected (non-decaying signals such as
    white noise produce a strongly curved EDC in that range), raising
    UndefinedDecayError.
    """
    edc = schroeder_edc(h)
    fit30 = _fit_decay(edc, h.sample_rate, -5.0, -35.0)
    if fit30 is not None and fit30[1] >= FIT_MIN_R2:
        return (fit30[0], "t30") if detail else fit30[0]
    fit20 = _fit_decay(edc, h.sample_rate, -5.0, -25.0)
    if fit20 is not None and fit20[1] >= FIT_MIN_R2:
        return (fit20[0], "t20") if detail else fit20[0]
    raise UndefinedDecayError("no admissible linear decay region between -5 and -35 dB")


def direct_window_bounds(peak: int, length: int, sample_rate: int) -> tuple[int, int]:
    """Half-open sample range covering +/-2.5 ms around the peak."""
    half = int(round(DIRECT_WINDOW_SECONDS * sample_rate))
    return max(0, peak - half), min(length, peak + half + 1)


def estimate_drr(h: AudioBuffer, detail: bool = False):
    """Direct-to-reverberant ratio in dB, clamped to [-60, +60].

    Direct energy is everything within +/-2.5 ms of the absolute peak; the
    remainder is reverberant.  A tail with no energy at all clamps to +60 dB
    (flagged "clamped" in detail mode).
    """
    samples = h.samples
    energy = samples**2
    total = float(energy.sum())
    if total <= 0.0:
        raise ValueError("zero-energy signal has no DRR")
    peak = int(np.argmax(np.abs(samples)))
    lo, hi = direct_window_bounds(peak, samples.size, h.sample_rate)
    direct = float(energy[lo:hi].sum())
    reverb = total - direct
    if reverb <= 0.0:
        return (DRR_CLAMP_DB, "clamped") if detail else DRR_CLAMP_DB
    drr = 10.0 * np.log10(direct / reverb) if direct > 0.0 else -DRR_CLAMP_DB
    drr = float(np.clip(drr, -DRR_CLAMP_DB, DRR_CLAMP_DB))
    flag = "clamped" if abs(drr) >= DRR_CLAMP_DB else "ok"
    return (drr, flag) if detail else drr


def analyze_rir(h: AudioBuffer) -> AcousticParams:
    """All acoustic parameters of one RIR; t60 is None when undefined."""
    edc = schroeder_edc(h)
    try:
        t60, method = estimate_t60(h, detail=True)
    except UndefinedDecayError:
        t60, method = None, "undefined"
    return AcousticParams(t60=t60, drr=estimate_drr(h), edc=edc, t60_method=method)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricStats:
    bias: float
    mse: float
    rho: float | None
    count: int


@dataclass
class EvalSummary:
    """Per-metric aggregates over a test set, one row per model variant."""

    model: str
    stft: float
    t60: MetricStats
    drr: MetricStats

    CSV_HEADER = "model,stft_loss,t60_bias,t60_mse,t60_rho,drr_bias,drr_mse,drr_rho"

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        lines = [f"model {self.model}", f"stft_loss {self.stft:.6f}"]
        for name, stats in (("t60", self.t60), ("drr", self.drr)):
            lines.append(f"{name}_bias {fmt(stats.bias)}")
            lines.append(f"{name}_mse {fmt(stats.mse)}")
            lines.append(f"{name}_rho {fmt(stats.rho)}")
            lines.append(f"{name}_count {stats.count}")
        return "\n".join(lines) + "\n"

    def to_csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        cells = [self.model, f"{self.stft:.6f}"]
        for stats in (self.t60, self.drr):
            cells += [fmt(stats.bias), fmt(stats.mse), fmt(stats.rho)]
        return ",".join(cells)


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation; None when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        return None
    da, db = a - a.mean(), b - b.mean()
    va, vb = float(np.sum(da**2)), float(np.sum(db**2))
    if va == 0.0 or vb == 0.0:
        return None
    return float(np.sum(da * db) / np.sqrt(va * vb))


def aggregate(pairs) -> MetricStats:
    """Bias / MSE / Pearson rho over (estimate, truth) pairs."""
    pairs = [(float(e), float(t)) for e, t in pairs]
    if not pairs:
        return MetricStats(bias=None, mse=None, rho=None, count=0)
    est = np.array([p[0] for p in pairs])
    truth = np.array([p[1] for p in pairs])
    err = est - truth
    return MetricStats(
        bias=float(err.mean()),
        mse=float(np.mean(err**2)),
        rho=pearson(est, truth),
        count=len(pairs),
    )
