"""Synthetic corpus generation and manifest-driven example construction.

The parametric RIR generator builds impulse responses with exactly known
T60 and DRR: a unit direct impulse, a handful of early reflections, and a
late field of octave-band filtered noise under a per-band exponential
envelope.  The reverberant-to-direct energy ratio is solved in closed form
against the same +/-2.5 ms direct-window convention the DRR estimator
uses, so generator and estimator close the loop exactly.

Utterances are synthetic speech-like signals (voiced harmonic syllables
and unvoiced bursts under a syllabic envelope) grouped into "speakers"
that share voice parameters.  Manifests pair the two corpora with
speaker- and room-disjoint train/val/test splits.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer, design_octave_bandpass_bank, fft_convolve
from .metrics import AcousticParams, analyze_rir, direct_window_bounds, schroeder_edc
from .wavio import read_wav, write_wav

EXAMPLE_INPUT_SAMPLES = 131072
RIR_SAMPLES = 48000
SAMPLE_RATE = 48000
INPUT_PEAK = 0.95
RIR_PEAK = 0.97
MIN_UTTERANCE_SECONDS = 0.5
CROP_RMS_FLOOR = 10.0 ** (-40.0 / 20.0)  # -40 dBFS
EARLY_WINDOW_SECONDS = 0.05

# seed-stream tags, mixed into SeedSequence entropy so the independent
# random streams (rir bands, reflections, utterances, crops) never collide
_TAG_RIR = 101
_TAG_UTTERANCE = 102
_TAG_EXAMPLE = 103
_TAG_SPLIT = 104


def _rng(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


# ---------------------------------------------------------------------------
# synthetic RIRs
# ---------------------------------------------------------------------------

@dataclass
class SynthRirSpec:
    """Recipe for one synthetic RIR with exact ground-truth acoustics."""

    t60: float
    drr: float
    direct_delay: int = 96
    num_bands: int = 8
    band_decay_multipliers: tuple = ()
    length: int = RIR_SAMPLES
    sample_rate: int = SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if not 0.1 <= self.t60 <= 1.2:
            raise ValueError(f"t60 {self.t60} outside [0.1, 1.2] s")
        if not -15.0 <= self.drr <= 15.0:
            raise ValueError(f"drr {self.drr} outside [-15, +15] dB")
        if self.direct_delay < 0 or self.direct_delay >= self.length // 2:
            raise ValueError(f"direct_delay {self.direct_delay} out of range")
        if not self.band_decay_multipliers:
            self.band_decay_multipliers = (1.0,) * self.num_bands
        if len(self.band_decay_multipliers) != self.num_bands:
            raise ValueError("need one decay multiplier per band")


def _exp_envelope(length: int, start: int, t60: float, fs: int) -> np.ndarray:
    """Energy decays 60 dB over t60 seconds, starting at sample `start`."""
    n = np.arange(length, dtype=np.float64)
    env = np.exp(-3.0 * np.log(10.0) * (n - start) / (t60 * fs))
    env[:start] = 0.0
    return env


def _build_tail(spec: SynthRirSpec, start: int, rng: np.random.Generator) -> np.ndarray:
    bank = design_octave_bandpass_bank(spec.num_bands, 511, spec.sample_rate)
    tail = np.zeros(spec.length)
    for band, mult in zip(bank, spec.band_decay_multipliers):
        noise = rng.standard_normal(spec.length)
        shaped = fft_convolve(
            AudioBuffer(noise, spec.sample_rate),
            AudioBuffer(band.coefficients, spec.sample_rate),
            mode="same",
        ).samples
        tail += shaped * _exp_envelope(spec.length, start, spec.t60 * mult, spec.sample_rate)
    return tail


def _build_reflections(spec: SynthRirSpec, first: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(spec.length)
    count = int(rng.integers(3, 9))
    span = int(EARLY_WINDOW_SECONDS * spec.sample_rate)
    hi = min(spec.direct_delay + span, spec.length - 1)
    positions = rng.integers(first, hi + 1, size=count)
    for pos in positions:
        offset = pos - spec.direct_delay
        amp = rng.uniform(0.15, 0.6) * np.exp(-offset / (0.4 * span))
        out[pos] += amp * rng.choice([-1.0, 1.0])
    return out


def generate_synth_rir(spec: SynthRirSpec) -> tuple[AudioBuffer, AcousticParams]:
    """Construct a synthetic RIR; the returned AcousticParams hold the exact
    designed T60/DRR, not estimates.

    Reverberant energy (reflections + tail) is scaled so that the energy in
    the +/-2.5 ms window around the direct peak versus everything else hits
    spec.drr exactly.  When the designed DRR is so low that reverberant
    energy inside the window would spoil the solve, the reverberant field
    is rebuilt to start just past the window (a short 128-sample gap).
    """
    rng = _rng(spec.seed, _TAG_RIR)
    n0 = spec.direct_delay
    window_half = direct_window_bounds(n0, spec.length, spec.sample_rate)
    target_ratio = 10.0 ** (spec.drr / 10.0)

    def assemble(gap: int) -> np.ndarray:
        # reverberant field: early reflections plus noise tail, both
        # starting `gap` samples after the direct impulse
        build_rng = _rng(spec.seed, _TAG_RIR, gap)
        refl = _build_reflections(spec, n0 + gap, build_rng)
        tail = _build_tail(spec, n0 + gap, build_rng)
        # tail rms at onset ~ bank sum; reflections ride on top
        return refl * np.sqrt(np.mean(tail[n0 + gap :] ** 2)) * 3.0 + tail

    def window_energy_split(x: np.ndarray) -> tuple[float, float]:
        lo, hi = window_half
        inside = float(np.sum(x[lo:hi] ** 2))
        return inside, float(np.sum(x**2) - inside)

    reverb = assemble(gap=1)
    e_in, e_out = window_energy_split(reverb)
    # the solve for the reverb gain needs ratio > e_in/e_out with margin
    if e_out <= 0.0 or target_ratio < 1.25 * (e_in / e_out):
        reverb = assemble(gap=128)
        e_in, e_out = window_energy_split(reverb)

    direct_energy = 1.0
    alpha_sq = direct_energy / (target_ratio * e_out - e_in)
    if alpha_sq <= 0.0:
        raise ValueError(f"cannot reach drr {spec.drr} dB with this reverberant field")
    h = np.sqrt(alpha_sq) * reverb
    h[n0] += 1.0

    if int(np.argmax(np.abs(h))) != n0:
        raise ValueError("direct impulse is not the peak; spec out of usable range")
    h *= RIR_PEAK / np.max(np.abs(h))

    buf = AudioBuffer(h, spec.sample_rate)
    truth = AcousticParams(t60=spec.t60, drr=spec.drr, edc=schroeder_edc(buf), t60_method="constructed")
    return buf, truth


# ---------------------------------------------------------------------------
# synthetic utterances
# ---------------------------------------------------------------------------

@dataclass
class SpeakerVoice:
    """Per-speaker voice parameters shared across that speaker's utterances."""

    f0: float
    brightness: float  # spectral tilt of the harmonic stack
    rate: float  # syllables per second

    @staticmethod
    def for_speaker(speaker_seed: int) -> "SpeakerVoice":
        rng = _rng(speaker_seed, _TAG_UTTERANCE)
        return SpeakerVoice(
            f0=float(rng.uniform(95.0, 260.0)),
            brightness=float(rng.uniform(0.5, 1.5)),
            rate=float(rng.uniform(3.0, 6.0)),
        )


def _voiced_syllable(length: int, voice: SpeakerVoice, rng: np.random.Generator, fs: int) -> np.ndarray:
    t = np.arange(length) / fs
    f0 = voice.f0 * rng.uniform(0.85, 1.15)
    out = np.zeros(length)
    for k in range(1, 24):
        if k * f0 >= fs / 2:
            break
        out += (k ** -voice.brightness) * np.sin(2.0 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    return out


def _unvoiced_syllable(length: int, rng: np.random.Generator, fs: int) -> np.ndarray:
    noise = rng.standard_normal(length)
    # crude high-band emphasis: difference filter brightens the burst
    return np.diff(noise, prepend=0.0)


def generate_utterance(duration: float, speaker_seed: int, utt_seed: int, fs: int = SAMPLE_RATE) -> AudioBuffer:
    """Speech-like nonstationary test signal: syllables with pauses."""
    voice = SpeakerVoice.for_speaker(speaker_seed)
    rng = _rng(speaker_seed, utt_seed, _TAG_UTTERANCE)
    total = int(duration * fs)
    out = np.zeros(total)
    pos = int(rng.uniform(0.0, 0.05) * fs)
    while pos < total:
        syl_len = int(rng.uniform(0.6, 1.6) / voice.rate * fs)
        syl_len = min(syl_len, total - pos)
        if syl_len < 64:
            break
        if rng.uniform() < 0.7:
            syl = _voiced_syllable(syl_len, voice, rng, fs)
        else:
            syl = _unvoiced_syllable(syl_len, rng, fs)
        env = np.sin(np.pi * np.arange(syl_len) / syl_len) ** 0.7
        out[pos : pos + syl_len] += syl * env * rng.uniform(0.4, 1.0)
        pos += syl_len + int(rng.uniform(0.03, 0.15) * fs)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.9 / peak
    return AudioBuffer(out, fs)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class UtteranceEntry:
    path: str
    speaker_id: str
    split: str


@dataclass
class RirEntry:
    path: str
    room_id: str
    true_t60: float
    true_drr: float
    split: str


@dataclass
class DatasetManifest:
    seed: int
    utterances: list = field(default_factory=list)
    rirs: list = field(default_factory=list)

    def split_utterances(self, split: str):
        return [u for u in self.utterances if u.split == split]

    def split_rirs(self, split: str):
        return [r for r in self.rirs if r.split == split]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "seed": self.seed}) + "\n")
            for u in self.utterances:
                fh.write(
                    json.dumps(
                        {"kind": "utterance", "path": u.path, "speaker_id": u.speaker_id, "split": u.split}
                    )
                    + "\n"
                )
            for r in self.rirs:
                fh.write(
                    json.dumps(
                        {
                            "kind": "rir",
                            "path": r.path,
                            "room_id": r.room_id,
                            "true_t60": r.true_t60,
                            "true_drr": r.true_drr,
                            "split": r.split,
                        }
                    )
                    + "\n"
                )

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        manifest = DatasetManifest(seed=0)
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                kind = rec.get("kind")
                if kind == "header":
                    manifest.seed = int(rec["seed"])
                elif kind == "utterance":
                    manifest.utterances.append(
                        UtteranceEntry(rec["path"], rec["speaker_id"], rec["split"])
                    )
                elif kind == "rir":
                    manifest.rirs.append(
                        RirEntry(rec["path"], rec["room_id"], rec["true_t60"], rec["true_drr"], rec["split"])
                    )
                else:
                    raise ValueError(f"unknown manifest record kind {kind!r}")
        return manifest


def _split_ids(ids: list, fractions: tuple, rng: np.random.Generator, what: str) -> dict:
    if len(ids) < 3:
        raise ValueError(f"need at least 3 distinct {what} to fill train/val/test, got {len(ids)}")
    ids = sorted(ids)
    rng.shuffle(ids)
    n = len(ids)
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"split fractions leave no training {what}")
    assignment = {}
    for i, ident in enumerate(ids):
        if i < n_train:
            assignment[ident] = "train"
        elif i < n_train + n_val:
            assignment[ident] = "val"
        else:
            assignment[ident] = "test"
    return assignment


def speaker_id_of(path: str | Path) -> str:
    return Path(path).stem.split("_")[0]


def room_id_of(path: str | Path) -> str:
    return Path(path).stem


def build_manifest(
    utterance_dir: str | Path,
    rir_dir: str | Path,
    fractions: tuple = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetManifest:
    """Deterministic speaker- and room-disjoint split of two WAV directories.

    RIR ground truth comes from `ground_truth.csv` next to the RIR files
    (columns id,t60,drr); files missing from the table get estimated values
    via the metrics module.
    """
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    utt_paths = sorted(Path(utterance_dir).glob("*.wav"))
    rir_paths = sorted(Path(rir_dir).glob("*.wav"))
    if not utt_paths or not rir_paths:
        raise ValueError("utterance and RIR directories must be non-empty")

    truth_path = Path(rir_dir) / "ground_truth.csv"
    truth: dict[str, tuple[float, float]] = {}
    if truth_path.exists():
        with open(truth_path, newline="") as fh:
            for row in csv.DictReader(fh):
                truth[row["id"]] = (float(row["t60"]), float(row["drr"]))

    for p in utt_paths + rir_paths:
        buf = read_wav(p)
        if buf.sample_rate != SAMPLE_RATE:
            raise ValueError(f"{p}: expected {SAMPLE_RATE} Hz, got {buf.sample_rate}")

    speakers = sorted({speaker_id_of(p) for p in utt_paths})
    rooms = sorted({room_id_of(p) for p in rir_paths})
    speaker_split = _split_ids(speakers, fractions, _rng(seed, _TAG_SPLIT, 0), "speakers")
    room_split = _split_ids(rooms, fractions, _rng(seed, _TAG_SPLIT, 1), "rooms")

    manifest = DatasetManifest(seed=seed)
    for p in utt_paths:
        sid = speaker_id_of(p)
        manifest.utterances.append(UtteranceEntry(str(p), sid, speaker_split[sid]))
    for p in rir_paths:
        rid = room_id_of(p)
        if rid in truth:
            t60, drr = truth[rid]
        else:
            params = analyze_rir(read_wav(p))
            t60 = params.t60 if params.t60 is not None else float("nan")
            drr = params.drr
        manifest.rirs.append(RirEntry(str(p), rid, t60, drr, room_split[rid]))
    return manifest


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------

@dataclass
class TrainingExample:
    x_r: AudioBuffer  # reverberant input, exactly 131072 samples, peak 0.95
    h_target: AudioBuffer  # target RIR, exactly 48000 samples, gain untouched
    speaker_id: str
    room_id: str
    utterance_path: str
    rir_path: str
    crop_offset: int


def _fit_length(x: np.ndarray, length: int) -> np.ndarray:
    if x.size >= length:
        return x[:length]
    return np.pad(x, (0, length - x.size))


def _pick_crop_offset(utterance: np.ndarray, length: int, rng: np.random.Generator) -> int:
    """Seeded random window start where the dry utterance carries energy."""
    if utterance.size <= length:
        return 0
    hop = 2048
    starts = np.arange(0, utterance.size - length + 1, hop)
    rms = np.array([np.sqrt(np.mean(utterance[s : s + length] ** 2)) for s in starts])
    valid = starts[rms > CROP_RMS_FLOOR]
    if valid.size == 0:
        return int(starts[int(np.argmax(rms))])  # quietest case: least-bad window
    return int(rng.choice(valid))


def make_example(
    manifest: DatasetManifest,
    index: int,
    seed: int,
    split: str = "train",
) -> TrainingExample:
    """Deterministic (manifest, index, seed) -> example mapping.

    The utterance/RIR pairing, crop offset, and all gains derive from the
    seed stream, so a fixed (index, seed) always yields the same bits.
    """
    utts = manifest.split_utterances(split)
    rirs = manifest.split_rirs(split)
    if not utts or not rirs:
        raise ValueError(f"split {split!r} has no utterances or no RIRs")
    rng = _rng(seed, _TAG_EXAMPLE, index)
    utt_entry = utts[int(rng.integers(len(utts)))]
    rir_entry = rirs[int(rng.integers(len(rirs)))]

    utterance = read_wav(utt_entry.path)
    if utterance.duration < MIN_UTTERANCE_SECONDS:
        raise ValueError(f"{utt_entry.path}: utterance shorter than {MIN_UTTERANCE_SECONDS} s")
    rir = read_wav(rir_entry.path)
    h_target = AudioBuffer(_fit_length(rir.samples, RIR_SAMPLES), rir.sample_rate)

    reverberant = fft_convolve(utterance, AudioBuffer(h_target.samples, utterance.sample_rate), mode="full")
    offset = _pick_crop_offset(utterance.samples, EXAMPLE_INPUT_SAMPLES, rng)
    x = _fit_length(reverberant.samples[offset:], EXAMPLE_INPUT_SAMPLES)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (INPUT_PEAK / peak)

    return TrainingExample(
        x_r=AudioBuffer(x, utterance.sample_rate),
        h_target=h_target,
        speaker_id=utt_entry.speaker_id,
        room_id=rir_entry.room_id,
        utterance_path=utt_entry.path,
        rir_path=rir_entry.path,
        crop_offset=offset,
    )


def make_batch(manifest: DatasetManifest, indices, seed: int, split: str = "train"):
    """Stack examples into (B, 1, T) input and (B, L) target arrays."""
    examples = [make_example(manifest, i, seed, split) for i in indices]
    x = np.stack([e.x_r.samples for e in examples])[:, None, :].astype(np.float32)
    h = np.stack([e.h_target.samples for e in examples]).astype(np.float32)
    return x, h, examples


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------

def generate_corpus(
    out_dir: str | Path,
    num_rirs: int,
    num_speakers: int,
    utterances_per_speaker: int,
    seed: int,
    t60_range: tuple = (0.2, 1.0),
    drr_range: tuple = (-12.0, 12.0),
    utterance_seconds: tuple = (3.0, 6.0),
) -> DatasetManifest:
    """Write a complete synthetic corpus and its manifest under out_dir.

    Layout: utterances/spk<k>_<j>.wav, rirs/room<k>.wav plus
    rirs/ground_truth.csv (id,t60,drr) and manifest.jsonl.
    """
    out = Path(out_dir)
    utt_dir = out / "utterances"
    rir_dir = out / "rirs"
    utt_dir.mkdir(parents=True, exist_ok=True)
    rir_dir.mkdir(parents=True, exist_ok=True)

    master = _rng(seed, _TAG_RIR, _TAG_UTTERANCE)
    rows = []
    for k in range(num_rirs):
        spec = SynthRirSpec(
            t60=float(master.uniform(*t60_range)),
            drr=float(master.uniform(*drr_range)),
            direct_delay=int(master.integers(48, 480)),
            seed=int(master.integers(0, 2**31 - 1)),
        )
        rir, truth = generate_synth_rir(spec)
        room = f"room{k:04d}"
        write_wav(rir_dir / f"{room}.wav", rir)
        rows.append((room, truth.t60, truth.drr))
    with open(rir_dir / "ground_truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t60", "drr"])
        for room, t60, drr in rows:
            writer.writerow([room, f"{t60:.6f}", f"{drr:.6f}"])

    for s in range(num_speakers):
        speaker_seed = seed * 1000003 + s
        for j in range(utterances_per_speaker):
            duration = float(master.uniform(*utterance_seconds))
            utt = generate_utterance(duration, speaker_seed, utt_seed=j)
            write_wav(utt_dir / f"spk{s:03d}_{j:03d}.wav", utt)

    manifest = build_manifest(utt_dir, rir_dir, seed=seed)
    manifest.save(out / "manifest.jsonl")
    return manifest
