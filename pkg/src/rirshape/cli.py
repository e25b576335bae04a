"""Command line front end for the whole pipeline.

Every subcommand is batch-oriented and fully specified by its flags, an
optional key=value config file, and a seed; each prints the resolved
configuration before doing any work.  Exit codes are a stable contract:
0 success, 1 usage problem, 2 unreadable or inconsistent data, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, check_gradients
from .data import (
    EXAMPLE_INPUT_SAMPLES,
    INPUT_PEAK,
    SAMPLE_RATE,
    DatasetManifest,
    build_manifest,
    generate_corpus,
    make_example,
)
from .dsp import AudioBuffer, fft_convolve
from .metrics import (
    EvalSummary,
    StftLossConfig,
    aggregate,
    analyze_rir,
    stft_loss,
    stft_loss_value,
)
from .model import (
    CheckpointError,
    ModelConfig,
    encode,
    forward,
    init_params,
    load_checkpoint,
)
from .train import TrainConfig, fit
from .wavio import WavFormatError, read_wav, write_wav

OUTPUT_PEAK = 0.95


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with status 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise DataError(f"cannot read config file {path}: {err}") from err
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = _coerce(value.strip())
    return values


def gather_overrides(args) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(value.strip())
    return values


def _split_namespace(values: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}


def _reject_unknown(values: dict, allowed_prefixes) -> None:
    for key in values:
        if not any(key.startswith(p) for p in allowed_prefixes):
            raise UsageError(f"unknown config key {key!r}")


def build_model_config(values: dict) -> ModelConfig:
    overrides = _split_namespace(values, "model.")
    merged = ModelConfig().to_dict()
    for key, value in overrides.items():
        if key not in merged:
            raise UsageError(f"unknown model config key {key!r}")
        merged[key] = value
    try:
        return ModelConfig.from_dict(merged)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad model config: {err}") from err


def build_train_config(values: dict, seed: int) -> tuple:
    overrides = _split_namespace(values, "train.")
    steps_per_epoch = overrides.pop("steps_per_epoch", None)
    merged = TrainConfig(seed=seed).to_dict()
    for key, value in overrides.items():
        if key not in merged:
            raise UsageError(f"unknown train config key {key!r}")
        merged[key] = value
    try:
        return TrainConfig.from_dict(merged), steps_per_epoch
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad train config: {err}") from err


def _print_resolved(subcommand: str, seed: int, **extra) -> None:
    resolved = {"subcommand": subcommand, "seed": seed}
    resolved.update(extra)
    print("config: " + json.dumps(resolved, sort_keys=True))


# ---------------------------------------------------------------------------
# shared model plumbing
# ---------------------------------------------------------------------------

def _load_model(path):
    try:
        params, config = load_checkpoint(path)
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from err
    except CheckpointError as err:
        raise DataError(f"{path}: {err}") from err
    reference = init_params(config, seed=0)
    if list(params) != list(reference):
        raise DataError(f"{path}: parameter names do not match the declared config")
    for name in reference:
        if params[name].data.shape != reference[name].data.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {params[name].data.shape}, "
                f"config requires {reference[name].data.shape}"
            )
    return params, config


def _read_audio(path) -> AudioBuffer:
    try:
        return read_wav(path)
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    except (WavFormatError, ValueError) as err:
        raise DataError(f"{path}: {err}") from err


def _prepare_input(buf: AudioBuffer, label: str) -> tuple:
    """Shape one recording into the (1, 1, 131072) model input.

    Returns (array, notes).  Long inputs are cropped, short ones are tiled
    end to end; zero padding would read as silence to the encoder.
    """
    if buf.sample_rate != SAMPLE_RATE:
        raise DataError(f"{label}: expected sample rate {SAMPLE_RATE}, got {buf.sample_rate}")
    notes = []
    x = np.asarray(buf.samples, dtype=np.float64)
    n = x.size
    if n > EXAMPLE_INPUT_SAMPLES:
        x = x[:EXAMPLE_INPUT_SAMPLES]
        notes.append(f"cropped {n} samples down to {EXAMPLE_INPUT_SAMPLES}")
    elif n < EXAMPLE_INPUT_SAMPLES:
        reps = math.ceil(EXAMPLE_INPUT_SAMPLES / n)
        x = np.tile(x, reps)[:EXAMPLE_INPUT_SAMPLES]
        notes.append(f"tiled {n} samples up to {EXAMPLE_INPUT_SAMPLES}")
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        notes.append("warning: input is silent")
        print(f"warning: {label} is silent", file=sys.stderr)
    else:
        x = x * (INPUT_PEAK / peak)
        notes.append(f"input gain {INPUT_PEAK / peak:.6g}")
    return x.astype(np.float32)[None, None, :], notes


def _estimate_rir(params, config: ModelConfig, buf: AudioBuffer, label: str, seed: int) -> tuple:
    x, notes = _prepare_input(buf, label)
    pred = forward(
        Tensor(x, requires_grad=False),
        params,
        config,
        mode="eval",
        noise_seed=seed,
        latent_seed=seed,
    )
    return pred.rir.data[0].copy(), notes


def _rir_report(rir: np.ndarray, sample_rate: int, notes) -> str:
    try:
        info = analyze_rir(AudioBuffer(np.asarray(rir, dtype=np.float64), sample_rate))
    except ValueError as err:  # zero-energy signal: DRR has no meaning
        raise DataError(str(err)) from err
    peak = int(np.argmax(np.abs(rir)))
    lines = [
        f"t60 {'undefined' if info.t60 is None else f'{info.t60:.6f}'}",
        f"t60_method {info.t60_method}",
        f"drr {info.drr:.6f}",
        f"peak_sample {peak}",
        f"peak_seconds {peak / sample_rate:.6f}",
    ]
    for note in notes:
        lines.append(f"note {note}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    values = gather_overrides(args)
    _reject_unknown(values, ("data.",))
    data = _split_namespace(values, "data.")
    allowed = {
        "num_rirs": 12,
        "num_speakers": 4,
        "utterances_per_speaker": 3,
        "t60_lo": 0.2,
        "t60_hi": 1.0,
        "drr_lo": -12.0,
        "drr_hi": 12.0,
        "utt_seconds_lo": 3.0,
        "utt_seconds_hi": 6.0,
    }
    for key in data:
        if key not in allowed:
            raise UsageError(f"unknown data config key {key!r}")
    merged = {**allowed, **data}
    _print_resolved("synth-data", args.seed, out_dir=str(args.out_dir), data=merged)
    manifest = generate_corpus(
        args.out_dir,
        num_rirs=int(merged["num_rirs"]),
        num_speakers=int(merged["num_speakers"]),
        utterances_per_speaker=int(merged["utterances_per_speaker"]),
        seed=args.seed,
        t60_range=(merged["t60_lo"], merged["t60_hi"]),
        drr_range=(merged["drr_lo"], merged["drr_hi"]),
        utterance_seconds=(merged["utt_seconds_lo"], merged["utt_seconds_hi"]),
    )
    print(
        f"wrote {len(manifest.rirs)} RIRs and {len(manifest.utterances)} utterances "
        f"under {args.out_dir}"
    )
    return 0


def cmd_build_manifest(args) -> int:
    values = gather_overrides(args)
    _reject_unknown(values, ("data.",))
    data = _split_namespace(values, "data.")
    fractions = (
        data.pop("train_fraction", 0.8),
        data.pop("val_fraction", 0.1),
        data.pop("test_fraction", 0.1),
    )
    if data:
        raise UsageError(f"unknown data config key {sorted(data)[0]!r}")
    _print_resolved(
        "build-manifest",
        args.seed,
        utterances=str(args.utterances),
        rirs=str(args.rirs),
        out=str(args.out),
        fractions=fractions,
    )
    try:
        manifest = build_manifest(args.utterances, args.rirs, fractions=fractions, seed=args.seed)
    except (OSError, ValueError) as err:
        raise DataError(str(err)) from err
    manifest.save(args.out)
    print(f"wrote manifest with {len(manifest.utterances)} utterances, {len(manifest.rirs)} RIRs")
    return 0


def cmd_train(args) -> int:
    values = gather_overrides(args)
    _reject_unknown(values, ("model.", "train."))
    model_config = build_model_config(values)
    train_config, steps_per_epoch = build_train_config(values, args.seed)
    _print_resolved(
        "train",
        args.seed,
        manifest=str(args.manifest),
        out_dir=str(args.out_dir),
        model=model_config.to_dict(),
        train=train_config.to_dict(),
        steps_per_epoch=steps_per_epoch,
        resume=str(args.resume) if args.resume else None,
    )
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load manifest {args.manifest}: {err}") from err
    try:
        result = fit(
            manifest,
            model_config,
            train_config,
            args.out_dir,
            steps_per_epoch=int(steps_per_epoch) if steps_per_epoch is not None else None,
            resume_from=args.resume,
            log_fn=lambda record: print(json.dumps(record)),
        )
    except ValueError as err:
        raise DataError(str(err)) from err
    except RuntimeError as err:
        raise NumericError(str(err)) from err
    print(f"finished {result.steps} steps, best val loss {result.best_val:.6f}")
    return 0


def cmd_estimate(args) -> int:
    _print_resolved(
        "estimate",
        args.seed,
        input=str(args.input),
        checkpoint=str(args.checkpoint),
        out=str(args.out),
        report=str(args.report) if args.report else None,
    )
    params, config = _load_model(args.checkpoint)
    rir, notes = _estimate_rir(params, config, _read_audio(args.input), str(args.input), args.seed)
    if not np.all(np.isfinite(rir)):
        raise NumericError("estimated RIR is not finite")
    write_wav(args.out, AudioBuffer(rir.astype(np.float64), config.sample_rate))
    report = _rir_report(rir, config.sample_rate, notes)
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".txt")
    report_path.write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_match(args) -> int:
    _print_resolved(
        "match",
        args.seed,
        dry=str(args.dry),
        reference=str(args.reference),
        checkpoint=str(args.checkpoint),
        out=str(args.out),
        gain_mode=args.gain_mode,
        rir_out=str(args.rir_out) if args.rir_out else None,
    )
    params, config = _load_model(args.checkpoint)
    dry = _read_audio(args.dry)
    if dry.sample_rate != SAMPLE_RATE:
        raise DataError(f"{args.dry}: expected sample rate {SAMPLE_RATE}, got {dry.sample_rate}")
    reference = _read_audio(args.reference)
    rir, notes = _estimate_rir(params, config, reference, str(args.reference), args.seed)
    if not np.all(np.isfinite(rir)):
        raise NumericError("estimated RIR is not finite")

    rir_buf = AudioBuffer(rir.astype(np.float64), config.sample_rate)
    if args.rir_out:
        write_wav(args.rir_out, rir_buf)
        Path(args.rir_out).with_suffix(".txt").write_text(
            _rir_report(rir, config.sample_rate, notes)
        )
    wet = fft_convolve(dry, rir_buf, mode="full")
    gain = 1.0
    if args.gain_mode == "normalize":
        peak = float(np.max(np.abs(wet.samples)))
        if peak > 0.0:
            gain = OUTPUT_PEAK / peak
    samples = wet.samples * gain if gain != 1.0 else wet.samples
    write_wav(args.out, AudioBuffer(samples, wet.sample_rate))
    print(f"applied_gain {gain:.6g}")
    return 0


def _iter_eval_rows(manifest, params, config, split, seed, loss_cfg):
    utts = manifest.split_utterances(split)
    rir_by_path = {r.path: r for r in manifest.rirs}
    for index in range(len(utts)):
        example = make_example(manifest, index, seed, split)
        x = example.x_r.samples.astype(np.float32)[None, None, :]
        pred = forward(
            Tensor(x, requires_grad=False),
            params,
            config,
            mode="eval",
            noise_seed=seed,
            latent_seed=seed,
        )
        rir = pred.rir.data[0]
        target = example.h_target.samples.astype(np.float32)[None, :]
        loss = stft_loss_value(rir[None, :], target, loss_cfg)
        info = analyze_rir(AudioBuffer(rir.astype(np.float64), config.sample_rate))
        truth = rir_by_path[example.rir_path]
        yield {
            "index": index,
            "utterance": Path(example.utterance_path).stem,
            "room": example.room_id,
            "l_stft": loss,
            "t60_pred": info.t60,
            "t60_true": truth.true_t60,
            "drr_pred": info.drr,
            "drr_true": truth.true_drr,
        }


def cmd_eval(args) -> int:
    _print_resolved(
        "eval",
        args.seed,
        manifest=str(args.manifest),
        checkpoint=str(args.checkpoint),
        split=args.split,
        out_dir=str(args.out_dir),
    )
    params, config = _load_model(args.checkpoint)
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load manifest {args.manifest}: {err}") from err
    if not manifest.split_utterances(args.split) or not manifest.split_rirs(args.split):
        raise DataError(f"split {args.split!r} is empty")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(_iter_eval_rows(manifest, params, config, args.split, args.seed, None))

    with open(out / "examples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "utterance", "room", "l_stft", "t60_pred", "t60_true", "drr_pred", "drr_true"]
        )
        for r in rows:
            writer.writerow(
                [
                    r["index"],
                    r["utterance"],
                    r["room"],
                    f"{r['l_stft']:.6f}",
                    "" if r["t60_pred"] is None else f"{r['t60_pred']:.6f}",
                    f"{r['t60_true']:.6f}",
                    f"{r['drr_pred']:.6f}",
                    f"{r['drr_true']:.6f}",
                ]
            )

    defined = [r for r in rows if r["t60_pred"] is not None]
    summary = EvalSummary(
        model=config.mode,
        stft=float(np.mean([r["l_stft"] for r in rows])),
        t60=aggregate([(r["t60_pred"], r["t60_true"]) for r in defined]),
        drr=aggregate([(r["drr_pred"], r["drr_true"]) for r in rows]),
    )
    undefined = len(rows) - len(defined)
    text = summary.to_text() + f"t60_undefined {undefined}\n"
    (out / "summary.txt").write_text(text)
    (out / "summary.csv").write_text(EvalSummary.CSV_HEADER + "\n" + summary.to_csv_row() + "\n")
    sys.stdout.write(text)
    return 0


def cmd_embed(args) -> int:
    _print_resolved(
        "embed",
        args.seed,
        manifest=str(args.manifest),
        checkpoint=str(args.checkpoint),
        split=args.split,
        out=str(args.out),
    )
    params, config = _load_model(args.checkpoint)
    try:
        manifest = DatasetManifest.load(args.manifest)
    except (OSError, ValueError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load manifest {args.manifest}: {err}") from err
    utts = manifest.split_utterances(args.split)
    if not utts or not manifest.split_rirs(args.split):
        raise DataError(f"split {args.split!r} is empty")
    rir_by_path = {r.path: r for r in manifest.rirs}

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["utterance", "room", "drr_true"] + [f"z{i:03d}" for i in range(config.embed_dim)]
        )
        for index in range(len(utts)):
            example = make_example(manifest, index, args.seed, args.split)
            x = example.x_r.samples.astype(np.float32)[None, None, :]
            z = encode(Tensor(x, requires_grad=False), params, config, mode="eval").data[0]
            truth = rir_by_path[example.rir_path]
            writer.writerow(
                [Path(example.utterance_path).stem, example.room_id, f"{truth.true_drr:.6f}"]
                + [f"{value:.8e}" for value in z]
            )
    print(f"wrote {len(utts)} embeddings to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    _print_resolved(
        "analyze",
        args.seed,
        input=str(args.input),
        report=str(args.report) if args.report else None,
    )
    buf = _read_audio(args.input)
    report = _rir_report(
        buf.samples,
        buf.sample_rate,
        [f"length {buf.samples.size} samples at {buf.sample_rate} Hz"],
    )
    if args.report:
        Path(args.report).write_text(report)
    sys.stdout.write(report)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_cases(seed: int):
    """Small randomized shapes for every differentiable op family."""
    rng = np.random.default_rng(seed)

    def tensor(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x = tensor(2, 3, 16)
    w = tensor(4, 3, 5)
    yield "conv1d", lambda: ag.sum_axes(ag.square(ag.conv1d(x, w, stride=2, padding=2))), [x, w]

    xt = tensor(2, 3, 8)
    wt = tensor(3, 4, 6)
    yield (
        "conv_transpose1d",
        lambda: ag.sum_axes(ag.square(ag.conv_transpose1d(xt, wt, stride=3, padding=1))),
        [xt, wt],
    )

    xl = tensor(5, 7)
    wl = tensor(4, 7)
    bl = tensor(4)
    yield "linear", lambda: ag.sum_axes(ag.square(ag.linear(xl, wl, bl))), [xl, wl, bl]

    xp = tensor(2, 4, 9)
    a = Tensor(np.abs(rng.standard_normal(4)) + 0.1, requires_grad=True)
    yield "prelu", lambda: ag.sum_axes(ag.square(ag.prelu(xp, a))), [xp, a]

    xb = tensor(3, 4, 10)
    gamma = tensor(4)
    beta = tensor(4)
    yield (
        "batch_norm",
        lambda: ag.sum_axes(
            ag.square(
                ag.batch_norm1d(xb, gamma, beta, np.zeros(4), np.ones(4), training=True)
            )
        ),
        [xb, gamma, beta],
    )

    xs = tensor(3, 11)
    yield "sigmoid", lambda: ag.sum_axes(ag.square(ag.sigmoid(xs))), [xs]

    xa = tensor(2, 3, 12)
    gain = tensor(2, 3)
    shift = tensor(2, 3)
    yield (
        "channel_affine",
        lambda: ag.sum_axes(ag.square(ag.channel_affine(xa, gain, shift))), [xa, gain, shift],
    )

    xg = tensor(2, 5, 14)
    yield "adaptive_avg_pool1d", lambda: ag.sum_axes(ag.square(ag.adaptive_avg_pool1d(xg))), [xg]

    noise = rng.standard_normal(64)
    hf = tensor(3, 9)
    yield "fir_filter_causal", lambda: ag.sum_axes(ag.square(ag.fir_filter_causal(noise, hf))), [hf]

    xm = tensor(2, 96)
    yield "stft_mag", lambda: ag.sum_axes(ag.square(ag.stft_mag(xm, 32, 16))), [xm]


def _gradcheck_model(seed: int) -> float:
    """End-to-end 64-bit spot check of dL/dtheta through the full model."""
    config = ModelConfig(scale=8, filter_init="dirac")
    params = init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.items():
        if ".film.w" in name:
            t.data += rng.standard_normal(t.data.shape) * 0.05
    x = Tensor(rng.standard_normal((1, 1, 32768)))
    target = rng.standard_normal((1, 48000)) * 0.1
    loss_cfg = StftLossConfig(resolutions=[(512, 256)])

    def fn():
        pred = forward(x, params, config, mode="eval", noise_seed=3, latent_seed=5)
        return stft_loss(pred.rir, target, loss_cfg)

    groups = ["enc0.conv.w", "mlp0.w", "dec.v", "dec0.up.film.w", "filterbank.b", "mix.w"]
    return max(
        check_gradients(fn, [params[name]], n_samples=3, eps=1e-6, seed=0) for name in groups
    )


def cmd_gradcheck(args) -> int:
    _print_resolved("gradcheck", args.seed, seeds=args.seeds, e2e=args.e2e)
    failed = []
    for offset in range(args.seeds):
        for name, fn, tensors, in _gradcheck_cases(args.seed + offset):
            tolerance = 1e-3 if name == "batch_norm" else 1e-4
            err = check_gradients(fn, tensors, n_samples=5, eps=1e-3, seed=args.seed + offset)
            status = "ok" if err < tolerance else "FAIL"
            if err >= tolerance:
                failed.append(name)
            print(f"{name:20s} seed {args.seed + offset:3d}  rel err {err:.3e}  {status}")
    if args.e2e:
        err = _gradcheck_model(args.seed)
        status = "ok" if err < 1e-3 else "FAIL"
        if err >= 1e-3:
            failed.append("end_to_end")
        print(f"{'end_to_end':20s} seed {args.seed:3d}  rel err {err:.3e}  {status}")
    if failed:
        raise NumericError(f"gradient checks failed: {', '.join(sorted(set(failed)))}")
    print("all gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0, help="seed controlling every random draw")
    sub.add_argument("--config", type=Path, help="key=value config file")
    sub.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rirshape", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus with ground truth")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_common(p)
    p.set_defaults(run=cmd_synth_data)

    p = sub.add_parser("build-manifest", help="split WAV directories into a manifest")
    p.add_argument("--utterances", type=Path, required=True)
    p.add_argument("--rirs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(run=cmd_build_manifest)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="last.ckpt of the run to continue")
    _add_common(p)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("estimate", help="estimate the RIR behind a reverberant recording")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output RIR WAV")
    p.add_argument("--report", type=Path, help="report path (default: out with .txt)")
    _add_common(p)
    p.set_defaults(run=cmd_estimate)

    p = sub.add_parser("match", help="re-reverberate dry audio to match a reference room")
    p.add_argument("--dry", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rir-out", type=Path, help="also write the estimated RIR here")
    p.add_argument("--gain-mode", choices=("normalize", "none"), default="normalize")
    _add_common(p)
    p.set_defaults(run=cmd_match)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out-dir", type=Path, required=True)
    _add_common(p)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("embed", help="dump encoder embeddings for a manifest split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(run=cmd_embed)

    p = sub.add_parser("analyze", help="acoustic parameters of one RIR WAV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--report", type=Path)
    _add_common(p)
    p.set_defaults(run=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op family")
    p.add_argument("--seeds", type=int, default=3, help="number of random seeds per op")
    p.add_argument("--e2e", action="store_true", help="also check through the full model")
    _add_common(p)
    p.set_defaults(run=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.run(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
