"""End-to-end tests of the command line interface.

Subcommands run in-process through cli.main so exit codes are plain return
values and stdout/stderr land in capsys.  A tiny corpus plus a two-step
checkpoint are built once per module.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from rirshape.cli import main, read_config_file
from rirshape.data import DatasetManifest, generate_corpus
from rirshape.dsp import AudioBuffer, fft_convolve
from rirshape.metrics import EvalSummary
from rirshape.model import ModelConfig, load_checkpoint, save_checkpoint
from rirshape.train import TrainConfig, fit
from rirshape.wavio import read_wav, write_wav


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    manifest = generate_corpus(
        root,
        num_rirs=4,
        num_speakers=3,
        utterances_per_speaker=1,
        seed=7,
        utterance_seconds=(3.0, 3.2),
    )
    return root, manifest


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    root, manifest = corpus
    out = tmp_path_factory.mktemp("clirun")
    fit(
        manifest,
        ModelConfig(scale=8),
        TrainConfig(batch_size=2, epochs=1, seed=3),
        out,
        steps_per_epoch=2,
    )
    return out / "best.ckpt"


def _utterance(corpus):
    root, manifest = corpus
    return manifest.utterances[0].path


# ---------------------------------------------------------------------------
# exit codes and config plumbing
# ---------------------------------------------------------------------------

def test_unknown_subcommand_exits_1(capsys):
    assert main(["nonsense"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_missing_required_flag_exits_1(capsys):
    assert main(["estimate", "--input", "x.wav"]) == 1


def test_unknown_config_key_exits_1(corpus, tmp_path, capsys):
    root, _ = corpus
    rc = main(
        [
            "train",
            "--manifest", str(root / "manifest.jsonl"),
            "--out-dir", str(tmp_path),
            "--set", "train.bogus=1",
        ]
    )
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_missing_input_file_exits_2(checkpoint, tmp_path, capsys):
    rc = main(
        [
            "estimate",
            "--input", str(tmp_path / "missing.wav"),
            "--checkpoint", str(checkpoint),
            "--out", str(tmp_path / "out.wav"),
        ]
    )
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("a.x=1\nb.y = direct  # trailing comment\n\n# full comment\nc.z=1e-4\n")
    values = read_config_file(cfg)
    assert values == {"a.x": 1, "b.y": "direct", "c.z": 1e-4}


def test_config_line_without_equals_exits_1(corpus, tmp_path, capsys):
    root, _ = corpus
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just some words\n")
    rc = main(
        [
            "train",
            "--manifest", str(root / "manifest.jsonl"),
            "--out-dir", str(tmp_path),
            "--config", str(cfg),
        ]
    )
    assert rc == 1


def test_set_overrides_config_file(corpus, tmp_path, capsys):
    root, _ = corpus
    cfg = tmp_path / "t.cfg"
    cfg.write_text("train.batch_size=2\n")
    rc = main(
        [
            "train",
            "--manifest", str(root / "manifest.jsonl"),
            "--out-dir", str(tmp_path / "run"),
            "--config", str(cfg),
            "--set", "train.batch_size=1",
            "--set", "train.steps_per_epoch=1",
            "--set", "model.scale=8",
        ]
    )
    assert rc == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("config: ")
    resolved = json.loads(first[len("config: ") :])
    assert resolved["train"]["batch_size"] == 1


def test_resolved_config_is_printed_first(corpus, capsys):
    root, _ = corpus
    rc = main(["analyze", "--input", str(root / "rirs" / "room0000.wav")])
    assert rc == 0
    first = capsys.readouterr().out.splitlines()[0]
    resolved = json.loads(first[len("config: ") :])
    assert resolved["subcommand"] == "analyze"


# ---------------------------------------------------------------------------
# corpus and manifest commands
# ---------------------------------------------------------------------------

def test_synth_data_and_build_manifest(tmp_path, capsys):
    rc = main(
        [
            "synth-data",
            "--out-dir", str(tmp_path / "c"),
            "--seed", "5",
            "--set", "data.num_rirs=4",
            "--set", "data.num_speakers=3",
            "--set", "data.utterances_per_speaker=1",
            "--set", "data.utt_seconds_lo=3.0",
            "--set", "data.utt_seconds_hi=3.1",
        ]
    )
    assert rc == 0
    manifest = DatasetManifest.load(tmp_path / "c" / "manifest.jsonl")
    assert len(manifest.rirs) == 4
    assert len(manifest.utterances) == 3

    rc = main(
        [
            "build-manifest",
            "--utterances", str(tmp_path / "c" / "utterances"),
            "--rirs", str(tmp_path / "c" / "rirs"),
            "--out", str(tmp_path / "m.jsonl"),
            "--seed", "5",
        ]
    )
    assert rc == 0
    rebuilt = DatasetManifest.load(tmp_path / "m.jsonl")
    assert {r.room_id for r in rebuilt.rirs} == {r.room_id for r in manifest.rirs}


def test_build_manifest_empty_dir_exits_2(tmp_path, capsys):
    (tmp_path / "u").mkdir()
    (tmp_path / "r").mkdir()
    rc = main(
        [
            "build-manifest",
            "--utterances", str(tmp_path / "u"),
            "--rirs", str(tmp_path / "r"),
            "--out", str(tmp_path / "m.jsonl"),
        ]
    )
    assert rc == 2


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------

def test_estimate_writes_rir_and_report(corpus, checkpoint, tmp_path, capsys):
    out = tmp_path / "est.wav"
    rc = main(
        [
            "estimate",
            "--input", _utterance(corpus),
            "--checkpoint", str(checkpoint),
            "--out", str(out),
            "--seed", "5",
        ]
    )
    assert rc == 0
    rir = read_wav(out)
    assert rir.sample_rate == 48000
    assert rir.samples.size == 48000
    assert np.all(np.isfinite(rir.samples))
    report = (tmp_path / "est.txt").read_text()
    for key in ("t60", "drr", "peak_sample", "peak_seconds"):
        assert key in report


def test_estimate_rejects_wrong_sample_rate(checkpoint, tmp_path, capsys):
    bad = tmp_path / "sr44.wav"
    write_wav(bad, AudioBuffer(np.zeros(44100) + 0.1, 44100))
    rc = main(
        ["estimate", "--input", str(bad), "--checkpoint", str(checkpoint), "--out", str(tmp_path / "o.wav")]
    )
    assert rc == 2
    err = capsys.readouterr().err
    assert "48000" in err and "44100" in err


def test_estimate_tiles_short_input(checkpoint, tmp_path, capsys):
    short = tmp_path / "short.wav"
    write_wav(short, AudioBuffer(np.random.default_rng(1).standard_normal(20000) * 0.1, 48000))
    rc = main(
        ["estimate", "--input", str(short), "--checkpoint", str(checkpoint), "--out", str(tmp_path / "o.wav")]
    )
    assert rc == 0
    assert "tiled 20000 samples up to 131072" in capsys.readouterr().out


def test_estimate_crops_long_input(corpus, checkpoint, tmp_path, capsys):
    rc = main(
        [
            "estimate",
            "--input", _utterance(corpus),
            "--checkpoint", str(checkpoint),
            "--out", str(tmp_path / "o.wav"),
        ]
    )
    assert rc == 0
    assert "down to 131072" in capsys.readouterr().out


def test_estimate_silent_input_warns_but_succeeds(checkpoint, tmp_path, capsys):
    silent = tmp_path / "silent.wav"
    write_wav(silent, AudioBuffer(np.zeros(48000), 48000))
    out = tmp_path / "o.wav"
    rc = main(["estimate", "--input", str(silent), "--checkpoint", str(checkpoint), "--out", str(out)])
    assert rc == 0
    assert "silent" in capsys.readouterr().err
    assert np.all(np.isfinite(read_wav(out).samples))


def test_estimate_deterministic_per_seed(corpus, checkpoint, tmp_path):
    args = ["estimate", "--input", _utterance(corpus), "--checkpoint", str(checkpoint)]
    paths = [tmp_path / name for name in ("a.wav", "b.wav", "c.wav")]
    assert main(args + ["--out", str(paths[0]), "--seed", "5"]) == 0
    assert main(args + ["--out", str(paths[1]), "--seed", "5"]) == 0
    assert main(args + ["--out", str(paths[2]), "--seed", "6"]) == 0
    a, b, c = (p.read_bytes() for p in paths)
    assert a == b
    assert a != c  # a different seed draws different decoder noise


def test_estimate_nonfinite_model_exits_3(checkpoint, corpus, tmp_path, capsys):
    params, config = load_checkpoint(checkpoint)
    params["mix.w"].data[:] = np.inf  # loads fine, poisons the forward pass
    broken = tmp_path / "broken.ckpt"
    save_checkpoint(broken, params, config)
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(
            [
                "estimate",
                "--input", _utterance(corpus),
                "--checkpoint", str(broken),
                "--out", str(tmp_path / "o.wav"),
            ]
        )
    assert rc == 3
    assert "numeric failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------

def test_match_equals_manual_convolution(corpus, checkpoint, tmp_path, capsys):
    root, manifest = corpus
    dry = manifest.utterances[1].path
    reference = manifest.utterances[0].path
    rir_path = tmp_path / "rir.wav"
    wet_path = tmp_path / "wet.wav"
    assert (
        main(
            [
                "estimate",
                "--input", reference,
                "--checkpoint", str(checkpoint),
                "--out", str(rir_path),
                "--seed", "5",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "match",
                "--dry", dry,
                "--reference", reference,
                "--checkpoint", str(checkpoint),
                "--out", str(wet_path),
                "--gain-mode", "none",
                "--seed", "5",
            ]
        )
        == 0
    )
    manual = fft_convolve(read_wav(dry), read_wav(rir_path), mode="full")
    manual_path = tmp_path / "manual.wav"
    write_wav(manual_path, manual)
    assert wet_path.read_bytes() == manual_path.read_bytes()


def test_match_normalizes_output_peak(corpus, checkpoint, tmp_path, capsys):
    root, manifest = corpus
    wet_path = tmp_path / "wet.wav"
    rc = main(
        [
            "match",
            "--dry", manifest.utterances[1].path,
            "--reference", manifest.utterances[0].path,
            "--checkpoint", str(checkpoint),
            "--out", str(wet_path),
            "--seed", "5",
        ]
    )
    assert rc == 0
    assert "applied_gain" in capsys.readouterr().out
    peak = np.max(np.abs(read_wav(wet_path).samples))
    assert peak == pytest.approx(0.95, rel=1e-4)  # float32 wav quantization


# ---------------------------------------------------------------------------
# eval and embed
# ---------------------------------------------------------------------------

def test_eval_writes_reports(corpus, checkpoint, tmp_path, capsys):
    root, manifest = corpus
    out = tmp_path / "ev"
    rc = main(
        [
            "eval",
            "--manifest", str(root / "manifest.jsonl"),
            "--checkpoint", str(checkpoint),
            "--split", "test",
            "--out-dir", str(out),
            "--seed", "2",
        ]
    )
    assert rc == 0
    lines = (out / "examples.csv").read_text().splitlines()
    assert len(lines) == 1 + len(manifest.split_utterances("test"))
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == EvalSummary.CSV_HEADER
    assert "t60_undefined" in (out / "summary.txt").read_text()


def test_eval_reports_are_reproducible(corpus, checkpoint, tmp_path):
    root, _ = corpus
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert (
            main(
                [
                    "eval",
                    "--manifest", str(root / "manifest.jsonl"),
                    "--checkpoint", str(checkpoint),
                    "--out-dir", str(out),
                    "--seed", "2",
                ]
            )
            == 0
        )
    for name in ("examples.csv", "summary.csv", "summary.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_embed_layout_and_reproducibility(corpus, checkpoint, tmp_path):
    root, manifest = corpus
    outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for out in outs:
        assert (
            main(
                [
                    "embed",
                    "--manifest", str(root / "manifest.jsonl"),
                    "--checkpoint", str(checkpoint),
                    "--split", "test",
                    "--out", str(out),
                    "--seed", "2",
                ]
            )
            == 0
        )
    lines = outs[0].read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["utterance", "room", "drr_true"]
    assert len(header) == 3 + 128
    assert len(lines) == 1 + len(manifest.split_utterances("test"))
    assert outs[0].read_bytes() == outs[1].read_bytes()


# ---------------------------------------------------------------------------
# analyze, train, gradcheck
# ---------------------------------------------------------------------------

def test_analyze_matches_ground_truth(corpus, capsys):
    root, manifest = corpus
    entry = manifest.rirs[0]
    rc = main(["analyze", "--input", entry.path])
    assert rc == 0
    report = {
        line.split(" ", 1)[0]: line.split(" ", 1)[1]
        for line in capsys.readouterr().out.splitlines()[1:]
        if " " in line
    }
    # the stored truth is the construction target; the generator lands
    # within 5% / 0.5 dB of it, so a fresh measurement must as well
    assert float(report["t60"]) == pytest.approx(entry.true_t60, rel=0.05)
    assert float(report["drr"]) == pytest.approx(entry.true_drr, abs=0.5)


def test_train_cli_writes_run_artifacts(corpus, tmp_path, capsys):
    root, _ = corpus
    out = tmp_path / "run"
    rc = main(
        [
            "train",
            "--manifest", str(root / "manifest.jsonl"),
            "--out-dir", str(out),
            "--seed", "3",
            "--set", "model.scale=8",
            "--set", "train.batch_size=1",
            "--set", "train.steps_per_epoch=1",
        ]
    )
    assert rc == 0
    for name in ("best.ckpt", "last.ckpt", "last.opt", "metrics.jsonl", "run.json"):
        assert (out / name).exists()
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
    kinds = [r["kind"] for r in records if "kind" in r]
    assert kinds.count("step") == 1
    assert kinds.count("val") == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "all gradient checks passed" in capsys.readouterr().out


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "rirshape.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "synth-data" in proc.stdout
