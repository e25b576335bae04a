"""Optimization loop: AdamW, stepped LR halving, norm clipping, resume.

A run is a pure function of (manifest, model config, train config): batch
composition, crop offsets, and the decoder noise draws all derive from the
configured seed and the step index, never from hidden generator state.  That
is what makes a checkpoint resume bit-identical to the uninterrupted run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import DatasetManifest, make_batch
from .dsp import AudioBuffer
from .metrics import StftLossConfig, analyze_rir, stft_loss, stft_loss_value
from .model import (
    ModelConfig,
    forward,
    init_params,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Batch",
    "FitResult",
    "NonFiniteLossError",
    "lr_at",
    "global_grad_norm",
    "clip_gradients_",
    "adamw_step_",
    "init_optimizer",
    "batch_from_manifest",
    "train_step",
    "fit",
]

# seeds for model noise draws during validation; training steps use the
# step index instead
_VAL_SEED_TAG = 2**31


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    lr_halving_interval: int = 40000
    grad_clip_norm: float = 5.0
    batch_size: int = 8
    epochs: int = 1
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for field_name in ("lr0", "lr_halving_interval", "grad_clip_norm", "epochs", "eps"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"{field_name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must not be negative")
        for field_name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, field_name) < 1.0:
                raise ValueError(f"{field_name} must lie strictly inside (0, 1)")
        if self.seed < 0:
            raise ValueError("seed must not be negative")

    def to_dict(self) -> dict:
        return {
            "lr0": self.lr0,
            "lr_halving_interval": self.lr_halving_interval,
            "grad_clip_norm": self.grad_clip_norm,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate as a pure function of completed optimizer steps."""
    return cfg.lr0 * 0.5 ** (step // cfg.lr_halving_interval)


def step_seed(seed: int, index: int, stream: int) -> int:
    """Stable per-step seed for the decoder noise draws."""
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name plus the completed-step count."""

    step: int
    m: dict
    v: dict


def init_optimizer(params: dict) -> OptimizerState:
    m = {name: np.zeros_like(t.data) for name, t in params.items() if t.requires_grad}
    v = {name: np.zeros_like(t.data) for name, t in params.items() if t.requires_grad}
    return OptimizerState(step=0, m=m, v=v)


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for t in params.values():
        if t.requires_grad and t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients_(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm.  Rescaling every gradient by the same factor
    leaves the direction untouched.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for t in params.values():
            if t.requires_grad and t.grad is not None:
                t.grad *= factor
    return norm


def adamw_step_(params: dict, state: OptimizerState, cfg: TrainConfig) -> float:
    """One AdamW update in place; returns the learning rate that was applied.

    Weight decay is decoupled: it scales the parameter directly and never
    enters the moment estimates.
    """
    lr = lr_at(cfg, state.step)
    t = state.step + 1
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        denom = np.sqrt(v / bias2) + cfg.eps
        p.data -= lr * ((m / bias1) / denom + cfg.weight_decay * p.data)
    state.step += 1
    return lr


def save_optimizer_state(path, state: OptimizerState, cfg: TrainConfig, extra: dict | None = None) -> None:
    meta = {"kind": "optimizer", "step": state.step, "train_config": cfg.to_dict()}
    if extra:
        meta.update(extra)
    arrays = {}
    for name, value in state.m.items():
        arrays[f"m.{name}"] = value
    for name, value in state.v.items():
        arrays[f"v.{name}"] = value
    write_container(path, meta, arrays)


def load_optimizer_state(path) -> tuple:
    """Returns (OptimizerState, meta dict as stored)."""
    meta, arrays = read_container(path)
    if meta.get("kind") != "optimizer":
        raise ValueError(f"{path}: not an optimizer state file")
    m = {name[2:]: data for name, data in arrays.items() if name.startswith("m.")}
    v = {name[2:]: data for name, data in arrays.items() if name.startswith("v.")}
    return OptimizerState(step=int(meta["step"]), m=m, v=v), meta


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray        # (B, 1, T) float32 reverberant input
    target: np.ndarray   # (B, L) float32 target RIRs
    ids: list            # one "utterance+rir" label per row
    examples: list | None = None


def batch_from_manifest(manifest: DatasetManifest, indices, seed: int, split: str = "train") -> Batch:
    x, h, examples = make_batch(manifest, indices, seed, split)
    ids = [f"{Path(e.utterance_path).stem}+{Path(e.rir_path).stem}" for e in examples]
    return Batch(x=x, target=h, ids=ids, examples=examples)


class NonFiniteLossError(RuntimeError):
    def __init__(self, value: float, ids: list):
        super().__init__(f"non-finite loss {value!r} on batch [{', '.join(ids)}]")
        self.value = value
        self.ids = list(ids)


def train_step(
    batch: Batch,
    params: dict,
    opt_state: OptimizerState,
    cfg: TrainConfig,
    model_config: ModelConfig,
    noise_seed: int | None = None,
    latent_seed: int | None = None,
    loss_cfg: StftLossConfig | None = None,
) -> tuple:
    """Forward, loss, backward, clip, AdamW update.  Returns (loss, grad norm).

    The returned norm is measured before clipping.  A non-finite loss aborts
    the step before any state changes and names the offending batch rows.
    """
    if noise_seed is None:
        noise_seed = step_seed(cfg.seed, opt_state.step, 0)
    if latent_seed is None:
        latent_seed = step_seed(cfg.seed, opt_state.step, 1)

    for t in params.values():
        if t.requires_grad:
            t.grad = None

    x = ag.Tensor(batch.x, requires_grad=False)
    pred = forward(x, params, model_config, mode="train", noise_seed=noise_seed, latent_seed=latent_seed)
    loss = stft_loss(pred.rir, batch.target, loss_cfg)
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise NonFiniteLossError(loss_value, batch.ids)

    ag.backward(loss)
    grad_norm = clip_gradients_(params, cfg.grad_clip_norm)
    adamw_step_(params, opt_state, cfg)
    return loss_value, grad_norm


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    steps: int
    best_val: float
    best_path: Path
    last_path: Path
    metrics_path: Path


def _validate(manifest, params, model_config, cfg, loss_cfg) -> dict:
    """Mean val loss plus T60/DRR bias of the predictions against ground truth."""
    utts = manifest.split_utterances("val")
    rir_by_path = {r.path: r for r in manifest.rirs}
    total_loss = 0.0
    t60_errors = []
    drr_errors = []
    undefined = 0
    count = 0
    for lo in range(0, len(utts), cfg.batch_size):
        indices = range(lo, min(lo + cfg.batch_size, len(utts)))
        batch = batch_from_manifest(manifest, indices, cfg.seed, split="val")
        x = ag.Tensor(batch.x, requires_grad=False)
        pred = forward(
            x,
            params,
            model_config,
            mode="eval",
            noise_seed=step_seed(cfg.seed, _VAL_SEED_TAG, 0),
            latent_seed=step_seed(cfg.seed, _VAL_SEED_TAG, 1),
        )
        rirs = pred.rir.data
        total_loss += stft_loss_value(rirs, batch.target, loss_cfg) * len(batch.ids)
        count += len(batch.ids)
        for row, example in enumerate(batch.examples):
            truth = rir_by_path[example.rir_path]
            info = analyze_rir(AudioBuffer(rirs[row].astype(np.float64), model_config.sample_rate))
            if info.t60 is None:
                undefined += 1
            else:
                t60_errors.append(info.t60 - truth.true_t60)
            drr_errors.append(info.drr - truth.true_drr)
    return {
        "val_loss": total_loss / count,
        "val_t60_bias": float(np.mean(t60_errors)) if t60_errors else None,
        "val_drr_bias": float(np.mean(drr_errors)) if drr_errors else None,
        "val_t60_undefined": undefined,
        "val_examples": count,
    }


def fit(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir,
    steps_per_epoch: int | None = None,
    resume_from=None,
    loss_cfg: StftLossConfig | None = None,
    log_fn=None,
) -> FitResult:
    """Train on the manifest's train split, validate per epoch, keep the best.

    Writes into out_dir: metrics.jsonl (one record per step plus one val
    record per epoch), best.ckpt (lowest val loss), last.ckpt/last.opt
    (resume point), and run.json (the full configuration stamp).  Passing
    resume_from=<last.ckpt> continues a run bit-identically.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not manifest.split_utterances("train") or not manifest.split_rirs("train"):
        raise ValueError("empty train split")
    if not manifest.split_utterances("val") or not manifest.split_rirs("val"):
        raise ValueError("empty val split")

    if steps_per_epoch is None:
        steps_per_epoch = max(1, math.ceil(len(manifest.split_utterances("train")) / cfg.batch_size))

    best_val = math.inf
    start_epoch = 0
    if resume_from is not None:
        ckpt_path = Path(resume_from)
        params, stored_config = load_checkpoint(ckpt_path)
        if stored_config != model_config:
            raise ValueError("checkpoint model config does not match the requested one")
        opt_state, meta = load_optimizer_state(ckpt_path.with_suffix(".opt"))
        stored_train = dict(meta["train_config"])
        requested = cfg.to_dict()
        # a resumed run may extend epochs; everything else must match bit for bit
        stored_train.pop("epochs")
        requested.pop("epochs")
        if stored_train != requested:
            raise ValueError("optimizer state was written under a different train config")
        if meta.get("steps_per_epoch") != steps_per_epoch:
            raise ValueError("steps_per_epoch differs from the stored run")
        start_epoch = int(meta["epoch"])
        best_val = float(meta["best_val"])
    else:
        params = init_params(model_config, seed=cfg.seed)
        opt_state = init_optimizer(params)

    stamp = {
        "model_config": model_config.to_dict(),
        "train_config": cfg.to_dict(),
        "steps_per_epoch": steps_per_epoch,
        "manifest_seed": manifest.seed,
    }
    with open(out / "run.json", "w") as fh:
        json.dump(stamp, fh, indent=2, sort_keys=True)
        fh.write("\n")

    metrics_path = out / "metrics.jsonl"
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    consecutive_bad = 0

    with open(metrics_path, "a") as metrics:
        def emit(record):
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()
            if log_fn is not None:
                log_fn(record)

        for epoch in range(start_epoch, cfg.epochs):
            for j in range(steps_per_epoch):
                # the schedule index is epoch-based so aborted steps cannot
                # shift which examples later steps see
                index = epoch * steps_per_epoch + j
                rows = range(index * cfg.batch_size, (index + 1) * cfg.batch_size)
                batch = batch_from_manifest(manifest, rows, cfg.seed)
                step = opt_state.step
                started = time.perf_counter()
                try:
                    loss_value, grad_norm = train_step(
                        batch,
                        params,
                        opt_state,
                        cfg,
                        model_config,
                        noise_seed=step_seed(cfg.seed, index, 0),
                        latent_seed=step_seed(cfg.seed, index, 1),
                        loss_cfg=loss_cfg,
                    )
                except NonFiniteLossError as bad:
                    consecutive_bad += 1
                    emit({"kind": "abort", "step": step, "epoch": epoch, "ids": bad.ids})
                    if consecutive_bad >= 3:
                        raise RuntimeError(
                            f"3 consecutive non-finite losses, last batch [{', '.join(bad.ids)}]"
                        ) from bad
                    continue
                consecutive_bad = 0
                emit(
                    {
                        "kind": "step",
                        "step": step,
                        "lr": lr_at(cfg, step),
                        "train_loss": loss_value,
                        "grad_norm": grad_norm,
                        "wall_ms": (time.perf_counter() - started) * 1e3,
                    }
                )

            val = _validate(manifest, params, model_config, cfg, loss_cfg)
            emit({"kind": "val", "epoch": epoch, "step": opt_state.step, **val})
            if val["val_loss"] < best_val:
                best_val = val["val_loss"]
                save_checkpoint(best_path, params, model_config)
            save_checkpoint(last_path, params, model_config)
            save_optimizer_state(
                last_path.with_suffix(".opt"),
                opt_state,
                cfg,
                extra={"epoch": epoch + 1, "best_val": best_val, "steps_per_epoch": steps_per_epoch},
            )

    return FitResult(
        steps=opt_state.step,
        best_val=best_val,
        best_path=best_path,
        last_path=last_path,
        metrics_path=metrics_path,
    )
