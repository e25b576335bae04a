"""Blind RIR estimator: encoder, filtered-noise decoder, checkpoint format.

A strided time-domain encoder summarizes reverberant speech into a latent
vector z.  A decoder upsamples a trainable input vector to full RIR length,
conditioned on concat(z, n) through per-channel FiLM modulation, and emits
sigmoid masks that gate a bank of filtered noise signals plus a windowed
early-reflection channel; a 1x1 convolution mixes them into the estimate.
A `direct` mode replaces the masked synthesis with one head channel used
as the RIR sample-for-sample.

Everything runs on the autograd tensors from this package, so a forward
pass here is differentiable end to end, filterbank included.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import design_octave_bandpass_bank, octave_band_edges

ENCODER_CHANNELS = (32, 32, 64, 64, 128, 128, 192, 192, 256, 256, 384, 384, 512, 512)
ENCODER_KERNEL = 15
ENCODER_STRIDE = 2
ENCODER_PADDING = 7
DECODER_CHANNELS = (512, 256, 128, 64)
UPSAMPLE_FACTORS = (5, 4, 3, 2)
REFINE_DILATIONS = (1, 2, 4)
MIN_INPUT_SAMPLES = 1 << 14

CHECKPOINT_MAGIC = b"FINSCKPT"
CHECKPOINT_VERSION = 1

# seed stream tags, disjoint from the data module's
_TAG_INIT = 201
_TAG_NOISE_WAVE = 202
_TAG_NOISE_LATENT = 203

MODES = ("noise_shaping", "direct")
FILTER_INITS = ("bandpass", "dirac")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.  `scale` divides every channel width so small
    configurations train quickly while keeping the layer structure intact."""

    embed_dim: int = 128
    decoder_input_len: int = 400
    num_filters: int = 10
    filter_order: int = 1023
    rir_len: int = 48000
    early_len: int = 2400
    encoder_blocks: int = 14
    encoder_max_channels: int = 512
    mode: str = "noise_shaping"
    scale: int = 1
    filter_init: str = "bandpass"
    sample_rate: int = 48000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.filter_init not in FILTER_INITS:
            raise ValueError(f"filter_init must be one of {FILTER_INITS}, got {self.filter_init!r}")
        if self.scale not in (1, 2, 4, 8):
            raise ValueError(f"scale must be 1, 2, 4 or 8, got {self.scale}")
        if self.encoder_blocks != len(ENCODER_CHANNELS):
            raise ValueError(f"encoder_blocks must be {len(ENCODER_CHANNELS)}, got {self.encoder_blocks}")
        if self.encoder_max_channels != ENCODER_CHANNELS[-1]:
            raise ValueError(f"encoder_max_channels must be {ENCODER_CHANNELS[-1]}, got {self.encoder_max_channels}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.decoder_input_len < 1 or self.rir_len < 1:
            raise ValueError("decoder_input_len and rir_len must be positive")
        factor = int(np.prod(UPSAMPLE_FACTORS))
        if self.decoder_input_len * factor != self.rir_len:
            raise ValueError(
                f"upsample factors {UPSAMPLE_FACTORS} take {self.decoder_input_len} to "
                f"{self.decoder_input_len * factor}, not rir_len {self.rir_len}"
            )
        if not 0 <= self.early_len <= self.rir_len:
            raise ValueError(f"early_len must lie in [0, {self.rir_len}], got {self.early_len}")
        if self.mode == "noise_shaping" and self.num_filters < 1:
            raise ValueError("noise_shaping mode needs at least one filter")
        if self.filter_order < 1 or self.filter_order % 2 == 0:
            raise ValueError(f"filter_order must be odd and positive, got {self.filter_order}")
        if self.sample_rate < 1:
            raise ValueError("sample_rate must be positive")

    @property
    def encoder_channels(self) -> tuple:
        return tuple(c // self.scale for c in ENCODER_CHANNELS)

    @property
    def decoder_channels(self) -> tuple:
        return tuple(c // self.scale for c in DECODER_CHANNELS)

    @property
    def mlp_hidden(self) -> int:
        return self.encoder_max_channels // self.scale

    @property
    def cond_dim(self) -> int:
        # FiLM conditioning vector is concat(z, n), both embed_dim long
        return 2 * self.embed_dim

    @property
    def head_channels(self) -> int:
        return 1 if self.mode == "direct" else self.num_filters + 1

    @property
    def filter_taps(self) -> int:
        return self.filter_order + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# noise draws
# ---------------------------------------------------------------------------

def filter_noise_wave(length: int, noise_seed: int, dtype=np.float32) -> np.ndarray:
    """The shared white-noise signal w behind the filterbank, one draw per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_NOISE_WAVE, int(noise_seed)]))
    return rng.standard_normal(length).astype(dtype)


def latent_noise(batch: int, dim: int, latent_seed: int, dtype=np.float32) -> np.ndarray:
    """Per-example Gaussian noise vectors n fed into the FiLM conditioning."""
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_NOISE_LATENT, int(latent_seed)]))
    return rng.standard_normal((batch, dim)).astype(dtype)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan)
    return ((rng.random(shape) * 2.0 - 1.0) * bound).astype(dtype)


def _prolate_bandpass(taps: int, lo: float, hi: float, start: np.ndarray) -> np.ndarray:
    """Unit-energy FIR with maximal spectral concentration in [lo, hi].

    Power iteration on the band-limiting operator; its top eigenvector is
    the discrete prolate sequence for the band, the best such filter this
    length allows.  Narrow low octaves sit near their concentration bound
    (a windowed sinc leaks almost half its energy there), which is why the
    bank is initialized this way rather than from the sum-flat analyzer
    bank in dsp.
    """
    d = np.arange(taps)[:, None] - np.arange(taps)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        op = (np.sin(2 * np.pi * hi * d) - np.sin(2 * np.pi * lo * d)) / (np.pi * d)
    np.fill_diagonal(op, 2.0 * (hi - lo))
    v = start / np.linalg.norm(start)
    previous = 0.0
    for _ in range(200):
        v = op @ v
        v /= np.linalg.norm(v)
        concentration = v @ (op @ v)
        if concentration - previous < 1e-9:
            break
        previous = concentration
    return v


_FILTERBANK_CACHE: dict = {}


def _bandpass_filterbank(config: ModelConfig, dtype) -> np.ndarray:
    key = (config.num_filters, config.filter_taps, config.sample_rate)
    if key not in _FILTERBANK_CACHE:
        m, taps, sr = key
        edges = octave_band_edges(m, sr)
        # the windowed-sinc design seeds the iteration deterministically
        seed_bank = design_octave_bandpass_bank(m, config.filter_order, sr)
        rows = []
        for i in range(m):
            lo = 0.0 if i == 0 else edges[i] / sr
            hi = 0.5 if i == m - 1 else edges[i + 1] / sr
            rows.append(_prolate_bandpass(taps, lo, hi, seed_bank[i].coefficients))
        _FILTERBANK_CACHE[key] = np.stack(rows)
    return _FILTERBANK_CACHE[key].astype(dtype)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fresh parameter map.  Iteration order is the documented layout order
    and fixes the checkpoint manifest order."""
    rng = np.random.default_rng(np.random.SeedSequence([_TAG_INIT, int(seed)]))
    p: dict[str, Tensor] = {}

    def param(name, data):
        p[name] = Tensor(data, requires_grad=True, name=name)

    def buffer(name, data):
        p[name] = Tensor(data, requires_grad=False, name=name)

    def bn(prefix, c):
        param(f"{prefix}.gamma", np.ones(c, dtype=dtype))
        param(f"{prefix}.beta", np.zeros(c, dtype=dtype))
        buffer(f"{prefix}.running_mean", np.zeros(c, dtype=dtype))
        buffer(f"{prefix}.running_var", np.ones(c, dtype=dtype))

    def film(prefix, c):
        # zero weights with bias (1...,0...) make every FiLM site start as identity
        param(f"{prefix}.w", np.zeros((2 * c, config.cond_dim), dtype=dtype))
        param(f"{prefix}.b", np.concatenate([np.ones(c, dtype=dtype), np.zeros(c, dtype=dtype)]))

    enc = config.encoder_channels
    c_in = 1
    for b, c_out in enumerate(enc):
        param(f"enc{b}.conv.w", _uniform(rng, (c_out, c_in, ENCODER_KERNEL), c_in * ENCODER_KERNEL, dtype))
        bn(f"enc{b}.bn", c_out)
        param(f"enc{b}.prelu.a", np.full(c_out, 0.25, dtype=dtype))
        param(f"enc{b}.res.w", _uniform(rng, (c_out, c_in, 1), c_in, dtype))
        bn(f"enc{b}.res_bn", c_out)
        c_in = c_out

    hidden = config.mlp_hidden
    param("mlp0.w", _uniform(rng, (hidden, hidden), hidden, dtype))
    param("mlp0.b", np.zeros(hidden, dtype=dtype))
    param("mlp0.prelu.a", np.full(hidden, 0.25, dtype=dtype))
    param("mlp1.w", _uniform(rng, (hidden, hidden), hidden, dtype))
    param("mlp1.b", np.zeros(hidden, dtype=dtype))
    param("mlp1.prelu.a", np.full(hidden, 0.25, dtype=dtype))
    param("mlp2.w", _uniform(rng, (config.embed_dim, hidden), hidden, dtype))
    param("mlp2.b", np.zeros(config.embed_dim, dtype=dtype))

    param("dec.v", rng.standard_normal((1, 1, config.decoder_input_len)).astype(dtype))
    c_in = 1
    for i, (factor, c_out) in enumerate(zip(UPSAMPLE_FACTORS, config.decoder_channels)):
        kernel = 2 * factor
        param(f"dec{i}.up.w", _uniform(rng, (c_in, c_out, kernel), c_in * kernel, dtype))
        film(f"dec{i}.up.film", c_out)
        param(f"dec{i}.up.prelu.a", np.full(c_out, 0.25, dtype=dtype))
        for j in range(len(REFINE_DILATIONS)):
            param(f"dec{i}.ref{j}.conv.w", _uniform(rng, (c_out, c_out, 3), c_out * 3, dtype))
            film(f"dec{i}.ref{j}.film", c_out)
            param(f"dec{i}.ref{j}.prelu.a", np.full(c_out, 0.25, dtype=dtype))
        c_in = c_out

    param("head.w", _uniform(rng, (config.head_channels, c_in, 1), c_in, dtype))
    param("head.b", np.zeros(config.head_channels, dtype=dtype))

    if config.mode == "noise_shaping":
        if config.filter_init == "bandpass":
            coeffs = _bandpass_filterbank(config, dtype)
        else:
            coeffs = np.zeros((config.num_filters, config.filter_taps), dtype=dtype)
            coeffs[:, 0] = 1.0
        param("filterbank.b", coeffs)
        param("mix.w", np.full((1, config.num_filters + 1, 1), 1.0 / (config.num_filters + 1), dtype=dtype))

    return p


def trainable_items(params: dict) -> list:
    return [(name, t) for name, t in params.items() if t.requires_grad]


def param_count(params: dict, trainable_only: bool = True) -> int:
    return sum(t.data.size for _, t in params.items() if t.requires_grad or not trainable_only)


def describe(params: dict, config: ModelConfig) -> str:
    """Human-readable layer table; the totals are what tests check against
    the shape arithmetic."""
    lines = [f"mode={config.mode} scale={config.scale} embed_dim={config.embed_dim}"]
    width = max(len(name) for name in params)
    for name, t in params.items():
        kind = "param " if t.requires_grad else "buffer"
        shape = "x".join(str(s) for s in t.data.shape)
        lines.append(f"{name:<{width}}  {kind}  {shape:<14} {t.data.size}")
    lines.append(f"trainable parameters: {param_count(params)}")
    lines.append(f"buffers: {param_count(params, trainable_only=False) - param_count(params)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass
class RirPrediction:
    """Batch prediction: rir (B, L); the rest only in noise_shaping mode."""

    rir: Tensor
    masks: Tensor | None = None
    early: Tensor | None = None
    late: Tensor | None = None


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _feature_prelu(x: Tensor, a: Tensor) -> Tensor:
    b, f = x.data.shape
    return ag.reshape(ag.prelu(ag.reshape(x, (b, f, 1)), a), (b, f))


def encode(x: Tensor, params: dict, config: ModelConfig, mode: str = "train") -> Tensor:
    """Reverberant input (B, 1, T) to latent embeddings (B, embed_dim)."""
    training = _check_mode(mode)
    if x.data.ndim != 3 or x.data.shape[1] != 1:
        raise ValueError(f"encoder input must be (B, 1, T), got {x.data.shape}")
    if x.data.shape[2] < MIN_INPUT_SAMPLES:
        raise ValueError(f"encoder input must have at least {MIN_INPUT_SAMPLES} samples, got {x.data.shape[2]}")

    h = x
    for b in range(len(config.encoder_channels)):
        main = ag.conv1d(h, params[f"enc{b}.conv.w"], stride=ENCODER_STRIDE, padding=ENCODER_PADDING)
        main = ag.batch_norm1d(
            main, params[f"enc{b}.bn.gamma"], params[f"enc{b}.bn.beta"],
            params[f"enc{b}.bn.running_mean"].data, params[f"enc{b}.bn.running_var"].data, training,
        )
        main = ag.prelu(main, params[f"enc{b}.prelu.a"])
        res = ag.conv1d(h, params[f"enc{b}.res.w"], stride=ENCODER_STRIDE)
        res = ag.batch_norm1d(
            res, params[f"enc{b}.res_bn.gamma"], params[f"enc{b}.res_bn.beta"],
            params[f"enc{b}.res_bn.running_mean"].data, params[f"enc{b}.res_bn.running_var"].data, training,
        )
        h = ag.add(main, res)

    pooled = ag.reshape(ag.adaptive_avg_pool1d(h, 1), h.data.shape[:2])
    z = _feature_prelu(ag.linear(pooled, params["mlp0.w"], params["mlp0.b"]), params["mlp0.prelu.a"])
    z = _feature_prelu(ag.linear(z, params["mlp1.w"], params["mlp1.b"]), params["mlp1.prelu.a"])
    return ag.linear(z, params["mlp2.w"], params["mlp2.b"])


def synthesize_filtered_noise(params: dict, config: ModelConfig, noise_seed: int, length: int | None = None) -> Tensor:
    """One shared noise draw through every trainable filter: (M, length)."""
    length = config.rir_len if length is None else length
    w = filter_noise_wave(length, noise_seed, params["filterbank.b"].data.dtype)
    return ag.fir_filter_causal(w, params["filterbank.b"])


def _film(x: Tensor, cond: Tensor, params: dict, prefix: str) -> Tensor:
    c = x.data.shape[1]
    proj = ag.linear(cond, params[f"{prefix}.w"], params[f"{prefix}.b"])
    gain = ag.slice_axis(proj, 1, 0, c)
    shift = ag.slice_axis(proj, 1, c, 2 * c)
    return ag.channel_affine(x, gain, shift)


def decode(z: Tensor, params: dict, config: ModelConfig, noise_seed: int = 0, latent_seed: int = 0) -> RirPrediction:
    """Latent embeddings (B, embed_dim) to RIRs (B, rir_len).

    `noise_seed` draws the filterbank excitation w, `latent_seed` draws the
    conditioning vectors n; masks depend on (z, n) only, so changing just
    `noise_seed` moves the late field under identical masks.
    """
    if z.data.ndim != 2 or z.data.shape[1] != config.embed_dim:
        raise ValueError(f"embedding must be (B, {config.embed_dim}), got {z.data.shape}")
    batch = z.data.shape[0]

    n = Tensor(latent_noise(batch, config.embed_dim, latent_seed, z.data.dtype))
    cond = ag.concat([z, n], axis=1)

    h = ag.broadcast_batch(params["dec.v"], batch)
    for i, factor in enumerate(UPSAMPLE_FACTORS):
        target = h.data.shape[2] * factor
        h = ag.conv_transpose1d(h, params[f"dec{i}.up.w"], stride=factor, padding=factor // 2)
        if h.data.shape[2] != target:
            # odd factors overshoot the exact multiple by one sample
            h = ag.slice_axis(h, 2, 0, target)
        h = _film(h, cond, params, f"dec{i}.up.film")
        h = ag.prelu(h, params[f"dec{i}.up.prelu.a"])
        for j, dilation in enumerate(REFINE_DILATIONS):
            y = ag.conv1d(h, params[f"dec{i}.ref{j}.conv.w"], dilation=dilation, padding=dilation)
            y = _film(y, cond, params, f"dec{i}.ref{j}.film")
            y = ag.prelu(y, params[f"dec{i}.ref{j}.prelu.a"])
            h = ag.add(h, y)

    head = ag.conv1d(h, params["head.w"], params["head.b"])

    if config.mode == "direct":
        return RirPrediction(rir=ag.reshape(head, (batch, config.rir_len)))

    m = config.num_filters
    masks = ag.sigmoid(ag.slice_axis(head, 1, 0, m))
    early = ag.slice_axis(head, 1, m, m + 1)
    keep = np.zeros((1, 1, config.rir_len), dtype=head.data.dtype)
    keep[:, :, : config.early_len] = 1.0
    early = ag.cmul(early, keep)

    s = synthesize_filtered_noise(params, config, noise_seed)
    s_batch = ag.broadcast_batch(ag.reshape(s, (1, m, config.rir_len)), batch)
    late = ag.mul(masks, s_batch)

    mixed = ag.conv1d(ag.concat([late, early], axis=1), params["mix.w"])
    return RirPrediction(
        rir=ag.reshape(mixed, (batch, config.rir_len)),
        masks=masks,
        early=ag.reshape(early, (batch, config.rir_len)),
        late=late,
    )


def forward(
    x: Tensor,
    params: dict,
    config: ModelConfig,
    mode: str = "train",
    noise_seed: int = 0,
    latent_seed: int = 0,
) -> RirPrediction:
    z = encode(x, params, config, mode)
    return decode(z, params, config, noise_seed, latent_seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout, all integers little-endian:
#     bytes 0-7   magic "FINSCKPT"
#     u32         format version (1)
#     u32         config JSON length, then that many bytes of UTF-8 JSON
#     u32         tensor record count
#     per record: u16 name length, name bytes (UTF-8),
#                 u8 dtype code (0 = float32), u8 ndim, ndim * u32 dims,
#                 u64 byte offset into the payload
#     payload     concatenated float32 little-endian tensor data
# Records appear in parameter-map order and offsets are contiguous.  Names
# ending in .running_mean / .running_var load as non-trainable buffers.

_DTYPE_CODES = {0: np.dtype("<f4")}


def _is_buffer_name(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def write_container(path, meta: dict, arrays) -> None:
    """Write named float32 arrays plus a JSON meta block in the layout above.

    Model checkpoints store the config dict as meta; the trainer reuses the
    container for optimizer state with its own meta.
    """
    records = io.BytesIO()
    payload = io.BytesIO()
    count = 0
    for name, value in arrays.items():
        data = np.ascontiguousarray(np.asarray(value).astype("<f4", copy=False))
        encoded = name.encode("utf-8")
        records.write(struct.pack("<H", len(encoded)))
        records.write(encoded)
        records.write(struct.pack("<BB", 0, data.ndim))
        records.write(struct.pack(f"<{data.ndim}I", *data.shape))
        records.write(struct.pack("<Q", payload.tell()))
        payload.write(data.tobytes())
        count += 1

    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_json)))
        fh.write(meta_json)
        fh.write(struct.pack("<I", count))
        fh.write(records.getvalue())
        fh.write(payload.getvalue())


def save_checkpoint(path, params: dict, config: ModelConfig) -> None:
    write_container(path, config.to_dict(), {name: t.data for name, t in params.items()})


class CheckpointError(ValueError):
    pass


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def read_container(path) -> tuple:
    """Returns (meta dict, name -> float32 array), inverse of write_container."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))

        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            if dtype_code not in _DTYPE_CODES:
                raise CheckpointError(f"unknown dtype code {dtype_code}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            (offset,) = struct.unpack("<Q", _read_exact(fh, 8))
            manifest.append((name, _DTYPE_CODES[dtype_code], shape, offset))

        payload = fh.read()

    arrays = {}
    for name, dtype, shape, offset in manifest:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + size * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"tensor {name!r} extends past end of payload")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=size, offset=offset).reshape(shape).copy()
    return meta, arrays


def load_checkpoint(path) -> tuple:
    """Returns (params, config); inverse of save_checkpoint, bit for bit."""
    meta, arrays = read_container(path)
    config = ModelConfig.from_dict(meta)
    params: dict[str, Tensor] = {}
    for name, data in arrays.items():
        params[name] = Tensor(data, requires_grad=not _is_buffer_name(name), name=name)
    return params, config
