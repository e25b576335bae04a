"""Compact reverse-mode differentiation engine.

The operator set is closed and deliberately small: exactly the ops the
synthesis network's forward pass needs (1-D convolutions, transposed
convolutions, batch norm, PReLU, linear, sigmoid, a handful of elementwise
and shape ops, and a windowed magnitude-STFT used by the spectral loss).
There is no general broadcasting engine; every op documents the shapes it
accepts and its backward rule is tested against central finite differences.

Convolutions are lowered to BLAS matrix products:

* stride-1 convolutions run as one GEMM per kernel tap over shifted views
  (no im2col copy),
* strided convolutions build an im2col matrix and do a single GEMM,
* transposed convolutions scatter one GEMM per tap into a strided output.

A graph instance is single-threaded during forward/backward; distinct
graphs may run on distinct threads.
"""
from __future__ import annotations

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every op asserts its output is finite (slow)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(data, parents, vjp) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the graph (requires_grad=False)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
            node.grad = None  # interior grads are consumed; leaves keep theirs


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(out_data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data - b.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(out_data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * s)

    return _make(x.data * s, (x,), vjp)


def cmul(x: Tensor, c) -> Tensor:
    """Multiply by a constant array (no gradient through c).

    c must broadcast against x without changing x's shape.
    """
    c = np.asarray(c, dtype=x.data.dtype)
    out_data = x.data * c
    if out_data.shape != x.data.shape:
        raise ValueError(f"constant of shape {c.shape} would broadcast {x.data.shape} to {out_data.shape}")

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * c)

    return _make(out_data, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), vjp)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data > lo

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _make(np.maximum(x.data, lo), (x,), vjp)


def log(x: Tensor) -> Tensor:
    if _DEBUG_CHECKS and np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value; clamp first")
    out_data = np.log(x.data)

    def vjp(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _make(out_data, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    def vjp(g):
        if x.requires_grad:
            _accum(x, g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def vjp(g):
        if x.requires_grad:
            safe = np.maximum(out_data, np.finfo(out_data.dtype).tiny)
            _accum(x, g * 0.5 / safe)

    return _make(out_data, (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        if x.requires_grad:
            _accum(x, g * 2.0 * x.data)

    return _make(x.data * x.data, (x,), vjp)


def sum_axes(x: Tensor, axes=None) -> Tensor:
    """Sum over the given axes (None = all, yielding a scalar)."""
    if axes is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.data.ndim for a in axes)
    out_data = x.data.sum(axis=axes)

    def vjp(g):
        if x.requires_grad:
            ge = np.expand_dims(g, axes) if axes else g
            _accum(x, np.broadcast_to(ge, x.data.shape).astype(x.data.dtype))

    return _make(out_data, (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_axes(x), 1.0 / x.data.size)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].data.ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _make(out_data, tuple(tensors), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(x.data[sl])

    def vjp(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[sl] = g
            _accum(x, gx)

    return _make(out_data, (x,), vjp)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    axis = axis % x.data.ndim
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out_data = np.pad(x.data, widths)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(before, before + x.data.shape[axis])
    sl = tuple(sl)

    def vjp(g):
        if x.requires_grad:
            _accum(x, np.ascontiguousarray(g[sl]))

    return _make(out_data, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out_data = x.data.reshape(shape)

    def vjp(g):
        if x.requires_grad:
            _accum(x, g.reshape(orig))

    return _make(out_data, (x,), vjp)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Tile a leading batch axis of size 1 up to `batch`; backward sums it."""
    if x.data.shape[0] != 1:
        raise ValueError(f"broadcast_batch needs leading axis 1, got {x.data.shape}")
    out_data = np.ascontiguousarray(np.broadcast_to(x.data, (batch,) + x.data.shape[1:]))

    def vjp(g):
        if x.requires_grad:
            _accum(x, g.sum(axis=0, keepdims=True))

    return _make(out_data, (x,), vjp)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: (B, F), w: (O, F), b: (O,) -> (B, O)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    def vjp(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, vjp)


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """x: (B, C, T), a: per-channel slopes of shape (C,) or (1,)."""
    if a.data.ndim != 1 or a.data.shape[0] not in (1, x.data.shape[1]):
        raise ValueError(f"prelu slope shape {a.data.shape} incompatible with channels {x.data.shape[1]}")
    ab = a.data.reshape(1, -1, 1)
    neg = np.minimum(x.data, 0)
    out_data = np.maximum(x.data, 0) + ab * neg

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * np.where(x.data > 0, 1.0, ab).astype(x.data.dtype))
        if a.requires_grad:
            ga = (g * neg).sum(axis=(0, 2))
            if a.data.shape[0] == 1:
                ga = ga.sum(keepdims=True)
            _accum(a, ga)

    return _make(out_data, (x, a), vjp)


def channel_affine(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-example per-channel modulation: x (B,C,T), gain/shift (B,C)."""
    B, C, _ = x.data.shape
    if gain.data.shape != (B, C) or shift.data.shape != (B, C):
        raise ValueError(f"channel_affine expects (B,C) modulators, got {gain.data.shape}/{shift.data.shape}")
    out_data = x.data * gain.data[:, :, None] + shift.data[:, :, None]

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * gain.data[:, :, None])
        if gain.requires_grad:
            _accum(gain, (g * x.data).sum(axis=2))
        if shift.requires_grad:
            _accum(shift, g.sum(axis=2))

    return _make(out_data, (x, gain, shift), vjp)


def adaptive_avg_pool1d(x: Tensor, out_len: int = 1) -> Tensor:
    """Average the time axis of (B, C, T) down to out_len segments."""
    B, C, T = x.data.shape
    if out_len < 1 or out_len > T:
        raise ValueError(f"out_len {out_len} invalid for T={T}")
    bounds = [(int(np.floor(i * T / out_len)), int(np.ceil((i + 1) * T / out_len))) for i in range(out_len)]
    out_data = np.empty((B, C, out_len), dtype=x.data.dtype)
    for i, (s, e) in enumerate(bounds):
        out_data[:, :, i] = x.data[:, :, s:e].mean(axis=2)

    def vjp(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i, (s, e) in enumerate(bounds):
                gx[:, :, s:e] += g[:, :, i : i + 1] / (e - s)
            _accum(x, gx)

    return _make(out_data, (x,), vjp)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channel batch norm over (B, C, T); running stats updated in place in
    training mode.  Gradients flow through the batch statistics."""
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ValueError("gamma/beta must have shape (C,)")

    if training:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out_data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def vjp(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                m1 = gxhat.mean(axis=(0, 2), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2), keepdims=True)
                gx = inv_std[None, :, None] * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv_std[None, :, None]
            _accum(x, gx.astype(x.data.dtype))

    return _make(out_data, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv1d_out_len(T: int, K: int, stride: int, dilation: int, padding: int) -> int:
    return (T + 2 * padding - dilation * (K - 1) - 1) // stride + 1


def _conv1d_shift_gemm(x, w, Tout, dilation, padding):
    # stride-1 path: one GEMM per kernel tap over shifted views; per-tap
    # weight slices are copied contiguous so BLAS handles the matmul
    B, Cin, T = x.shape
    Cout, _, K = w.shape
    wt = np.ascontiguousarray(w.transpose(2, 0, 1))
    out = np.zeros((B, Cout, Tout), dtype=x.dtype)
    for k in range(K):
        shift = k * dilation - padding
        t0 = max(0, -shift)
        t1 = min(Tout, T - shift)
        if t1 <= t0:
            continue
        out[:, :, t0:t1] += np.matmul(wt[k], x[:, :, t0 + shift : t1 + shift])
    return out


def _im2col(x, K, stride, dilation, padding):
    B, Cin, T = x.shape
    span = dilation * (K - 1) + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    view = np.lib.stride_tricks.sliding_window_view(xp, span, axis=2)[:, :, ::stride, ::dilation]
    Tout = view.shape[2]
    cols = np.ascontiguousarray(view.transpose(0, 2, 1, 3)).reshape(B * Tout, Cin * K)
    return cols, Tout


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of x (B, C_in, T) with w (C_out, C_in, K)."""
    B, Cin, T = x.data.shape
    Cout, Cin_w, K = w.data.shape
    if Cin_w != Cin:
        raise ValueError(f"conv1d channel mismatch: x has {Cin}, w expects {Cin_w}")
    Tout = conv1d_out_len(T, K, stride, dilation, padding)
    if Tout < 1:
        raise ValueError(f"conv1d output length {Tout} < 1 (T={T}, K={K}, stride={stride}, padding={padding})")

    if stride == 1:
        out_data = _conv1d_shift_gemm(x.data, w.data, Tout, dilation, padding)
    else:
        cols, Tout2 = _im2col(x.data, K, stride, dilation, padding)
        assert Tout2 == Tout
        flat = cols @ w.data.reshape(Cout, Cin * K).T
        out_data = np.ascontiguousarray(flat.reshape(B, Tout, Cout).transpose(0, 2, 1))
    if bias is not None:
        out_data += bias.data[None, :, None]

    def vjp(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        if stride == 1:
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for k in range(K):
                    shift = k * dilation - padding
                    t0 = max(0, -shift)
                    t1 = min(Tout, T - shift)
                    if t1 <= t0:
                        gw[:, :, k] = 0.0
                        continue
                    xk = x.data[:, :, t0 + shift : t1 + shift]
                    gw[:, :, k] = np.matmul(g[:, :, t0:t1], xk.transpose(0, 2, 1)).sum(axis=0)
                _accum(w, gw)
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                wt = np.ascontiguousarray(w.data.transpose(2, 1, 0))  # (K, Cin, Cout)
                for k in range(K):
                    shift = k * dilation - padding
                    t0 = max(0, -shift)
                    t1 = min(Tout, T - shift)
                    if t1 <= t0:
                        continue
                    gx[:, :, t0 + shift : t1 + shift] += np.matmul(wt[k], g[:, :, t0:t1])
                _accum(x, gx)
        else:
            g2d = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * Tout, Cout)
            if w.requires_grad:
                cols, _ = _im2col(x.data, K, stride, dilation, padding)
                _accum(w, (g2d.T @ cols).reshape(Cout, Cin, K))
            if x.requires_grad:
                gcols = (g2d @ w.data.reshape(Cout, Cin * K)).reshape(B, Tout, Cin, K)
                gcols = np.ascontiguousarray(gcols.transpose(0, 2, 1, 3))  # (B, Cin, Tout, K)
                Tp = T + 2 * padding
                gxp = np.zeros((B, Cin, Tp), dtype=x.data.dtype)
                last = (Tout - 1) * stride
                for k in range(K):
                    off = k * dilation
                    gxp[:, :, off : off + last + 1 : stride] += gcols[:, :, :, k]
                _accum(x, gxp[:, :, padding : padding + T] if padding else gxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, vjp)


def conv_transpose1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution (adjoint of conv1d): x (B, C_in, T), w (C_in, C_out, K)."""
    B, Cin, T = x.data.shape
    Cin_w, Cout, K = w.data.shape
    if Cin_w != Cin:
        raise ValueError(f"conv_transpose1d channel mismatch: x has {Cin}, w expects {Cin_w}")
    out_len = (T - 1) * stride - 2 * padding + K
    if out_len < 1:
        raise ValueError(f"conv_transpose1d output length {out_len} < 1")
    full_len = (T - 1) * stride + K
    last = (T - 1) * stride

    wt = np.ascontiguousarray(w.data.transpose(2, 1, 0))  # (K, Cout, Cin)
    full = np.zeros((B, Cout, full_len), dtype=x.data.dtype)
    for k in range(K):
        full[:, :, k : k + last + 1 : stride] += np.matmul(wt[k], x.data)
    out_data = np.ascontiguousarray(full[:, :, padding : padding + out_len])
    if bias is not None:
        out_data += bias.data[None, :, None]

    def vjp(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2)))
        gfull = np.zeros((B, Cout, full_len), dtype=g.dtype)
        gfull[:, :, padding : padding + out_len] = g
        need_w = w.requires_grad
        wk_fwd = np.ascontiguousarray(w.data.transpose(2, 0, 1)) if x.requires_grad else None  # (K, Cin, Cout)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.empty_like(w.data) if need_w else None
        for k in range(K):
            gk = np.ascontiguousarray(gfull[:, :, k : k + last + 1 : stride])
            if gx is not None:
                gx += np.matmul(wk_fwd[k], gk)
            if need_w:
                gw[:, :, k] = np.matmul(x.data, gk.transpose(0, 2, 1)).sum(axis=0)
        if gx is not None:
            _accum(x, gx)
        if need_w:
            _accum(w, gw)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, vjp)


def fir_filter_causal(noise: np.ndarray, coeffs: Tensor) -> Tensor:
    """Causal FIR filtering of a fixed signal by trainable filters.

    noise: constant 1-D signal of length L.  coeffs: (M, K) filter bank;
    out[m, n] = sum_i coeffs[m, i] * noise[n - i], zero-padded history.
    Runs in the frequency domain, so K may be large (the decoder uses 1024).
    """
    L = noise.shape[0]
    M, K = coeffs.data.shape
    nfft = 1
    while nfft < L + K - 1:
        nfft *= 2
    noise_spec = np.fft.rfft(noise.astype(np.float64), nfft)
    out_data = np.fft.irfft(np.fft.rfft(coeffs.data.astype(np.float64), nfft, axis=-1) * noise_spec, nfft)[:, :L]
    out_data = out_data.astype(coeffs.data.dtype)

    def vjp(g):
        if coeffs.requires_grad:
            gspec = np.fft.rfft(g.astype(np.float64), nfft, axis=-1)
            gc = np.fft.irfft(gspec * np.conj(noise_spec), nfft)[:, :K]
            _accum(coeffs, gc.astype(coeffs.data.dtype))

    return _make(out_data, (coeffs,), vjp)


# ---------------------------------------------------------------------------
# magnitude STFT (for the spectral loss)
# ---------------------------------------------------------------------------

def stft_mag(x: Tensor, frame_size: int, hop_size: int) -> Tensor:
    """Magnitude STFT of (B, T) signals -> (B, frames, bins).

    Reflection padding of frame_size//2, periodic Hann window; matches the
    non-differentiable reference in dsp.stft_magnitude.
    """
    if frame_size <= 0 or frame_size & (frame_size - 1):
        raise ValueError(f"frame_size must be a power of two, got {frame_size}")
    if hop_size != frame_size // 2:
        raise ValueError("hop_size must be frame_size//2")
    B, T = x.data.shape
    pad = frame_size // 2
    if T < frame_size:
        raise ValueError(f"signal length {T} shorter than frame {frame_size}")
    xp = np.pad(x.data, ((0, 0), (pad, pad)), mode="reflect")
    frames = (T + 2 * pad - frame_size) // hop_size + 1
    idx = hop_size * np.arange(frames)[:, None] + np.arange(frame_size)[None, :]
    win = (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_size) / frame_size)).astype(x.data.dtype)
    seg = xp[:, idx] * win
    spec = np.fft.rfft(seg, axis=-1)
    mag = np.abs(spec)

    def vjp(g):
        if not x.requires_grad:
            return
        tiny = np.finfo(mag.dtype).tiny
        phase = spec / np.maximum(mag, tiny)
        gc = (g * phase).astype(spec.dtype)
        gc[..., 1:-1] *= 0.5  # undo the irfft's implicit doubling of interior bins
        gseg = np.fft.irfft(gc, frame_size, axis=-1) * frame_size
        gseg *= win
        gxp = np.zeros_like(xp)
        # hop = frame/2: even frames tile [0, ...] contiguously, odd frames tile [hop, ...]
        ge = gseg[:, 0::2, :]
        gxp[:, : ge.shape[1] * frame_size] += ge.reshape(B, -1)
        go = gseg[:, 1::2, :]
        if go.shape[1]:
            gxp[:, hop_size : hop_size + go.shape[1] * frame_size] += go.reshape(B, -1)
        gx = gxp[:, pad : pad + T].copy()
        gx[:, 1 : pad + 1] += gxp[:, :pad][:, ::-1]
        gx[:, T - pad - 1 : T - 1] += gxp[:, pad + T :][:, ::-1]
        _accum(x, gx)

    return _make(mag, (x,), vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(fn, tensor: Tensor, indices, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. tensor at flat indices."""
    flat = tensor.data.reshape(-1)
    grads = np.empty(len(indices), dtype=np.float64)
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn().data)
        flat[i] = orig - eps
        lo = float(fn().data)
        flat[i] = orig
        grads[j] = (hi - lo) / (2.0 * eps)
    return grads


def check_gradients(fn, tensors, n_samples: int = 5, eps: float = 1e-3, seed: int = 0):
    """Compare analytic and numeric gradients for each tensor.

    fn builds and returns the scalar loss from the current tensor values.
    Returns the worst relative error found (relative to max(|a|,|n|,1)).
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        if t.grad is None:
            raise AssertionError("no gradient reached a checked tensor")
        size = t.data.size
        k = min(n_samples, size)
        idx = rng.choice(size, size=k, replace=False)
        num = numeric_grad(fn, t, idx, eps)
        ana = t.grad.reshape(-1)[idx].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1.0)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
