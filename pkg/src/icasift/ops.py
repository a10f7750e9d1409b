"""Differentiable operations: the vocabulary the model zoo is built from.

Convolutions are valid cross-correlations evaluated through strided window
views and BLAS-backed tensordot; max pooling saves argmax positions so its
backward routes gradients only to the winning elements; the LSTM projects
the whole input sequence in one GEMM and loops only over the recurrence.

Each operation validates its shapes, computes the forward value, and when
a graph is active and gradients are required, records a closure that turns
the output gradient into input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    LabelError,
    ParameterError,
)
from .tensor import Tensor, record_if_needed

_BCE_EPS = 1e-7
_CONV_CHUNK_BYTES = 32 * 1024 * 1024  # window views per batch chunk stay near L3 size


def _as_tuple(value, rank: int, name: str) -> tuple:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * rank
    out = tuple(int(v) for v in value)
    if len(out) != rank:
        raise DimensionError(f"{name} must have {rank} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a valid-padding cross-correlation."""

    rank: int
    kernel_extents: tuple
    stride: tuple
    in_channels: int
    out_channels: int
    padding: str = "valid"

    def __post_init__(self):
        if self.rank not in (1, 3):
            raise ParameterError(f"conv rank must be 1 or 3, got {self.rank}")
        if self.padding != "valid":
            raise ParameterError(f"only 'valid' padding is supported, got {self.padding!r}")
        object.__setattr__(self, "kernel_extents",
                           _as_tuple(self.kernel_extents, self.rank, "kernel_extents"))
        object.__setattr__(self, "stride",
                           _as_tuple(self.stride, self.rank, "stride"))
        if any(k < 1 for k in self.kernel_extents):
            raise ParameterError(f"kernel extents must be positive, got {self.kernel_extents}")
        if any(s < 1 for s in self.stride):
            raise ParameterError(f"strides must be positive, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be positive")

    def output_extents(self, input_extents: Sequence[int]) -> tuple:
        if len(input_extents) != self.rank:
            raise DimensionError(
                f"expected {self.rank} spatial axes, got {len(input_extents)}")
        out = []
        for axis, (n, k, s) in enumerate(zip(input_extents, self.kernel_extents, self.stride)):
            if n < k:
                raise DimensionError(
                    f"spatial axis {axis}: input extent {n} smaller than kernel {k}")
            out.append((n - k) // s + 1)
        return tuple(out)


def conv_forward(input: Tensor, weights: Tensor, bias: Optional[Tensor],
                 spec: ConvSpec) -> Tensor:
    """Valid cross-correlation plus per-output-channel bias."""
    x = input.data
    w = weights.data
    r = spec.rank
    if x.ndim != r + 2:
        raise DimensionError(
            f"conv{r}d input must have {r + 2} axes (batch, channel, spatial), got {x.ndim}")
    if w.shape != (spec.out_channels, spec.in_channels) + spec.kernel_extents:
        raise DimensionError(
            f"weight shape {w.shape} does not match spec "
            f"{(spec.out_channels, spec.in_channels) + spec.kernel_extents}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"channel axis 1: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if bias is not None and bias.data.shape != (spec.out_channels,):
        raise DimensionError(
            f"bias shape {bias.data.shape} must be ({spec.out_channels},)")
    spec.output_extents(x.shape[2:])  # raises with the offending axis

    out_sp = spec.output_extents(x.shape[2:])
    batch = x.shape[0]
    # Window views stay cache-resident when the batch is processed in
    # chunks; large batches through one tensordot thrash badly.
    chunk = max(1, _CONV_CHUNK_BYTES // max(
        1, x[:1].size * int(np.prod(spec.kernel_extents)) * x.itemsize))
    win_axes = (1,) + tuple(range(2 + r, 2 + 2 * r))
    w_axes = tuple(range(1, r + 2))
    stride_idx = (slice(None), slice(None)) + tuple(
        slice(None, None, s) for s in spec.stride)

    def _windows(x_part: np.ndarray) -> np.ndarray:
        win = sliding_window_view(x_part, spec.kernel_extents,
                                  axis=tuple(range(2, 2 + r)))
        return win[stride_idx]

    out = np.empty((batch, spec.out_channels) + out_sp, dtype=x.dtype)
    for start in range(0, batch, chunk):
        part = np.tensordot(_windows(x[start:start + chunk]), w,
                            axes=(win_axes, w_axes))
        out[start:start + chunk] = np.moveaxis(part, -1, 1)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * r)
    result = Tensor(out)

    def backward(go: np.ndarray) -> tuple:
        sum_axes = (0,) + tuple(range(2, 2 + r))
        gb = go.sum(axis=sum_axes) if bias is not None else None
        gw = np.zeros_like(w)
        gx = np.zeros_like(x) if input.requires_grad else None
        for start in range(0, batch, chunk):
            sl = slice(start, start + chunk)
            gw += np.tensordot(go[sl], _windows(x[sl]), axes=(sum_axes, sum_axes))
            if gx is not None:
                gx_part = gx[sl]
                for offset in np.ndindex(*spec.kernel_extents):
                    kernel_slice = w[(slice(None), slice(None)) + offset]
                    contrib = np.tensordot(go[sl], kernel_slice, axes=((1,), (0,)))
                    dest = tuple(
                        slice(o, o + s * (e - 1) + 1, s)
                        for o, s, e in zip(offset, spec.stride, out_sp))
                    gx_part[(slice(None), slice(None)) + dest] += np.moveaxis(contrib, -1, 1)
        if bias is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (input, weights) if bias is None else (input, weights, bias)
    record_if_needed(f"conv{r}d", inputs, result, backward)
    return result


def pool_forward(input: Tensor, window, stride=None) -> Tensor:
    """Per-window maximum over the spatial axes, channels independent."""
    x = input.data
    if x.ndim < 3:
        raise DimensionError(
            f"pooling needs (batch, channel, spatial...) input, got {x.ndim} axes")
    r = x.ndim - 2
    window = _as_tuple(window, r, "window")
    stride = window if stride is None else _as_tuple(stride, r, "stride")
    if any(w < 1 for w in window) or any(s < 1 for s in stride):
        raise ParameterError("pool window and stride must be positive")
    for axis, (n, w) in enumerate(zip(x.shape[2:], window)):
        if w > n:
            raise DimensionError(
                f"spatial axis {axis}: pool window {w} larger than input extent {n}")

    from .tensor import active_graph
    needs_grad = active_graph() is not None and input.requires_grad

    out_sp = tuple((n - w) // s + 1 for n, w, s in zip(x.shape[2:], window, stride))
    lead = x.shape[:2]
    if stride == window:
        # Non-overlapping windows: a trim + reshape exposes the blocks with
        # ordered strides, much cheaper than gathering window views.
        trim = (slice(None), slice(None)) + tuple(
            slice(0, o * w) for o, w in zip(out_sp, window))
        block_shape = lead + tuple(v for pair in zip(out_sp, window) for v in pair)
        blocks = x[trim].reshape(block_shape)
        window_axes = tuple(3 + 2 * i for i in range(r))
        if not needs_grad:
            return Tensor(blocks.max(axis=window_axes))
        perm = (0, 1) + tuple(2 + 2 * i for i in range(r)) + window_axes
        flat_windows = np.ascontiguousarray(blocks.transpose(perm)).reshape(
            lead + out_sp + (-1,))
    else:
        spatial_axes = tuple(range(2, 2 + r))
        windows = sliding_window_view(x, window, axis=spatial_axes)
        stride_idx = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
        windows = windows[stride_idx]
        flat_windows = windows.reshape(windows.shape[:2 + r] + (-1,))
    arg = flat_windows.argmax(axis=-1)
    out = np.take_along_axis(flat_windows, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    if needs_grad:
        # Absolute flat index of each winning element, for scatter-add.
        offsets = np.unravel_index(arg, window)
        grids = np.indices(arg.shape, sparse=True)
        abs_pos = [grids[0], grids[1]]
        for a in range(r):
            abs_pos.append(grids[2 + a] * stride[a] + offsets[a])
        flat_idx = np.ravel_multi_index(tuple(abs_pos), x.shape)

        def backward(go: np.ndarray) -> tuple:
            gx = np.zeros(x.size, dtype=x.dtype)
            np.add.at(gx, flat_idx.ravel(), go.ravel())
            return (gx.reshape(x.shape),)

        record_if_needed("maxpool", (input,), result, backward)
    return result


def dense_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W.T + b on a batch of feature rows."""
    x, w, b = input.data, weights.data, bias.data
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(
            f"dense expects 2-D input and weights, got {x.ndim}-D and {w.ndim}-D")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"feature axis 1: input has {x.shape[1]} features, weights expect {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} must be ({w.shape[0]},)")
    result = Tensor(x @ w.T + b)

    def backward(go: np.ndarray) -> tuple:
        gx = go @ w if input.requires_grad else None
        return (gx, go.T @ x, go.sum(axis=0))

    record_if_needed("dense", (input, weights, bias), result, backward)
    return result


@dataclass
class BatchNormState:
    """Running statistics updated by exponential moving average in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def for_channels(cls, channels: int, momentum: float = 0.9) -> "BatchNormState":
        return cls(running_mean=np.zeros(channels, dtype=np.float64),
                   running_var=np.ones(channels, dtype=np.float64),
                   momentum=momentum)


def batchnorm_forward(input: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                      state: BatchNormState, epsilon: float = 1e-5) -> Tensor:
    """Per-channel standardization with learned scale and shift."""
    x = input.data
    if x.ndim < 2:
        raise DimensionError("batchnorm needs (batch, channel, ...) input")
    channels = x.shape[1]
    if gamma.data.shape != (channels,) or beta.data.shape != (channels,):
        raise DimensionError(
            f"gamma/beta must have shape ({channels},), got {gamma.data.shape} and {beta.data.shape}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    shape_c = (1, channels) + (1,) * (x.ndim - 2)
    g = gamma.data.reshape(shape_c)

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateInputError("batchnorm train mode needs batch size >= 2")
        mean = x.mean(axis=reduce_axes)
        var = x.var(axis=reduce_axes)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(shape_c)) * inv_std.reshape(shape_c)
    result = Tensor(g * xhat + beta.data.reshape(shape_c))

    if mode == "train":
        n = x.size // channels

        def backward(go: np.ndarray) -> tuple:
            # sum(dxhat) = gamma*gbeta and sum(dxhat*xhat) = gamma*ggamma,
            # so the input gradient reuses the parameter reductions.
            ggamma = (go * xhat).sum(axis=reduce_axes)
            gbeta = go.sum(axis=reduce_axes)
            gx = None
            if input.requires_grad:
                gx = go * float(n)
                gx -= gbeta.reshape(shape_c)
                gx -= xhat * ggamma.reshape(shape_c)
                gx *= (gamma.data * inv_std / n).reshape(shape_c)
            return (gx, ggamma, gbeta)
    else:
        def backward(go: np.ndarray) -> tuple:
            ggamma = (go * xhat).sum(axis=reduce_axes)
            gbeta = go.sum(axis=reduce_axes)
            gx = go * g * inv_std.reshape(shape_c) if input.requires_grad else None
            return (gx, ggamma, gbeta)

    record_if_needed("batchnorm", (input, gamma, beta), result, backward)
    return result


def dropout_forward(input: Tensor, rate: float, mode: str,
                    rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors are rescaled so eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return input
    keep = (rng.random(input.data.shape) >= rate)
    scale = 1.0 / (1.0 - rate)
    factor = keep.astype(input.data.dtype) * scale
    result = Tensor(input.data * factor)

    def backward(go: np.ndarray) -> tuple:
        return (go * factor,)

    record_if_needed("dropout", (input,), result, backward)
    return result


@dataclass
class LstmParams:
    """Fused gate parameters, rows ordered input/forget/output/candidate."""

    W: Tensor  # (4*hidden, features)
    U: Tensor  # (4*hidden, hidden)
    b: Tensor  # (4*hidden,)

    @property
    def hidden_size(self) -> int:
        return self.U.data.shape[1]

    def tensors(self) -> tuple:
        return (self.W, self.U, self.b)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp overflow saturates to the correct limit (0 for very negative z)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _ws_buffer(workspace: Optional[dict], key: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable scratch array; reallocated only when the shape changes."""
    if workspace is None:
        return np.empty(shape, dtype)
    arr = workspace.get(key)
    if arr is None or arr.shape != shape or arr.dtype != dtype:
        arr = np.empty(shape, dtype)
        workspace[key] = arr
    return arr


def lstm_forward(input: Tensor, params: LstmParams, hidden_size: int,
                 workspace: Optional[dict] = None) -> Tensor:
    """Standard LSTM recurrence from zero state; returns the final hidden state.

    `workspace` (owned by the calling layer) recycles the large per-step
    buffers between training steps.  A recorded forward invalidates the
    backward closure of the previous one on the same workspace, which is
    safe under the forward-then-backward discipline of a training loop.
    """
    if hidden_size < 1:
        raise ParameterError(f"hidden_size must be positive, got {hidden_size}")
    x = input.data
    if x.ndim != 3:
        raise DimensionError(
            f"lstm input must be (batch, time, features), got {x.ndim} axes")
    batch, time, features = x.shape
    if time < 1:
        raise DimensionError("lstm needs at least one timestep")
    w, u, b = params.W.data, params.U.data, params.b.data
    if w.shape != (4 * hidden_size, features):
        raise DimensionError(
            f"W shape {w.shape} must be ({4 * hidden_size}, {features})")
    if u.shape != (4 * hidden_size, hidden_size):
        raise DimensionError(
            f"U shape {u.shape} must be ({4 * hidden_size}, {hidden_size})")
    if b.shape != (4 * hidden_size,):
        raise DimensionError(f"b shape {b.shape} must be ({4 * hidden_size},)")

    from .tensor import active_graph
    needs_grad = active_graph() is not None and any(
        t.requires_grad for t in (input, params.W, params.U, params.b))

    hs = hidden_size
    dt = x.dtype
    h = np.zeros((batch, hs), dtype=dt)
    c = np.zeros((batch, hs), dtype=dt)
    # Time-major projection so each step reads a contiguous block.
    flat = _ws_buffer(workspace, "xproj_flat", (batch * time, 4 * hs), dt)
    np.matmul(x.reshape(batch * time, features), w.T, out=flat)
    xproj = _ws_buffer(workspace, "xproj", (time, batch, 4 * hs), dt)
    np.copyto(xproj, flat.reshape(batch, time, 4 * hs).transpose(1, 0, 2))
    xproj += b
    u_t = np.ascontiguousarray(u.T)

    if needs_grad:
        saves = {key: _ws_buffer(workspace, key, (time, batch, hs), dt)
                 for key in ("gi", "gf", "go", "gg", "tanh_c", "c_prev", "h_prev")}
        if workspace is not None:
            workspace["version"] = workspace.get("version", 0) + 1
            version = workspace["version"]

    z = np.empty((batch, 4 * hs), dtype=dt)
    prod = np.empty((batch, hs), dtype=dt)
    tc_scratch = np.empty((batch, hs), dtype=dt)
    for t in range(time):
        np.matmul(h, u_t, out=z)
        z += xproj[t]
        sig = z[:, :3 * hs]
        np.negative(sig, out=sig)
        np.exp(sig, out=sig)
        sig += 1.0
        np.reciprocal(sig, out=sig)
        gg = np.tanh(z[:, 3 * hs:], out=z[:, 3 * hs:])
        gi, gf, go_ = z[:, :hs], z[:, hs:2 * hs], z[:, 2 * hs:3 * hs]
        if needs_grad:
            saves["gi"][t] = gi
            saves["gf"][t] = gf
            saves["go"][t] = go_
            saves["gg"][t] = gg
            saves["c_prev"][t] = c
            saves["h_prev"][t] = h
            tc = saves["tanh_c"][t]
        else:
            tc = tc_scratch
        c *= gf
        np.multiply(gi, gg, out=prod)
        c += prod
        np.tanh(c, out=tc)
        np.multiply(go_, tc, out=h)

    result = Tensor(h.copy())
    if not needs_grad:
        return result

    def backward(grad_h: np.ndarray) -> tuple:
        if workspace is not None and workspace.get("version") != version:
            raise ContractError(
                "lstm backward ran after a newer recorded forward reused its buffers")
        gi_all, gf_all = saves["gi"], saves["gf"]
        go_all, gg_all = saves["go"], saves["gg"]
        tanh_c, c_prev, h_prev = saves["tanh_c"], saves["c_prev"], saves["h_prev"]
        # Vectorized gate-derivative factors; the loop keeps only the
        # sequential h/c dependencies and one small GEMM per step.
        f_i = _ws_buffer(workspace, "f_i", gi_all.shape, dt)
        np.subtract(1.0, gi_all, out=f_i)
        f_i *= gi_all
        f_i *= gg_all
        f_f = _ws_buffer(workspace, "f_f", gi_all.shape, dt)
        np.subtract(1.0, gf_all, out=f_f)
        f_f *= gf_all
        f_f *= c_prev
        f_o = _ws_buffer(workspace, "f_o", gi_all.shape, dt)
        np.subtract(1.0, go_all, out=f_o)
        f_o *= go_all
        f_o *= tanh_c
        f_g = _ws_buffer(workspace, "f_g", gi_all.shape, dt)
        np.multiply(gg_all, gg_all, out=f_g)
        np.subtract(1.0, f_g, out=f_g)
        f_g *= gi_all
        f_c = _ws_buffer(workspace, "f_c", gi_all.shape, dt)
        np.multiply(tanh_c, tanh_c, out=f_c)
        np.subtract(1.0, f_c, out=f_c)
        f_c *= go_all

        dh = grad_h.astype(dt, copy=True)
        dh_next = np.empty_like(dh)
        dc = np.zeros_like(dh)
        dcell = np.empty_like(dh)
        dz_all = _ws_buffer(workspace, "dz", (time, batch, 4 * hs), dt)
        # Gradients decay geometrically along the recurrence; flushing them
        # to zero below the normal float range avoids denormal stalls.
        tiny = np.finfo(dt).tiny
        for t in range(time - 1, -1, -1):
            np.multiply(dh, f_c[t], out=dcell)
            dcell += dc
            dcell *= np.abs(dcell) >= tiny
            dz = dz_all[t]
            np.multiply(dcell, f_i[t], out=dz[:, :hs])
            np.multiply(dcell, f_f[t], out=dz[:, hs:2 * hs])
            np.multiply(dh, f_o[t], out=dz[:, 2 * hs:3 * hs])
            np.multiply(dcell, f_g[t], out=dz[:, 3 * hs:])
            np.multiply(dcell, gf_all[t], out=dc)
            np.matmul(dz, u, out=dh_next)
            dh, dh_next = dh_next, dh
            dh *= np.abs(dh) >= tiny
        dz_flat = dz_all.reshape(time * batch, 4 * hs)
        dz_flat *= np.abs(dz_flat) >= tiny
        x_flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(time * batch, features)
        gw = dz_flat.T @ x_flat
        gu = dz_flat.T @ h_prev.reshape(time * batch, hs)
        gb = dz_all.sum(axis=(0, 1))
        gx = None
        if input.requires_grad:
            gx = (dz_flat @ w).reshape(time, batch, features).transpose(1, 0, 2)
        return (gx, gw, gu, gb)

    record_if_needed("lstm", (input, params.W, params.U, params.b), result, backward)
    return result


def activation_forward(input: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid."""
    x = input.data
    if kind == "relu":
        result = Tensor(np.maximum(x, 0))

        def backward(go: np.ndarray) -> tuple:
            return (go * (x > 0),)
    elif kind == "sigmoid":
        s = _sigmoid(x)
        result = Tensor(s)

        def backward(go: np.ndarray) -> tuple:
            return (go * s * (1.0 - s),)
    else:
        raise ParameterError(f"unknown activation kind {kind!r}")
    record_if_needed(kind, (input,), result, backward)
    return result


def concat_flatten(inputs: Sequence[Tensor], mode: str) -> Tensor:
    """Flatten all non-batch axes, or join feature rows along axis 1."""
    if mode == "flatten":
        if len(inputs) != 1:
            raise ParameterError("flatten takes exactly one input")
        return reshape(inputs[0], (inputs[0].shape[0], -1))
    if mode != "concat":
        raise ParameterError(f"mode must be 'flatten' or 'concat', got {mode!r}")
    if len(inputs) < 2:
        raise ParameterError("concat needs at least two inputs")
    batch = inputs[0].shape[0]
    for i, t in enumerate(inputs):
        if t.data.ndim != 2:
            raise DimensionError(f"concat input {i} must be 2-D, got {t.data.ndim}-D")
        if t.shape[0] != batch:
            raise DimensionError(
                f"concat input {i}: batch {t.shape[0]} != batch {batch} of input 0")
    widths = [t.shape[1] for t in inputs]
    result = Tensor(np.concatenate([t.data for t in inputs], axis=1))

    def backward(go: np.ndarray) -> tuple:
        grads = []
        start = 0
        for t, width in zip(inputs, widths):
            grads.append(go[:, start:start + width] if t.requires_grad else None)
            start += width
        return tuple(grads)

    record_if_needed("concat", tuple(inputs), result, backward)
    return result


def reshape(input: Tensor, new_shape) -> Tensor:
    """View the same elements under a different shape."""
    old_shape = input.data.shape
    result = Tensor(input.data.reshape(new_shape))

    def backward(go: np.ndarray) -> tuple:
        return (go.reshape(old_shape),)

    record_if_needed("reshape", (input,), result, backward)
    return result


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual merges)."""
    if a.shape != b.shape:
        raise DimensionError(f"add needs matching shapes, got {a.shape} and {b.shape}")
    result = Tensor(a.data + b.data)

    def backward(go: np.ndarray) -> tuple:
        return (go, go)

    record_if_needed("add", (a, b), result, backward)
    return result


def crop_center(input: Tensor, target_extents: Sequence[int]) -> Tensor:
    """Center-crop the spatial axes; aligns a skip path with a valid conv."""
    x = input.data
    r = x.ndim - 2
    target = _as_tuple(target_extents, r, "target_extents")
    starts = []
    for axis, (n, t) in enumerate(zip(x.shape[2:], target)):
        if t > n:
            raise DimensionError(
                f"spatial axis {axis}: cannot crop extent {n} to larger {t}")
        starts.append((n - t) // 2)
    window = (slice(None), slice(None)) + tuple(
        slice(s, s + t) for s, t in zip(starts, target))
    result = Tensor(x[window])

    def backward(go: np.ndarray) -> tuple:
        gx = np.zeros_like(x)
        gx[window] = go
        return (gx,)

    record_if_needed("crop", (input,), result, backward)
    return result


def bce_loss(probability: Tensor, label: Tensor) -> Tensor:
    """Mean binary cross-entropy over the batch, probabilities clamped."""
    p = probability.data
    y = label.data
    if p.shape != y.shape:
        raise DimensionError(f"probability shape {p.shape} != label shape {y.shape}")
    if p.ndim != 2 or p.shape[1] != 1:
        raise DimensionError(f"expected (batch, 1) probabilities, got {p.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must all be 0 or 1")
    batch = p.shape[0]
    pc = np.clip(p, _BCE_EPS, 1.0 - _BCE_EPS)
    loss_value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    result = Tensor(np.asarray(loss_value))

    def backward(go: np.ndarray) -> tuple:
        inside = (p >= _BCE_EPS) & (p <= 1.0 - _BCE_EPS)
        gp = go * inside * (pc - y) / (pc * (1.0 - pc)) / batch
        return (gp, None)

    record_if_needed("bce", (probability, label), result, backward)
    return result
