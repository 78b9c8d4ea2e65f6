"""Convolution, transposed convolution, max pooling, batch norm and LSTM cells.

Layouts are channels-first: ``(N, C, *spatial)`` with one or two spatial
axes. Kernels are ``(C_out, C_in, *k)`` for convolution and
``(C_in, C_out, *k)`` for transposed convolution.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .autograd import Tensor, is_grad_enabled

IntOrSeq = Union[int, Sequence[int]]
PadSpec = Union[int, Sequence[Union[int, Sequence[int]]]]

# im2col buffers above this many elements fall back to a per-offset loop
_IM2COL_LIMIT = 24_000_000
# column buffers up to this many elements are kept for the weight gradient
_KEEP_COLS_LIMIT = 2000000


def _tuple(v: IntOrSeq, nd: int, what: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * nd
    v = tuple(int(x) for x in v)
    if len(v) != nd:
        raise ValueError(f"{what} needs {nd} entries, got {v}")
    return v


def normalize_padding(padding: PadSpec, nd: int) -> tuple[tuple[int, int], ...]:
    """Accept ``p``, ``(p_f, p_t)`` or ``((lo, hi), (lo, hi))`` and return pairs."""
    if isinstance(padding, (int, np.integer)):
        return ((int(padding), int(padding)),) * nd
    padding = list(padding)
    if len(padding) != nd:
        raise ValueError(f"padding needs {nd} entries, got {padding}")
    out = []
    for p in padding:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            lo, hi = p
            out.append((int(lo), int(hi)))
    if any(lo < 0 or hi < 0 for lo, hi in out):
        raise ValueError("padding must be non-negative")
    return tuple(out)


def conv_output_size(n: int, k: int, stride: int = 1, dilation: int = 1, pad: int = 0) -> int:
    """floor((n + 2*pad - dilation*(k-1) - 1) / stride) + 1"""
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _offset_slices(offset, dilation, stride, out):
    return tuple(
        slice(j * d, j * d + s * (o - 1) + 1, s) for j, d, s, o in zip(offset, dilation, stride, out)
    )


def _out_shape(padded, k, stride, dilation):
    return tuple((p - d * (kk - 1) - 1) // s + 1 for p, kk, s, d in zip(padded, k, stride, dilation))


def _windows(xp: np.ndarray, k, stride, dilation) -> np.ndarray:
    nd = len(k)
    eff = tuple(d * (kk - 1) + 1 for kk, d in zip(k, dilation))
    win = sliding_window_view(xp, eff, axis=tuple(range(2, 2 + nd)))
    index = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    index += tuple(slice(None, None, d) for d in dilation)
    return win[index]


def _im2col(xp: np.ndarray, k, stride, dilation, out) -> np.ndarray:
    """Copy every kernel offset of a padded input into a (N, C*K, P) column buffer."""
    n, c = xp.shape[:2]
    offsets = list(itertools.product(*(range(kk) for kk in k)))
    buf = np.empty((n, c, len(offsets)) + tuple(out))
    for i, offset in enumerate(offsets):
        buf[:, :, i] = xp[(slice(None), slice(None)) + _offset_slices(offset, dilation, stride, out)]
    return buf.reshape(n, c * len(offsets), -1)


def _chunks(n: int, per_item: int):
    step = max(1, _IM2COL_LIMIT // max(per_item, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def correlate(xp: np.ndarray, w: np.ndarray, stride, dilation, keep_cols: bool = False):
    """Cross-correlate an already padded input with ``w``; returns (N, O, *out).

    With ``keep_cols`` the column buffer is returned as well (None when the
    batch had to be processed in chunks) so the weight gradient can reuse it.
    """
    n, c = xp.shape[:2]
    k = w.shape[2:]
    out = _out_shape(xp.shape[2:], k, stride, dilation)
    if min(out) <= 0:
        raise ValueError(f"convolution output would be empty (input {xp.shape[2:]}, kernel {k})")
    o = w.shape[0]
    w2 = w.reshape(o, -1)
    res = np.empty((n, o, int(np.prod(out))))
    chunks = list(_chunks(n, w2.shape[1] * res.shape[2]))
    cols = None
    for sl in chunks:
        cols = _im2col(xp[sl], k, stride, dilation, out)
        np.matmul(w2, cols, out=res[sl])
    res = res.reshape((n, o) + tuple(out))
    if keep_cols:
        return res, (cols if len(chunks) == 1 else None)
    return res


def correlate_weight_grad(xp: np.ndarray, g: np.ndarray, k, stride, dilation) -> np.ndarray:
    """d(loss)/d(kernel) for :func:`correlate`; returns (O, C, *k)."""
    n, c = xp.shape[:2]
    o = g.shape[1]
    out = g.shape[2:]
    g3 = g.reshape(n, o, -1)
    gw = np.zeros((o, c * int(np.prod(k))))
    for sl in _chunks(n, c * int(np.prod(k)) * g3.shape[2]):
        cols = _im2col(xp[sl], k, stride, dilation, out)
        gw += np.matmul(g3[sl], cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape((o, c) + tuple(k))


def _weight_grad_from_cols(cols: np.ndarray, g: np.ndarray, wshape) -> np.ndarray:
    g3 = g.reshape(g.shape[0], g.shape[1], -1)
    return np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)


def _input_grad_stride1(g: np.ndarray, w: np.ndarray, in_shape, pads, dilation) -> np.ndarray:
    """Input gradient of a stride-1 convolution as a correlation with the flipped kernel."""
    nd = w.ndim - 2
    k = w.shape[2:]
    wf = np.ascontiguousarray(np.swapaxes(w[(slice(None), slice(None)) + (slice(None, None, -1),) * nd], 0, 1))
    pad_spec = [(0, 0), (0, 0)]
    crop = [slice(None), slice(None)]
    for kk, d, (lo, _), n_in, n_out in zip(k, dilation, pads, in_shape, g.shape[2:]):
        left = d * (kk - 1) - lo
        right = (n_in - 1 + lo) - (n_out - 1)
        pad_spec.append((max(left, 0), max(right, 0)))
        start = max(-left, 0)
        crop.append(slice(start, start + n_in + d * (kk - 1)))
    gp = np.pad(g, pad_spec)[tuple(crop)]
    return correlate(gp, wf, (1,) * nd, dilation)


def scatter(g: np.ndarray, w: np.ndarray, padded_shape, stride, dilation) -> np.ndarray:
    """Adjoint of :func:`correlate` w.r.t. its input; returns (N, C, *padded_shape)."""
    k = w.shape[2:]
    out = g.shape[2:]
    n, o = g.shape[:2]
    c = w.shape[1]
    offsets = list(itertools.product(*(range(kk) for kk in k)))
    wt = w.reshape(o, -1).T
    g3 = g.reshape(n, o, -1)
    acc = np.zeros((n, c) + tuple(padded_shape))
    for sl in _chunks(n, wt.shape[0] * g3.shape[2]):
        cols = np.matmul(wt, g3[sl]).reshape((-1, c, len(offsets)) + tuple(out))
        for i, offset in enumerate(offsets):
            acc[(sl, slice(None)) + _offset_slices(offset, dilation, stride, out)] += cols[:, :, i]
    return acc


def conv(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: IntOrSeq = 1,
    dilation: IntOrSeq = 1,
    padding: PadSpec = 0,
) -> Tensor:
    """1D or 2D convolution (cross-correlation) with per-axis stride, dilation, padding."""
    nd = w.ndim - 2
    if nd not in (1, 2) or x.ndim != nd + 2:
        raise ValueError(f"conv: input rank {x.ndim} incompatible with kernel rank {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv: input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )
    stride = _tuple(stride, nd, "stride")
    dilation = _tuple(dilation, nd, "dilation")
    if min(stride) <= 0 or min(dilation) <= 0:
        raise ValueError("stride and dilation must be positive")
    pads = normalize_padding(padding, nd)
    xp = np.pad(x.data, ((0, 0), (0, 0)) + pads) if any(map(any, pads)) else x.data
    keep = is_grad_enabled() and w.requires_grad
    out, cols = correlate(xp, w.data, stride, dilation, keep_cols=True)
    if not keep or (cols is not None and cols.size > _KEEP_COLS_LIMIT):
        cols = None
    if b is not None:
        out += b.data.reshape((1, -1) + (1,) * nd)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[2:]))

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            if all(s_ == 1 for s_ in stride):
                gx = _input_grad_stride1(g, w.data, x.shape[2:], pads, dilation)
            else:
                gxp = scatter(g, w.data, xp.shape[2:], stride, dilation)
                gx = gxp[(slice(None), slice(None)) + crop]
        if w.requires_grad:
            if cols is not None:
                gw = _weight_grad_from_cols(cols, g, w.shape)
            else:
                gw = correlate_weight_grad(xp, g, w.shape[2:], stride, dilation)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def conv_transpose(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: IntOrSeq = 2, padding: IntOrSeq = 0
) -> Tensor:
    """Transposed convolution; output size per axis is (in - 1)*stride + k - 2*pad."""
    nd = w.ndim - 2
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"conv_transpose: input has {x.shape[1]} channels but kernel expects {w.shape[0]}"
        )
    stride = _tuple(stride, nd, "stride")
    if min(stride) <= 0:
        raise ValueError(f"conv_transpose: stride must be positive, got {stride}")
    pad = _tuple(padding, nd, "padding")
    k = w.shape[2:]
    full = tuple((n - 1) * s + kk for n, s, kk in zip(x.shape[2:], stride, k))
    ones = (1,) * nd
    y = scatter(x.data, w.data, full, stride, ones)
    crop = tuple(slice(p, f - p) for p, f in zip(pad, full))
    y = np.ascontiguousarray(y[(slice(None), slice(None)) + crop])
    if b is not None:
        y += b.data.reshape((1, -1) + (1,) * nd)

    def backward(g):
        gfull = np.zeros(g.shape[:2] + full)
        gfull[(slice(None), slice(None)) + crop] = g
        gx = correlate(gfull, w.data, stride, ones) if x.requires_grad else None
        gw = correlate_weight_grad(gfull, x.data, k, stride, ones) if w.requires_grad else None
        gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd))) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(y, parents, backward)


def max_pool(x: Tensor, kernel: IntOrSeq, stride: IntOrSeq, padding: PadSpec = 0) -> Tensor:
    """Max pooling; padded cells hold -inf and never win."""
    nd = x.ndim - 2
    k = _tuple(kernel, nd, "kernel")
    stride = _tuple(stride, nd, "stride")
    pads = normalize_padding(padding, nd)
    xp = np.pad(x.data, ((0, 0), (0, 0)) + pads, constant_values=-np.inf)
    ones = (1,) * nd
    win = _windows(xp, k, stride, ones)
    flat = win.reshape(win.shape[: 2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_shape = out.shape[2:]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[2:]))

    def backward(g):
        gxp = np.zeros(xp.shape)
        for pos, offset in enumerate(itertools.product(*(range(kk) for kk in k))):
            sl = (slice(None), slice(None)) + _offset_slices(offset, ones, stride, out_shape)
            gxp[sl] += g * (arg == pos)
        return (gxp[(slice(None), slice(None)) + crop],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization over batch and spatial axes.

    With ``running=None`` the batch statistics are used (train mode);
    otherwise ``running=(mean, var)`` is applied as a frozen affine map.
    Returns the output and the statistics that were used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if running is None:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]
    train = running is None

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if train:
            gx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward), mu, var


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """One fused LSTM step; returns concat([h', c'], axis=1).

    ``weight`` is (input + hidden, 4*hidden) with gate blocks ordered
    input, forget, candidate, output.
    """
    hid = h.shape[1]
    if c.shape != h.shape or weight.shape != (x.shape[1] + hid, 4 * hid):
        raise ValueError(
            f"lstm_cell: state shapes h{h.shape} c{c.shape} incompatible with weight {weight.shape}"
        )
    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ weight.data + bias.data
    i = expit(z[:, :hid])
    f = expit(z[:, hid : 2 * hid])
    cand = np.tanh(z[:, 2 * hid : 3 * hid])
    o = expit(z[:, 3 * hid :])
    c_new = f * c.data + i * cand
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(g):
        gh, gc = g[:, :hid], g[:, hid:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * cand * i * (1.0 - i),
                dc * c.data * f * (1.0 - f),
                dc * i * (1.0 - cand * cand),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dxh = dz @ weight.data.T
        return dxh[:, : x.shape[1]], dxh[:, x.shape[1] :], dc * f, xh.T @ dz, dz.sum(axis=0)

    return Tensor._from_op(np.concatenate([h_new, c_new], axis=1), (x, h, c, weight, bias), backward)
