"""Rank-4 tensors in (n, h, w, c) layout and the differentiable ops the flow needs.

Tensors are plain numpy arrays. Every op here is a pure function; each
forward op has a matching ``*_vjp`` that returns the vector-Jacobian product
for a given upstream gradient.
"""

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericsError, ShapeError

F32 = np.float32
F64 = np.float64

GTB_MAGIC = b"GTB1"
_GTB_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_GTB_CODES = {np.dtype(F32): 0, np.dtype(F64): 1}


def as_tensor4(x, dtype=None):
    """Validate and return ``x`` as an (n, h, w, c) array."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 (n, h, w, c) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {x.shape}")
    if x.dtype not in (F32, F64):
        x = x.astype(F32)
    return x


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


# -- convolution -----------------------------------------------------------


def _check_conv(x, weight, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be (kh, kw, c_in, c_out), got {weight.shape}")
    kh, kw, c_in, c_out = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")


def im2col(x, k):
    """Stack the k*k zero-padded neighbourhoods of each pixel along channels.

    Column order is (di, dj, c_in), matching ``weight.reshape(k*k*c_in, c_out)``.
    """
    if k == 1:
        return x
    n, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n, h, w, k * k * c)


def col2im(cols, k, c):
    """Adjoint of :func:`im2col`: scatter-add columns back onto pixels."""
    if k == 1:
        return cols
    n, h, w, _ = cols.shape
    p = k // 2
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    idx = 0
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w, :] += cols[..., idx * c:(idx + 1) * c]
            idx += 1
    return out[:, p:p + h, p:p + w, :]


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero 'same' padding, NHWC layout."""
    _check_conv(x, weight, bias)
    k, _, c_in, c_out = weight.shape
    y = im2col(x, k) @ weight.reshape(k * k * c_in, c_out)
    if bias is not None:
        y = y + bias
    return check_finite(y, "conv2d output")


def conv2d_vjp(x, weight, upstream, cols=None):
    """Gradients of ``sum(upstream * conv2d(x, weight, bias))``.

    Returns ``(dx, dweight, dbias)``. ``cols`` may pass a cached ``im2col(x)``.
    """
    _check_conv(x, weight, None)
    k, _, c_in, c_out = weight.shape
    n, h, w, _ = x.shape
    if upstream.shape != (n, h, w, c_out):
        raise ShapeError(
            f"upstream shape {upstream.shape} != conv output {(n, h, w, c_out)}"
        )
    if cols is None:
        cols = im2col(x, k)
    w2 = weight.reshape(k * k * c_in, c_out)
    g2 = upstream.reshape(-1, c_out)
    dweight = (cols.reshape(-1, k * k * c_in).T @ g2).reshape(weight.shape)
    dbias = g2.sum(axis=0)
    if k > 1 and c_out < c_in:
        # adjoint of a 'same' conv is a 'same' conv with the flipped, transposed kernel
        flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2)
        dx = im2col(upstream, k) @ flipped.reshape(k * k * c_out, c_in)
    else:
        dx = col2im(upstream @ w2.T, k, c_in)
    return dx, dweight, dbias


# -- pointwise -------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_vjp(x, upstream):
    return upstream * (x > 0)


def channel_affine(x, s, b):
    """Per-channel ``s * x + b`` at every spatial position."""
    c = x.shape[-1]
    if np.shape(s) != (c,) or np.shape(b) != (c,):
        raise ShapeError(
            f"scale/bias must have length {c}, got {np.shape(s)} and {np.shape(b)}"
        )
    return check_finite(x * s + b, "channel_affine output")


def channel_affine_vjp(x, s, upstream):
    """Returns ``(dx, ds, db)``."""
    axes = tuple(range(x.ndim - 1))
    return upstream * s, (upstream * x).sum(axis=axes), upstream.sum(axis=axes)


# -- reductions ------------------------------------------------------------


def tensor_sum(x):
    return x.sum()


def mean_per_channel(x):
    return x.reshape(-1, x.shape[-1]).mean(axis=0)


def var_per_channel(x):
    """Population variance over the n*h*w axis."""
    flat = x.reshape(-1, x.shape[-1])
    return ((flat - flat.mean(axis=0)) ** 2).mean(axis=0)


# -- GTB files -------------------------------------------------------------


def write_gtb(path, array):
    """Write a tensor as GTB: magic, dtype tag, rank, u32 dims, LE payload."""
    array = np.asarray(array)
    if array.dtype not in _GTB_CODES:
        array = array.astype(F32)
    code = _GTB_CODES[array.dtype]
    header = GTB_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_GTB_TAGS[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_gtb(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if raw[:4] != GTB_MAGIC or len(raw) < 6:
        raise DataError(f"{path}: not a GTB1 file")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _GTB_TAGS:
        raise DataError(f"{path}: unknown dtype tag {code}")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)
    offset = 6 + 4 * rank
    dtype = _GTB_TAGS[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise DataError(
            f"{path}: payload is {len(raw) - offset} bytes, dims {dims} need {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))
