"""Dense float64 tensors and the primitive numeric operations.

Tensors are plain C-contiguous ``numpy.float64`` arrays of rank <= 5. Every
function here is pure: inputs are never modified in place.
"""
import io
import struct

import numpy as np

from . import kernels
from .errors import ConfigError, FormatError, ShapeError

MAX_RANK = 5
BLOB_MAGIC = b"TMUT"
BLOB_VERSION = 1


def as_tensor(data, shape=None):
    """Coerce ``data`` to a validated tensor (float64, contiguous, finite)."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        t = t.reshape(shape)
    if t.ndim > MAX_RANK:
        raise ShapeError("tensor rank", (MAX_RANK,), t.shape)
    if any(n < 1 for n in t.shape):
        raise ShapeError("tensor extents must be >= 1", None, t.shape)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("conv2d input must be (C,H,W) or (B,C,H,W)", None, x.shape)


def conv2d(x, weight, bias=None):
    """Zero-padded 'same' convolution with stride 1.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``weight`` is
    ``(C_out, C_in, k, k)`` with odd ``k``.
    """
    xb, squeeze = _batched(x)
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d kernel must be square with odd size", None, weight.shape)
    if xb.shape[1] != c_in:
        raise ShapeError("conv2d input channels vs kernel", (c_in,) + xb.shape[2:], xb.shape[1:])
    out, _ = conv2d_with_cols(xb, weight, bias)
    return out[0] if squeeze else out


def conv2d_with_cols(x, weight, bias=None):
    """Batched :func:`conv2d` that also returns the im2col matrix for reuse
    by :func:`conv2d_backward`."""
    c_out, _, k, _ = weight.shape
    b, _, h, w = x.shape
    cols = kernels.im2col(np.ascontiguousarray(x), k)
    out = cols @ weight.reshape(c_out, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(b, h, w, c_out).transpose(0, 3, 1, 2)), cols


def conv2d_backward(grad_out, x, weight, need_input=True, cols=None):
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    c_out, c_in, k, _ = weight.shape
    b, _, h, w = xb.shape
    g = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(b * h * w, c_out)
    if cols is None:
        cols = kernels.im2col(np.ascontiguousarray(xb), k)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    grad_x = None
    if need_input:
        grad_x = kernels.col2im(np.ascontiguousarray(g @ weight.reshape(c_out, -1)), xb.shape, k)
        if squeeze:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def _check_eps(epsilon):
    if not epsilon > 0:
        raise ConfigError(f"layer_norm epsilon must be > 0, got {epsilon}")


def layer_norm(x, gain, shift, epsilon=1e-5, groups=1):
    """Normalize each sample (and each of ``groups`` channel groups) over all
    of its remaining elements, then apply per-channel ``gain`` / ``shift``.

    ``x`` is ``(B, G*C, H, W)``; ``gain`` and ``shift`` are ``(G*C,)``.
    """
    _check_eps(epsilon)
    b = x.shape[0]
    xg = x.reshape(b, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    xhat = ((xg - mean) / np.sqrt(var + epsilon)).reshape(x.shape)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    return xhat * gain.reshape(bshape) + shift.reshape(bshape)


def sigmoid(x):
    # tanh form never overflows and is exact at 0
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def tanh(x):
    return np.tanh(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op} operands", a.shape, b.shape)


def elementwise(op, *operands):
    """Dispatch a pointwise operation by name.

    Unary: ``sigmoid``, ``tanh``. Binary (equal shapes): ``hadamard``,
    ``add``, ``sub``. ``scale`` takes a tensor and a scalar.
    """
    if op == "sigmoid":
        return sigmoid(operands[0])
    if op == "tanh":
        return tanh(operands[0])
    if op == "scale":
        return operands[0] * float(operands[1])
    a, b = operands
    _same_shape(op, a, b)
    if op == "hadamard":
        return a * b
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    raise ConfigError(f"unknown elementwise op {op!r}")


def space_to_depth(x, factor):
    """``(..., P, H, W)`` -> ``(..., P*f*f, H/f, W/f)``.

    Output channel ``p*f*f + i*f + j`` holds pixels ``(i::f, j::f)`` of
    input channel ``p``.
    """
    *lead, p, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"space_to_depth extents must be divisible by {factor}", None, x.shape)
    f = factor
    y = x.reshape(*lead, p, h // f, f, w // f, f)
    n = len(lead)
    axes = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    return np.ascontiguousarray(y.transpose(axes)).reshape(*lead, p * f * f, h // f, w // f)


def depth_to_space(x, factor):
    """Exact inverse of :func:`space_to_depth`."""
    *lead, c, h, w = x.shape
    f = factor
    if c % (f * f):
        raise ShapeError(f"depth_to_space channels must be divisible by {f * f}", None, x.shape)
    p = c // (f * f)
    y = x.reshape(*lead, p, f, f, h, w)
    n = len(lead)
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    return np.ascontiguousarray(y.transpose(axes)).reshape(*lead, p, h * f, w * f)


# -- tensor blob format -------------------------------------------------------

def write_tensor(stream, t):
    t = np.ascontiguousarray(t, dtype=np.float64)
    stream.write(BLOB_MAGIC)
    stream.write(struct.pack("<II", BLOB_VERSION, t.ndim))
    stream.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    stream.write(t.astype("<f8", copy=False).tobytes())


def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream):
    magic = _read_exact(stream, 4, "tensor header")
    if magic != BLOB_MAGIC:
        raise FormatError(f"bad magic {magic!r} for tensor blob (expected {BLOB_MAGIC!r})")
    version, rank = struct.unpack("<II", _read_exact(stream, 8, "tensor header"))
    if version != BLOB_VERSION:
        raise FormatError(f"tensor blob version {version} unsupported (reader is version {BLOB_VERSION})")
    if rank > MAX_RANK:
        raise FormatError(f"tensor rank {rank} exceeds {MAX_RANK}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "tensor extents"))
    count = int(np.prod(shape, dtype=np.int64))
    data = _read_exact(stream, 8 * count, "tensor data")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(t):
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))
