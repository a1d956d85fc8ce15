"""Dense float32 tensors, a few kernels and a reproducible random stream.

Tensors are plain ``numpy.ndarray`` values with dtype float32.  Reductions
(convolution sums, means, variance traces) accumulate in float64 and round
back to float32 on return.
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import BinaryIO, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# frozen into every file manifest; changing the generator or the gaussian
# transform requires a new tag
RNG_TAG = "pcg64+boxmuller/v1"

TENSOR_MAGIC = b"SEALTEN1"


class ShapeError(ValueError):
    """Raised on incompatible tensor extents."""


def as_tensor(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=DTYPE))


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add(a, b) -> np.ndarray:
    if np.ndim(a) and np.ndim(b):
        _require_same_shape(a, b)
    return as_tensor(np.asarray(a, np.float64) + np.asarray(b, np.float64))


def mul(a, b) -> np.ndarray:
    if np.ndim(a) and np.ndim(b):
        _require_same_shape(a, b)
    return as_tensor(np.asarray(a, np.float64) * np.asarray(b, np.float64))


def dot(a, b) -> float:
    _require_same_shape(a, b)
    return float(np.dot(np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)))


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return as_tensor(a.astype(np.float64) @ b.astype(np.float64))


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype if x.dtype.kind == "f" else DTYPE)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def hard_sigmoid(x):
    """Piecewise-linear gate relu6(x + 3) / 6, equal to 0.5 at the origin."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x + 3.0, 0.0, 6.0) / 6.0


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> strided view (N,C,H',W',K,K) over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_batch(x: np.ndarray, weight: np.ndarray, bias, stride: int = 1, pad: int = 0):
    """Batched convolution in float64.  Returns (output, im2col matrix)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects (N,C,H,W) input and (O,C,K,K) weight")
    n, c, h, w = x.shape
    o, c2, k, k2 = weight.shape
    if c != c2 or k != k2:
        raise ShapeError(f"conv weight {weight.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if k > h + 2 * pad or k > w + 2 * pad or ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} does not fit input {h}x{w} with pad {pad}")
    win = _windows(np.asarray(x, np.float64), k, stride, pad)[:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ np.asarray(weight, np.float64).reshape(o, -1).T
    if bias is not None:
        b = np.asarray(bias, np.float64)
        if b.shape != (o,):
            raise ShapeError(f"bias shape {b.shape} != ({o},)")
        out = out + b
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(grad, cols, x_shape, weight, stride, pad):
    """Gradients of a batched convolution w.r.t. input, weight and bias."""
    n, c, h, w = x_shape
    o, _, k, _ = weight.shape
    _, _, ho, wo = grad.shape
    g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    gw = (g.T @ cols).reshape(weight.shape)
    gb = g.sum(axis=0)
    dcols = (g @ np.asarray(weight, np.float64).reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for p in range(k):
        for q in range(k):
            dx[:, :, p:p + stride * ho:stride, q:q + stride * wo:stride] += dcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, gw, gb


def conv2d(input, weight, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Single-image convolution: (C,H,W) * (O,C,K,K) + (O,) -> (O,H',W')."""
    x = np.asarray(input)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a (C,H,W) input, got {x.shape}")
    out, _ = conv2d_batch(x[None], weight, bias, stride, pad)
    return as_tensor(out[0])


def channel_mean(input) -> np.ndarray:
    x = np.asarray(input)
    if x.ndim != 3:
        raise ShapeError(f"channel_mean expects (C,H,W), got {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError("empty spatial extent")
    return as_tensor(x.astype(np.float64).mean(axis=(1, 2)))


def mean_vector(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=np.float64)
    return s.mean(axis=0)


def covariance_trace(samples) -> float:
    """Trace of the unbiased sample covariance, summed per coordinate."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2:
        raise ShapeError("covariance trace needs at least two samples of shape (m, d)")
    return float(s.var(axis=0, ddof=1).sum())


class Rng:
    """Seeded stream: PCG64 uniforms, Box-Muller gaussians.

    Worker streams come from :meth:`spawn`, which hashes (seed, index) so that
    parallel work never shares state with its parent.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, index: int) -> "Rng":
        digest = hashlib.sha256(struct.pack("<QQ", self.seed, index)).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1]
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2 * np.pi * u2)
        z[1::2] = r * np.sin(2 * np.pi * u2)
        return z[:n].reshape(size)


def sample_unit_sphere(rng: Rng, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("sphere dimension must be >= 1")
    while True:
        g = rng.normal(d)
        norm = np.linalg.norm(g)
        if norm > 0:
            return as_tensor(g / norm)


def sample_orthant_sphere(rng: Rng, signs: Sequence[int]) -> np.ndarray:
    """Uniform sample from the sphere orthant with ``signs`` (1 -> +, 0 -> -)."""
    bits = np.asarray(signs).astype(bool)
    if bits.ndim != 1 or bits.size < 1:
        raise ValueError("signs must be a non-empty bit vector")
    v = np.abs(sample_unit_sphere(rng, bits.size).astype(np.float64))
    # an exact zero component has no sign; nudge it to the smallest magnitude
    v[v == 0] = np.finfo(DTYPE).tiny
    v = np.where(bits, v, -v)
    return as_tensor(v / np.linalg.norm(v))


# -- SEALTEN1 blocks ---------------------------------------------------------

def write_tensor(stream: BinaryIO, t) -> None:
    t = as_tensor(t)
    if t.ndim > 255:
        raise ShapeError("rank too large")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<B", t.ndim))
    stream.write(struct.pack(f"<{t.ndim}I", *t.shape))
    stream.write(t.astype("<f4").tobytes())


class FormatError(ValueError):
    """Malformed or truncated file content."""


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated payload: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 8)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(stream, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(stream, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    t = read_tensor(buf)
    if buf.read(1):
        raise FormatError("trailing bytes after tensor block")
    return t


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
