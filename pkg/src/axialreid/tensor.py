"""Dense f64 tensor substrate: elementwise ops, contractions, softmax, pooling,
seeded initialization, and the binary container format used for all file I/O.

Tensors are plain ``numpy.ndarray`` values in float64, row-major. Every public
operation validates its inputs and guarantees a finite result.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError

MAGIC = b"AAKT"
FORMAT_VERSION = 1


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float64 array and validate extents."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    for ext in arr.shape:
        if ext <= 0:
            raise DimensionError(f"{name} has non-positive extent in shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of a (m x k) and b (k x n)."""
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    return check_finite(a @ b, "matmul result")


def softmax(x, axis: int) -> np.ndarray:
    """Numerically stabilized softmax along one axis."""
    x = as_tensor(x, "x")
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise DimensionError("softmax along an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return check_finite(e / np.sum(e, axis=axis, keepdims=True), "softmax result")


def avg_pool_2d(x, factor: int) -> np.ndarray:
    """Average-pool the trailing two axes of a (C, T, H, W) tensor.

    Output extents are ceil(H/factor) x ceil(W/factor); edge windows that only
    partially cover the input average over the covered cells.
    """
    x = as_tensor(x, "x")
    if x.ndim != 4:
        raise DimensionError(f"avg_pool_2d expects rank-4 input, got shape {x.shape}")
    if factor < 1:
        raise DimensionError(f"pooling factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    c, t, h, w = x.shape
    ho = -(-h // factor)
    wo = -(-w // factor)
    out = np.empty((c, t, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            win = x[:, :, i * factor : min((i + 1) * factor, h), j * factor : min((j + 1) * factor, w)]
            out[:, :, i, j] = win.mean(axis=(2, 3))
    return check_finite(out, "avg_pool_2d result")


def avg_pool_2d_adjoint(grad, factor: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of avg_pool_2d: spreads each cell gradient over its window."""
    grad = as_tensor(grad, "grad")
    h, w = in_hw
    c, t, ho, wo = grad.shape
    out = np.zeros((c, t, h, w), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            hs = slice(i * factor, min((i + 1) * factor, h))
            ws = slice(j * factor, min((j + 1) * factor, w))
            n = (hs.stop - hs.start) * (ws.stop - ws.start)
            out[:, :, hs, ws] += grad[:, :, i, j][:, :, None, None] / n
    return out


def upsample_nearest_2d(x, factor: int, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Nearest-neighbor upsampling of the trailing two axes, optionally cropped
    to target extents (used when the fine scale has odd size)."""
    x = as_tensor(x, "x")
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest_2d expects rank-4 input, got shape {x.shape}")
    if factor < 1:
        raise DimensionError(f"upsampling factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)
    if target_hw is not None:
        th, tw = target_hw
        if th > out.shape[2] or tw > out.shape[3]:
            raise DimensionError(f"target {target_hw} exceeds upsampled extents {out.shape[2:]}")
        out = out[:, :, :th, :tw]
    return np.ascontiguousarray(out)


def upsample_nearest_2d_adjoint(grad, factor: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of upsample_nearest_2d: sums gradients over each replicated block."""
    grad = as_tensor(grad, "grad")
    h, w = in_hw
    c, t, gh, gw = grad.shape
    out = np.zeros((c, t, h, w), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            out[:, :, i // factor, j // factor] += grad[:, :, i, j]
    return out


class Rng:
    """Deterministic random source, PCG64 keyed by a 64-bit seed.

    The same seed yields the same draw sequence on every platform. Independent
    child streams are derived with ``child``; derivation depends only on the
    seed and the integer key path.
    """

    def __init__(self, seed: int, _keys: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._keys = _keys
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_keys])))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self._keys + tuple(int(k) for k in keys))

    def uniform_init(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        """Uniform in [-b, b] with b = 1/sqrt(fan_in), the default for learned parameters."""
        b = 1.0 / np.sqrt(float(fan_in))
        return self._gen.uniform(-b, b, size=shape).astype(np.float64)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(np.float64)

    def integers(self, low: int, high: int, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def save_tensor(path, x) -> None:
    """Write a tensor container: magic, version u32, rank u32, extents u64[], f64 payload (LE)."""
    x = as_tensor(x, "tensor")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, x.ndim))
        f.write(struct.pack(f"<{x.ndim}Q", *x.shape))
        f.write(x.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a tensor container written by save_tensor."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValidationError(f"{path}: not a tensor container (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    header_end = 12 + 8 * rank
    if len(blob) < header_end:
        raise ValidationError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 12)
    count = 1
    for ext in shape:
        if ext == 0:
            raise ValidationError(f"{path}: zero extent in shape {shape}")
        count *= ext
    payload = blob[header_end:]
    if len(payload) != 8 * count:
        raise ValidationError(f"{path}: payload size {len(payload)} does not match shape {shape}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return np.ascontiguousarray(arr)
