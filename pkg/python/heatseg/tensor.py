"""
Dense channel-first fields, the orthonormal DCT pair and N-D convolution kernels.

Everything above this module (differentiation, diffusion, the network) works on plain numpy arrays laid out as
``(batch, channel, *spatial)``. The :class:`FeatureField` and :class:`FrequencyField` wrappers are the validated
single-sample views used at public boundaries.
"""

from __future__ import annotations

import functools
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence, Union

import numpy as np
import scipy.fft
from typing_extensions import assert_never

__all__ = [
    "FieldShapeError",
    "NumericError",
    "ContractError",
    "HsfFormatError",
    "FeatureField",
    "FrequencyField",
    "DctMethod",
    "frequency_axis",
    "dct_matrix",
    "dct_along",
    "dct_forward",
    "dct_inverse",
    "per_axis",
    "conv_output_shape",
    "conv_nd",
    "conv_nd_backward",
    "conv_transpose_nd",
    "conv_transpose_nd_backward",
    "conv_spatial",
    "write_hsf",
    "read_hsf",
]


class FieldShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    """
    Raised when a caller breaks an operation's precondition.
    """


class HsfFormatError(ValueError):
    pass


DctMethod = Literal["matmul", "fft"]
IntOrSeq = Union[int, Sequence[int]]


def _check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} contains non-finite values")


def _check_spatial_rank(ndim: int) -> int:
    spatial_rank = ndim - 1
    if spatial_rank not in (2, 3):
        raise FieldShapeError(f"Expected 2 or 3 spatial axes after the channel axis, got {spatial_rank}")
    return spatial_rank


@dataclass(frozen=True)
class FeatureField:
    """
    A real field laid out as ``(channel, *spatial)`` with 2 or 3 spatial axes.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        _check_spatial_rank(data.ndim)
        _check_finite(data, "FeatureField")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def spatial_rank(self) -> int:
        return self.data.ndim - 1


@dataclass(frozen=True)
class FrequencyField:
    """
    DCT-II coefficients of a :class:`FeatureField`. Index 0 along every spatial axis is the DC coefficient.
    """

    data: np.ndarray
    freq_axes: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self) -> None:
        spatial_rank = _check_spatial_rank(self.data.ndim)
        if not self.freq_axes:
            object.__setattr__(self, "freq_axes", tuple(frequency_axis(n) for n in self.data.shape[1:]))
        if len(self.freq_axes) != spatial_rank or any(
            len(axis) != n for axis, n in zip(self.freq_axes, self.data.shape[1:])
        ):
            raise FieldShapeError("Frequency axes do not match the spatial shape")

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]


def frequency_axis(n: int) -> np.ndarray:
    """
    Discrete frequencies ``pi * i / n`` of the DCT-II basis along an axis of length ``n``.
    """
    return np.pi * np.arange(n) / n


@functools.lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """
    Orthonormal DCT-II matrix ``C`` with ``C[k, j] = s_k cos(pi k (2j + 1) / 2n)``. Its transpose is the inverse.

    The cached array is read only so it can be shared between threads.
    """
    if n < 1:
        raise FieldShapeError(f"Axis length must be at least 1, got {n}")
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    matrix = np.cos(np.pi * k * (2 * j + 1) / (2 * n)) * np.sqrt(2.0 / n)
    matrix[0, :] = np.sqrt(1.0 / n)
    matrix.setflags(write=False)
    return matrix


def dct_along(
    array: np.ndarray, axes: Sequence[int], inverse: bool = False, method: DctMethod = "matmul"
) -> np.ndarray:
    """
    Applies the orthonormal DCT-II (or its inverse, DCT-III) separably along each of ``axes``.
    """
    axes = tuple(a % array.ndim for a in axes)
    if method == "fft":
        transform = scipy.fft.idctn if inverse else scipy.fft.dctn
        return transform(array, type=2, norm="ortho", axes=axes)
    elif method == "matmul":
        out = array
        for axis in axes:
            matrix = dct_matrix(array.shape[axis])
            if inverse:
                matrix = matrix.T
            out = np.moveaxis(np.tensordot(matrix, out, axes=([1], [axis])), 0, axis)
        return out
    assert_never(method)


def dct_forward(field: FeatureField, method: DctMethod = "matmul") -> FrequencyField:
    """
    Orthonormal DCT-II over the spatial axes; the channel axis is left untouched.
    """
    _check_finite(field.data, "dct_forward input")
    axes = tuple(range(1, field.data.ndim))
    return FrequencyField(dct_along(field.data, axes, method=method))


def dct_inverse(freq: FrequencyField, method: DctMethod = "matmul") -> FeatureField:
    _check_finite(freq.data, "dct_inverse input")
    axes = tuple(range(1, freq.data.ndim))
    return FeatureField(dct_along(freq.data, axes, inverse=True, method=method))


def per_axis(value: IntOrSeq, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * rank
    values = tuple(int(v) for v in value)
    if len(values) != rank:
        raise FieldShapeError(f"{name} needs {rank} entries, got {len(values)}")
    return values


def conv_output_shape(
    spatial: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]
) -> tuple[int, ...]:
    out = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, padding))
    if any(n < 1 for n in out):
        raise FieldShapeError(f"Convolution output shape {out} is empty for input {tuple(spatial)}")
    return out


def _taps(kernel: Sequence[int]) -> itertools.product:
    return itertools.product(*(range(k) for k in kernel))


def _tap_slices(offset: Sequence[int], stride: Sequence[int], out_shape: Sequence[int]) -> tuple[slice, ...]:
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))


def conv_nd(x: np.ndarray, w: np.ndarray, stride: Sequence[int], padding: Sequence[int]) -> np.ndarray:
    """
    Zero-padded cross-correlation of ``x`` ``(B, Cin, *S)`` with ``w`` ``(Cout, Cin, *K)``.

    Accumulates one tensordot per kernel tap, which keeps the same code path for 2D and 3D.
    """
    rank = x.ndim - 2
    if w.ndim != rank + 2:
        raise FieldShapeError(f"Kernel spatial rank {w.ndim - 2} does not match field spatial rank {rank}")
    if w.shape[1] != x.shape[1]:
        raise FieldShapeError(f"Kernel expects {w.shape[1]} input channels, field has {x.shape[1]}")
    out_shape = conv_output_shape(x.shape[2:], w.shape[2:], stride, padding)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out = np.zeros((x.shape[0], *out_shape, w.shape[0]), dtype=np.result_type(x, w))
    for offset in _taps(w.shape[2:]):
        patch = xp[(slice(None), slice(None)) + _tap_slices(offset, stride, out_shape)]
        out += np.tensordot(patch, w[(slice(None), slice(None)) + offset], axes=([1], [1]))
    return np.moveaxis(out, -1, 1)


def conv_nd_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, stride: Sequence[int], padding: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """
    Gradients of :func:`conv_nd` with respect to ``x`` and ``w``.
    """
    out_shape = grad_out.shape[2:]
    spatial_axes = tuple(range(1, len(out_shape) + 1))
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    grad_xp = np.zeros_like(xp, dtype=np.result_type(grad_out, w))
    grad_w = np.zeros_like(w, dtype=np.result_type(grad_out, x))
    g = np.moveaxis(grad_out, 1, -1)
    for offset in _taps(w.shape[2:]):
        index = (slice(None), slice(None)) + _tap_slices(offset, stride, out_shape)
        patch = xp[index]
        tap = (slice(None), slice(None)) + offset
        grad_w[tap] = np.tensordot(g, patch, axes=((0, *spatial_axes), (0, *(a + 1 for a in spatial_axes))))
        grad_xp[index] += np.moveaxis(np.tensordot(g, w[tap], axes=([-1], [0])), -1, 1)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))
    return grad_xp[crop], grad_w


def conv_transpose_nd(x: np.ndarray, w: np.ndarray, stride: Sequence[int]) -> np.ndarray:
    """
    Transposed convolution of ``x`` ``(B, Cin, *S)`` with ``w`` ``(Cin, Cout, *K)``; each axis grows to
    ``(S - 1) * stride + K``.
    """
    if w.shape[0] != x.shape[1]:
        raise FieldShapeError(f"Kernel expects {w.shape[0]} input channels, field has {x.shape[1]}")
    in_shape = x.shape[2:]
    out_shape = tuple((n - 1) * s + k for n, s, k in zip(in_shape, stride, w.shape[2:]))
    out = np.zeros((x.shape[0], *out_shape, w.shape[1]), dtype=np.result_type(x, w))
    g = np.moveaxis(x, 1, -1)
    for offset in _taps(w.shape[2:]):
        index = (slice(None),) + _tap_slices(offset, stride, in_shape)
        out[index] += np.tensordot(g, w[(slice(None), slice(None)) + offset], axes=([-1], [0]))
    return np.moveaxis(out, -1, 1)


def conv_transpose_nd_backward(
    grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, stride: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    in_shape = x.shape[2:]
    batch_and_spatial = tuple(range(len(in_shape) + 1))
    g = np.moveaxis(grad_out, 1, -1)
    xm = np.moveaxis(x, 1, -1)
    grad_x = np.zeros(xm.shape, dtype=np.result_type(grad_out, w))
    grad_w = np.zeros_like(w, dtype=np.result_type(grad_out, x))
    for offset in _taps(w.shape[2:]):
        window = g[(slice(None),) + _tap_slices(offset, stride, in_shape)]
        tap = (slice(None), slice(None)) + offset
        grad_x += np.tensordot(window, w[tap], axes=([-1], [1]))
        grad_w[tap] = np.tensordot(xm, window, axes=(batch_and_spatial, batch_and_spatial))
    return np.moveaxis(grad_x, -1, 1), grad_w


def conv_spatial(field: FeatureField, kernel: np.ndarray, stride: IntOrSeq = 1, padding: IntOrSeq = 0) -> FeatureField:
    """
    Cross-correlates a single field with ``kernel`` of shape ``(Cout, Cin, *K)``.
    """
    rank = field.spatial_rank
    kernel = np.asarray(kernel, dtype=np.float64)
    out = conv_nd(
        field.data[None],
        kernel,
        per_axis(stride, rank, "stride"),
        per_axis(padding, rank, "padding"),
    )
    return FeatureField(out[0])


HSF_MAGIC = b"HSF1"


def write_hsf(path: Union[str, Path], array: np.ndarray) -> None:
    """
    Writes ``array`` as a raw field file: magic, u32 rank, u32 axis lengths, float64 row-major payload, all
    little endian.
    """
    array = np.ascontiguousarray(array, dtype="<f8")
    header = HSF_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def read_hsf(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != HSF_MAGIC:
        raise HsfFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise HsfFormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    header_size = 8 + 4 * rank
    if len(raw) < header_size:
        raise HsfFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    payload = raw[header_size:]
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise HsfFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
