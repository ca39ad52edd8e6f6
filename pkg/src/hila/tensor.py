"""Dense float tensors and the forward numeric kernels everything else builds on.

Feature maps are laid out ``(B, H, W, C)`` row-major throughout, so the
per-window slot axis produced by :func:`unfold` is contiguous. Kernels are
pure functions: they never mutate their inputs and always return freshly
allocated tensors. Working precision is float32; float64 is used by the
oracle and gradient-check paths.

The on-disk tensor format ("HILT") is: magic ``b"HILT"``, one byte dtype
tag (0 = float32, 1 = float64), one byte rank, ``rank`` little-endian u32
extents, then the raw little-endian row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import GeometryError, ParseError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_INV_SQRT2 = 0.7071067811865476


class Tensor:
    """Immutable dense array of float32 or float64 values."""

    __slots__ = ("array",)

    def __init__(self, data, dtype: str | None = None):
        if dtype is None:
            # Numpy float arrays keep their precision; everything else
            # (lists, ints) lands in the float32 working precision.
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = np.array(data, order="C")
            else:
                arr = np.array(data, dtype=np.float32, order="C")
        else:
            arr = np.array(data, dtype=_DTYPES[dtype], order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for kernel outputs: takes ownership, no copy.
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(t, "array", arr)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def dtype(self) -> str:
        return str(self.array.dtype)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying buffer."""
        return self.array.reshape(-1)

    def astype(self, dtype: str) -> "Tensor":
        return Tensor._wrap(self.array.astype(_DTYPES[dtype]))

    def item(self) -> float:
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def tensor(data, dtype: str = "float32") -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype: str = "float32") -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=_DTYPES[dtype]))


def ones(shape, dtype: str = "float32") -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=_DTYPES[dtype]))


def full(shape, value: float, dtype: str = "float32") -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=_DTYPES[dtype]))


@dataclass(frozen=True)
class PatchGeometry:
    """Sliding-window geometry linking a coarse grid to a fine grid.

    With the defaults (kernel 4, stride 2, padding 1) every coarse location
    maps to a 4x4 window of 16 fine slots, and every fine location is
    covered by 1 to 4 windows. Out-of-bounds taps read as zero. Slots are
    ordered row-major within the window; that ordering is a fixed contract
    because positional bias tables index by slot.
    """

    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise GeometryError(f"invalid geometry {self}")
        if self.kernel < self.stride:
            raise GeometryError(f"kernel {self.kernel} smaller than stride {self.stride}")

    @classmethod
    def for_patch(cls, patch: int) -> "PatchGeometry":
        """Geometry for an even patch side at the standard 2x downsampling."""
        if patch % 2 != 0:
            raise GeometryError(f"patch side must be even, got {patch}")
        return cls(kernel=patch, stride=2, padding=(patch - 2) // 2)

    @property
    def slots(self) -> int:
        return self.kernel * self.kernel

    def out_grid(self, h: int, w: int) -> tuple[int, int]:
        for n in (h, w):
            if (n + 2 * self.padding - self.kernel) % self.stride != 0:
                raise GeometryError(
                    f"extent {n} is not tiled by kernel={self.kernel} "
                    f"stride={self.stride} padding={self.padding}"
                )
        ht = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wt = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ht < 1 or wt < 1:
            raise GeometryError(f"geometry {self} yields empty grid for {h}x{w}")
        return ht, wt


def _check_dtype_match(name, *arrays):
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise ShapeError(f"{name}: mixed dtypes {dt} and {a.dtype}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcastable leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_dtype_match("matmul", a.array, b.array)
    try:
        out = np.matmul(a.array, b.array)
    except ValueError as exc:
        raise ShapeError(f"matmul broadcast failed: {a.shape} @ {b.shape}") from exc
    return Tensor._wrap(out)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dim, got {x.shape}")
    return Tensor._wrap(_softmax_np(x.array))


def _softmax_np(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    out, _, _ = _layer_norm_np(x.array, gamma.array, beta.array, eps)
    return Tensor._wrap(out)


def _layer_norm_np(a, gamma, beta, eps):
    mu = a.mean(axis=-1, keepdims=True)
    centered = a - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, xhat, inv_std


def gelu(x: Tensor) -> Tensor:
    return Tensor._wrap(_gelu_np(x.array))


def _gelu_np(a: np.ndarray) -> np.ndarray:
    # Exact erf form, not the tanh approximation. Factored as x * cdf so the
    # value is bit-identical to the autograd path, which caches cdf.
    return a * (0.5 * (1.0 + _erf(a * _INV_SQRT2)))


def _windows(arr: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """All kxk windows at stride s after zero padding; (B, Ho, Wo, C, k, k)."""
    if p:
        arr = np.pad(arr, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(arr, (k, k), axis=(1, 2))
    return win[:, ::s, ::s]


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    depthwise: bool = False,
) -> Tensor:
    out = _conv2d_np(x.array, w.array, bias.array, stride, padding, depthwise)
    return Tensor._wrap(out)


def _conv2d_np(a, w, bias, stride, padding, depthwise):
    if a.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {a.shape}, {w.shape}")
    b, h, ww_, cin = a.shape
    k1, k2, wcin, cout = w.shape
    if k1 != k2:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if stride < 1 or k1 < 1:
        raise ShapeError("conv2d stride and kernel must be >= 1")
    if depthwise:
        if wcin != 1 or cout != cin:
            raise ShapeError(
                f"depthwise conv needs weight (k,k,1,Cin={cin}), got {w.shape}"
            )
    elif wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    ho = (h + 2 * padding - k1) // stride + 1
    wo = (ww_ + 2 * padding - k1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be {ho}x{wo} for input {h}x{ww_}, "
            f"kernel {k1}, stride {stride}, padding {padding}"
        )
    win = _windows(a, k1, stride, padding)  # (B, ho, wo, C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    if depthwise:
        cols = cols.reshape(b, ho * wo, k1 * k1, cin)
        out = np.einsum("btkc,kc->btc", cols, w.reshape(k1 * k1, cin), optimize=True)
    else:
        cols = cols.reshape(b, ho * wo, k1 * k1 * cin)
        out = cols @ w.reshape(k1 * k1 * cin, cout)
    out = out + bias
    return out.reshape(b, ho, wo, -1).astype(a.dtype, copy=False)


def unfold(x: Tensor, g: PatchGeometry) -> Tensor:
    """Extract sliding windows: (B,H,W,C) -> (B, Ht*Wt, k*k, C).

    Out-of-bounds taps are zero. Window (i, j) covers input rows
    ``stride*i - padding .. stride*i - padding + kernel - 1`` and the
    analogous columns; slots are row-major within the window.
    """
    return Tensor._wrap(_unfold_np(x.array, g))


def _unfold_np(a: np.ndarray, g: PatchGeometry) -> np.ndarray:
    if a.ndim != 4:
        raise ShapeError(f"unfold expects (B,H,W,C), got {a.shape}")
    bsz, h, w, c = a.shape
    ht, wt = g.out_grid(h, w)
    win = _windows(a, g.kernel, g.stride, g.padding)
    out = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz, ht * wt, g.slots, c)
    return np.ascontiguousarray(out)


def fold(patches: Tensor, out_h: int, out_w: int, g: PatchGeometry) -> Tensor:
    """Adjoint of :func:`unfold`: overlapping contributions sum."""
    return Tensor._wrap(_fold_np(patches.array, out_h, out_w, g))


def _fold_np(p: np.ndarray, out_h: int, out_w: int, g: PatchGeometry) -> np.ndarray:
    if p.ndim != 4:
        raise ShapeError(f"fold expects (B,T,slots,C), got {p.shape}")
    ht, wt = g.out_grid(out_h, out_w)
    bsz, t, slots, c = p.shape
    if t != ht * wt or slots != g.slots:
        raise GeometryError(
            f"fold patches {p.shape} inconsistent with {out_h}x{out_w} under {g}"
        )
    return _scatter_windows(p.reshape(bsz, ht, wt, g.kernel, g.kernel, c),
                            out_h, out_w, g.kernel, g.stride, g.padding)


def _scatter_windows(pr, out_h, out_w, k, s, p):
    """col2im: sum window entries back onto the padded grid, then crop."""
    bsz, ho, wo = pr.shape[:3]
    c = pr.shape[-1]
    buf = np.zeros((bsz, out_h + 2 * p, out_w + 2 * p, c), dtype=pr.dtype)
    for ki in range(k):
        for kj in range(k):
            buf[:, ki : ki + s * ho : s, kj : kj + s * wo : s, :] += pr[:, :, :, ki, kj, :]
    return np.ascontiguousarray(buf[:, p : p + out_h, p : p + out_w, :])


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with the align-corners=false convention."""
    return Tensor._wrap(_bilinear_np(x.array, out_h, out_w))


def _resize_coords(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    return lo, hi, frac


def _bilinear_np(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if a.ndim != 4:
        raise ShapeError(f"bilinear_resize expects (B,H,W,C), got {a.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize target extents must be >= 1")
    y0, y1, fy = _resize_coords(a.shape[1], out_h)
    x0, x1, fx = _resize_coords(a.shape[2], out_w)
    fy = fy.astype(a.dtype)[None, :, None, None]
    fx = fx.astype(a.dtype)[None, None, :, None]
    rows = a[:, y0] * (1 - fy) + a[:, y1] * fy
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return np.ascontiguousarray(out)


# --- HILT binary tensor format -------------------------------------------

_MAGIC = b"HILT"
_TAG_FOR = {"float32": 0, "float64": 1}
_DTYPE_FOR_TAG = {0: "<f4", 1: "<f8"}


def tensor_to_bytes(t: Tensor) -> bytes:
    rank = t.ndim
    header = _MAGIC + struct.pack("<BB", _TAG_FOR[t.dtype], rank)
    header += struct.pack(f"<{rank}I", *t.shape) if rank else b""
    payload = t.array.astype(_DTYPE_FOR_TAG[_TAG_FOR[t.dtype]], copy=False).tobytes()
    return header + payload


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    if buf[offset : offset + 4] != _MAGIC:
        raise ParseError("bad tensor magic", offset)
    pos = offset + 4
    if pos + 2 > len(buf):
        raise ParseError("truncated tensor header", pos)
    tag, rank = struct.unpack_from("<BB", buf, pos)
    pos += 2
    if tag not in _DTYPE_FOR_TAG:
        raise ParseError(f"unknown dtype tag {tag}", offset + 4)
    if pos + 4 * rank > len(buf):
        raise ParseError("truncated tensor extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    nbytes = count * (4 if tag == 0 else 8)
    if pos + nbytes > len(buf):
        raise ParseError("truncated tensor payload", pos)
    arr = np.frombuffer(buf, dtype=_DTYPE_FOR_TAG[tag], count=count, offset=pos)
    arr = arr.reshape(shape).astype("float32" if tag == 0 else "float64")
    return Tensor._wrap(arr), pos + nbytes


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, _ = tensor_from_bytes(buf)
    return t
