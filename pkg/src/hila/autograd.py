"""Reverse-mode automatic differentiation over the tensor kernels.

Graphs are built eagerly: every op returns a :class:`Node` holding its
value and pull-back closures for its differentiable inputs. ``backward``
walks the graph once in reverse topological order with a deterministic
accumulation order, so repeated runs on identical inputs produce bitwise
identical gradients.

Also home to the finite-difference oracle, the AdamW optimizer with a
polynomial learning-rate schedule, and checkpoint (de)serialization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tk
from .errors import ContractError, ParseError, ShapeError
from .tensor import PatchGeometry, Tensor


class Node:
    """A value in the computation graph.

    ``parents`` pairs each differentiable input with its vjp: a closure
    mapping the output cotangent to that input's cotangent contribution.
    """

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value: Tensor, parents=(), requires_grad: bool | None = None):
        self.value = value
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> str:
        return self.value.dtype

    def item(self) -> float:
        return self.value.item()

    def __add__(self, other):
        return add(self, lift(other))

    def __sub__(self, other):
        return add(self, scale(lift(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def constant(value) -> Node:
    return Node(value if isinstance(value, Tensor) else Tensor(value), ())


def parameter(value) -> Node:
    t = value if isinstance(value, Tensor) else Tensor(value)
    return Node(t, (), requires_grad=True)


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _wrap(arr: np.ndarray, parents) -> Node:
    return Node(Tensor._wrap(arr), parents)


def backward(root: Node) -> dict[Node, Tensor]:
    """Gradients of a scalar root for every requires_grad leaf."""
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {
        id(root): np.ones(root.shape, dtype=root.array.dtype)
    }
    leaves: dict[Node, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[node] = Tensor._wrap(g)
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib
    return leaves


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    out = a.array + b.array
    return _wrap(out, (
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def mul(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    out = a.array * b.array
    return _wrap(out, (
        (a, lambda g: _unbroadcast(g * b.array, a.shape)),
        (b, lambda g: _unbroadcast(g * a.array, b.shape)),
    ))


def scale(a: Node, s: float) -> Node:
    a = lift(a)
    s = float(s)
    return _wrap(a.array * np.asarray(s, dtype=a.array.dtype), ((a, lambda g: g * s),))


def exp(a: Node) -> Node:
    a = lift(a)
    out = np.exp(a.array)
    return _wrap(out, ((a, lambda g: g * out),))


def div(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    out = a.array / b.array
    return _wrap(out, (
        (a, lambda g: _unbroadcast(g / b.array, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.array, b.shape)),
    ))


def guard_nonzero(a: Node) -> Node:
    """Replace exact zeros with one; used on fold-summed softmax denominators."""
    a = lift(a)
    zero = a.array == 0
    out = np.where(zero, np.asarray(1.0, dtype=a.array.dtype), a.array)
    return _wrap(out, ((a, lambda g: g * (~zero)),))


# --- shape ----------------------------------------------------------------


def reshape(a: Node, shape) -> Node:
    a = lift(a)
    shape = tuple(shape)
    old = a.shape
    return _wrap(a.array.reshape(shape), ((a, lambda g: g.reshape(old)),))


def transpose(a: Node, axes) -> Node:
    a = lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _wrap(
        np.ascontiguousarray(a.array.transpose(axes)),
        ((a, lambda g: np.ascontiguousarray(g.transpose(inverse))),),
    )


def concat_lastdim(nodes: Sequence[Node]) -> Node:
    nodes = [lift(n) for n in nodes]
    sizes = [n.shape[-1] for n in nodes]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([n.array for n in nodes], axis=-1)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: np.ascontiguousarray(g[..., lo:hi])

    return _wrap(out, tuple((n, make_vjp(i)) for i, n in enumerate(nodes)))


def pad_bottom_right(a: Node, pad_h: int, pad_w: int) -> Node:
    a = lift(a)
    out = np.pad(a.array, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    h, w = a.shape[1], a.shape[2]
    return _wrap(out, ((a, lambda g: np.ascontiguousarray(g[:, :h, :w, :])),))


def sum_all(a: Node) -> Node:
    a = lift(a)
    out = np.asarray(a.array.sum(), dtype=a.array.dtype)
    shape = a.shape
    return _wrap(out, ((a, lambda g: np.broadcast_to(g, shape).astype(g.dtype)),))


def mean_all(a: Node) -> Node:
    a = lift(a)
    n = a.value.size
    out = np.asarray(a.array.mean(), dtype=a.array.dtype)
    shape = a.shape
    return _wrap(out, ((a, lambda g: np.broadcast_to(g / n, shape).astype(g.dtype)),))


# --- numeric kernels ------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    a, b = lift(a), lift(b)
    out = tk.matmul(a.value, b.value)

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.array, -1, -2))
        return _unbroadcast_matmul(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.array, -1, -2), g)
        return _unbroadcast_matmul(gb, b.shape)

    return Node(out, ((a, vjp_a), (b, vjp_b)))


def _unbroadcast_matmul(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def linear(x: Node, w: Node, b: Node) -> Node:
    """Fused affine map on the last axis: x @ w + b.

    Equivalent to add(matmul(x, w), b) but with flat 2-d GEMMs in the
    pull-backs, which dominates training time.
    """
    x, w, b = lift(x), lift(w), lift(b)
    if len(w.shape) != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    out = x.array @ w.array + b.array
    din, dout = w.shape

    def vjp_x(g):
        return (g.reshape(-1, dout) @ w.array.T).reshape(x.shape)

    def vjp_w(g):
        return x.array.reshape(-1, din).T @ g.reshape(-1, dout)

    def vjp_b(g):
        return g.reshape(-1, dout).sum(axis=0)

    return _wrap(out, ((x, vjp_x), (w, vjp_w), (b, vjp_b)))


def softmax_lastdim(a: Node) -> Node:
    a = lift(a)
    s = tk._softmax_np(a.array)

    def vjp(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - inner)

    return _wrap(s, ((a, vjp),))


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = 1e-6) -> Node:
    x, gamma, beta = lift(x), lift(gamma), lift(beta)
    out, xhat, inv_std = tk._layer_norm_np(x.array, gamma.array, beta.array, eps)
    d = x.shape[-1]
    lead = tuple(range(x.array.ndim - 1))

    def vjp_x(g):
        dxhat = g * gamma.array
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (dxhat - mean_d - xhat * mean_dx)

    return _wrap(out, (
        (x, vjp_x),
        (gamma, lambda g: (g * xhat).sum(axis=lead)),
        (beta, lambda g: g.sum(axis=lead)),
    ))


def gelu(a: Node) -> Node:
    a = lift(a)
    x = a.array
    cdf = 0.5 * (1.0 + tk._erf(x * tk._INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return g * (cdf + x * pdf)

    return _wrap(out, ((a, vjp),))


def unfold(x: Node, g: PatchGeometry) -> Node:
    x = lift(x)
    out = tk._unfold_np(x.array, g)
    _, h, w, _ = x.shape
    ht, wt = g.out_grid(h, w)

    def vjp(gr):
        pr = gr.reshape(gr.shape[0], ht, wt, g.kernel, g.kernel, gr.shape[-1])
        return tk._scatter_windows(pr, h, w, g.kernel, g.stride, g.padding)

    return _wrap(out, ((x, vjp),))


def fold(patches: Node, out_h: int, out_w: int, g: PatchGeometry) -> Node:
    patches = lift(patches)
    out = tk._fold_np(patches.array, out_h, out_w, g)
    return _wrap(out, ((patches, lambda gr: tk._unfold_np(gr, g)),))


def conv2d(
    x: Node,
    w: Node,
    bias: Node,
    stride: int = 1,
    padding: int = 0,
    depthwise: bool = False,
) -> Node:
    x, w, bias = lift(x), lift(w), lift(bias)
    out = tk._conv2d_np(x.array, w.array, bias.array, stride, padding, depthwise)
    _, h, wid, cin = x.shape
    k = w.shape[0]
    _, ho, wo, _ = out.shape
    win = tk._windows(x.array, k, stride, padding)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))

    def vjp_x(g):
        if depthwise:
            dcols = g[:, :, :, None, None, :] * w.array.reshape(k, k, cin)
        else:
            flat = g.reshape(g.shape[0], ho * wo, -1)
            dcols = flat @ w.array.reshape(k * k * cin, -1).T
            dcols = dcols.reshape(g.shape[0], ho, wo, k, k, cin)
        return tk._scatter_windows(dcols, h, wid, k, stride, padding)

    def vjp_w(g):
        if depthwise:
            dw = np.einsum("bhwklc,bhwc->klc", cols, g, optimize=True)
            return dw.reshape(k, k, 1, cin)
        flat_c = cols.reshape(-1, k * k * cin)
        flat_g = g.reshape(-1, g.shape[-1])
        return (flat_c.T @ flat_g).reshape(k, k, cin, -1)

    def vjp_b(g):
        return g.sum(axis=(0, 1, 2))

    return _wrap(out, ((x, vjp_x), (w, vjp_w), (bias, vjp_b)))


def bilinear_resize(x: Node, out_h: int, out_w: int) -> Node:
    x = lift(x)
    out = tk._bilinear_np(x.array, out_h, out_w)
    _, h, w, _ = x.shape
    y0, y1, fy = tk._resize_coords(h, out_h)
    x0, x1, fx = tk._resize_coords(w, out_w)

    def vjp(g):
        dt = g.dtype
        fyc = fy.astype(dt)[:, None, None, None]
        fxc = fx.astype(dt)[:, None, None, None]
        # Undo the column interpolation: scatter over the width axis.
        g_w = np.ascontiguousarray(np.moveaxis(g, 2, 0))  # (ow, B, oh, C)
        rows = np.zeros((w,) + g_w.shape[1:], dtype=dt)
        np.add.at(rows, x0, g_w * (1 - fxc))
        np.add.at(rows, x1, g_w * fxc)
        rows = np.moveaxis(rows, 0, 2)  # (B, oh, w, C)
        g_h = np.ascontiguousarray(np.moveaxis(rows, 1, 0))  # (oh, B, w, C)
        dx = np.zeros((h,) + g_h.shape[1:], dtype=dt)
        np.add.at(dx, y0, g_h * (1 - fyc))
        np.add.at(dx, y1, g_h * fyc)
        return np.ascontiguousarray(np.moveaxis(dx, 0, 1))

    return _wrap(out, ((x, vjp),))


# --- finite differences ---------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, element by element."""
    if h <= 0:
        raise ContractError("finite_diff_grad step must be positive")
    base = x.array.astype(np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    src = base.reshape(-1)
    for i in range(src.size):
        bumped = src.copy()
        bumped[i] = src[i] + h
        f_plus = f(Tensor._wrap(bumped.reshape(base.shape).astype(x.array.dtype)))
        bumped[i] = src[i] - h
        f_minus = f(Tensor._wrap(bumped.reshape(base.shape).astype(x.array.dtype)))
        flat[i] = (float(f_plus) - float(f_minus)) / (2.0 * h)
    return Tensor._wrap(grad.astype(x.array.dtype))


# --- AdamW with polynomial LR decay ---------------------------------------


@dataclass
class AdamWState:
    lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    power: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_now(self) -> float:
        frac = min(self.step / max(self.total_steps, 1), 1.0)
        return self.lr * (1.0 - frac) ** self.power


def adamw_step(
    params: Sequence[tuple[str, Node]],
    grads: Mapping[str, Tensor],
    state: AdamWState,
) -> AdamWState:
    """One decoupled-weight-decay Adam update over named parameters."""
    lr_t = state.lr_now()
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, node in params:
        dt = node.array.dtype
        grad = grads.get(name)
        g = np.zeros(node.shape, dtype=dt) if grad is None else grad.array
        if g.shape != node.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter {name} {node.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(node.shape, dtype=dt)
            state.v[name] = np.zeros(node.shape, dtype=dt)
        v = state.v[name]
        # Moments update in place; they are owned by the state.
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        update += state.weight_decay * node.array
        node.value = Tensor._wrap(node.array - lr_t * update)
    return state


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(
    named: Sequence[tuple[str, Tensor]],
    base_path,
    extra: dict | None = None,
) -> None:
    """Write ``<base>.bin`` (concatenated HILT records) and ``<base>.json``."""
    base = Path(base_path)
    records = []
    offset = 0
    blobs = []
    for name, t in named:
        blob = tk.tensor_to_bytes(t)
        records.append(
            {"name": name, "offset": offset, "shape": list(t.shape), "dtype": t.dtype}
        )
        blobs.append(blob)
        offset += len(blob)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    manifest = {"format_version": 1, "params": records}
    if extra:
        manifest.update(extra)
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(base_path) -> tuple[dict[str, Tensor], dict]:
    base = Path(base_path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    with open(base.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    with open(base.with_suffix(".bin"), "rb") as fh:
        buf = fh.read()
    out: dict[str, Tensor] = {}
    for rec in manifest["params"]:
        t, _ = tk.tensor_from_bytes(buf, rec["offset"])
        if list(t.shape) != rec["shape"]:
            raise ParseError(f"checkpoint record {rec['name']} shape mismatch")
        out[rec["name"]] = t
    return out, manifest
