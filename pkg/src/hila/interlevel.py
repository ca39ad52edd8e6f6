"""Inter-level attention: the bottom-up and top-down updates between stages.

Both directions attend through the same local window geometry: every
higher-level location owns a kxk window of lower-level slots (16 under the
default 4/2/1 geometry), and every lower-level pixel is covered by 1 to 4
of those windows.

* Bottom-up: each higher-level feature queries the 16 lower-level slots in
  its window; the slots compete through a softmax and the winner mix is
  projected back and added residually.
* Top-down: each lower-level pixel queries the higher-level features whose
  windows cover it. The efficient implementation computes per-window
  exp-logits, fold-sums them across overlapping windows to build the
  per-pixel softmax denominators, and fold-sums the weighted values back
  onto the lower grid. ``top_down_attention_naive`` is the per-pixel
  reference oracle the efficient path is tested against.

Projections q/k/v map into d = min(d_hi, d_lo) with a single head; the
relative positional bias is a learned table with one entry per window
slot, shared across spatial locations. Padding taps carry zero keys and
values and are additionally excluded from the bottom-up softmax with a
large negative logit mask, so ghost slots never absorb probability mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autograd as ag
from . import tensor as tk
from .autograd import Node
from .errors import GeometryError, ShapeError
from .tensor import PatchGeometry, Tensor

NEG_MASK = -1e30


@dataclass
class InterLevelAttnParams:
    """Parameters of one inter-level attention layer.

    ``hi``/``lo`` name the level a field applies to, not its attention
    role: for the bottom-up direction the higher level is the query side,
    for the top-down direction the lower level is.
    """

    ln_hi_gamma: Node
    ln_hi_beta: Node
    ln_lo_gamma: Node
    ln_lo_beta: Node
    q_w: Node
    q_b: Node
    k_w: Node
    k_b: Node
    v_w: Node
    v_b: Node
    f_w: Node
    f_b: Node
    bias_table: Node


@dataclass
class MixFfnParams:
    ln_gamma: Node
    ln_beta: Node
    w1: Node
    b1: Node
    dw_w: Node
    dw_b: Node
    w2: Node
    b2: Node


@dataclass
class InterLevelWeights:
    """Per-location attention weights recorded for inspection and hierarchy
    composition. ``m[b, t, slot]`` is the weight between window ``t`` of the
    higher grid and the lower pixel under slot ``slot``; ghost slots are zero.
    ``stage`` is the higher level the record belongs to.
    """

    m: Tensor
    direction: str  # "bottom_up" | "top_down"
    geometry: PatchGeometry
    hi_grid: tuple[int, int]
    lo_grid: tuple[int, int]
    stage: int = 0


@lru_cache(maxsize=64)
def ghost_slot_mask(g: PatchGeometry, h_lo: int, w_lo: int) -> np.ndarray:
    """Boolean (Ht*Wt, slots) mask, True where a slot falls outside the grid."""
    ht, wt = g.out_grid(h_lo, w_lo)
    k, s, p = g.kernel, g.stride, g.padding
    rows = (np.arange(ht) * s - p)[:, None] + np.arange(k)[None, :]  # (ht, k)
    cols = (np.arange(wt) * s - p)[:, None] + np.arange(k)[None, :]
    row_ok = (rows >= 0) & (rows < h_lo)
    col_ok = (cols >= 0) & (cols < w_lo)
    ok = row_ok[:, None, :, None] & col_ok[None, :, None, :]  # (ht, wt, k, k)
    return ~ok.reshape(ht * wt, k * k)


def covering_windows(g: PatchGeometry, r: int, c: int, ht: int, wt: int):
    """Windows (i, j, slot) of the higher grid that contain lower pixel (r, c).

    Enumerated directly from the window arithmetic; intentionally
    independent of the unfold/fold machinery so it can serve as an oracle.
    """
    k, s, p = g.kernel, g.stride, g.padding
    out = []
    i_min = max(0, math.ceil((r + p - k + 1) / s))
    i_max = min(ht - 1, (r + p) // s)
    j_min = max(0, math.ceil((c + p - k + 1) / s))
    j_max = min(wt - 1, (c + p) // s)
    for i in range(i_min, i_max + 1):
        for j in range(j_min, j_max + 1):
            slot = (r - (s * i - p)) * k + (c - (s * j - p))
            out.append((i, j, slot))
    return out


def _check_geometry(x_hi_shape, x_lo_shape, g: PatchGeometry):
    _, hh, wh, _ = x_hi_shape
    _, hl, wl, _ = x_lo_shape
    ht, wt = g.out_grid(hl, wl)
    if (ht, wt) != (hh, wh):
        raise GeometryError(
            f"higher grid {hh}x{wh} does not match {ht}x{wt} derived from "
            f"lower grid {hl}x{wl} under {g}"
        )
    return ht, wt


def _check_projections(p: InterLevelAttnParams, d_query: int, d_attend: int):
    d = p.q_w.shape[1]
    if d != min(d_query, d_attend):
        raise ShapeError(
            f"projection dim {d} must equal min(d_hi, d_lo) = {min(d_query, d_attend)}"
        )
    if p.q_w.shape[0] != d_query or p.k_w.shape[0] != d_attend:
        raise ShapeError(
            f"projection shapes q{p.q_w.shape}/k{p.k_w.shape} do not match "
            f"feature dims {d_query}/{d_attend}"
        )
    return d


def _tokens(x: Node) -> Node:
    b, h, w, c = x.shape
    return ag.reshape(x, (b, h * w, c))


def _linear(x: Node, w: Node, b: Node, mac=None, tag: str | None = None) -> Node:
    out = ag.linear(x, w, b)
    if mac is not None and tag is not None:
        rows = int(np.prod(x.shape[:-1]))
        mac.add(tag, rows * x.shape[-1] * w.shape[1])
    return out


def bottom_up_attention(
    x_hi,
    x_lo,
    p: InterLevelAttnParams,
    g: PatchGeometry,
    mac=None,
):
    """Higher-level features attend over their window of lower-level slots.

    Returns the residually updated higher-level map and the weight record.
    """
    xh, xl = x_hi.data, x_lo.data
    b, hh, wh, dh = xh.shape
    _, hl, wl, dl = xl.shape
    _check_geometry(xh.shape, xl.shape, g)
    d = _check_projections(p, dh, dl)
    th = hh * wh
    kk = g.slots

    h_hi = ag.layer_norm(_tokens(xh), p.ln_hi_gamma, p.ln_hi_beta)
    h_lo = ag.layer_norm(_tokens(xl), p.ln_lo_gamma, p.ln_lo_beta)
    q = _linear(h_hi, p.q_w, p.q_b, mac, "interlevel_fc")
    k = _linear(h_lo, p.k_w, p.k_b, mac, "interlevel_fc")
    v = _linear(h_lo, p.v_w, p.v_b, mac, "interlevel_fc")

    k_pat = ag.unfold(ag.reshape(k, (b, hl, wl, d)), g)  # (B, Th, kk, d)
    v_pat = ag.unfold(ag.reshape(v, (b, hl, wl, d)), g)

    logits = ag.matmul(ag.reshape(q, (b, th, 1, d)), ag.transpose(k_pat, (0, 1, 3, 2)))
    if mac is not None:
        mac.add("interlevel_dot", b * th * kk * d)
    logits = ag.scale(logits, 1.0 / math.sqrt(d))
    logits = ag.add(logits, ag.reshape(p.bias_table, (1, 1, 1, kk)))
    ghosts = ghost_slot_mask(g, hl, wl)
    if ghosts.any():
        mask = np.where(ghosts, NEG_MASK, 0.0).astype(xh.array.dtype)
        logits = ag.add(logits, ag.constant(Tensor._wrap(mask.reshape(1, th, 1, kk))))

    weights = ag.softmax_lastdim(logits)  # (B, Th, 1, kk)
    ctx = ag.matmul(weights, v_pat)  # (B, Th, 1, d)
    if mac is not None:
        mac.add("interlevel_dot", b * th * kk * d)
    y = _linear(ag.reshape(ctx, (b, th, d)), p.f_w, p.f_b, mac, "interlevel_fc")
    out = ag.add(xh, ag.reshape(y, (b, hh, wh, dh)))

    record = InterLevelWeights(
        m=Tensor._wrap(weights.array.reshape(b, th, kk).copy()),
        direction="bottom_up",
        geometry=g,
        hi_grid=(hh, wh),
        lo_grid=(hl, wl),
        stage=x_hi.stage,
    )
    return replace(x_hi, data=out), record


def top_down_attention_naive(x_lo, x_hi, p: InterLevelAttnParams, g: PatchGeometry):
    """Per-pixel reference implementation of the top-down attention.

    Enumerates each lower pixel's covering windows and softmaxes over that
    set directly. Pure forward numpy; this is the oracle the efficient
    fold/unfold path is checked against.
    """
    xl = x_lo.data.array
    xh = x_hi.data.array
    b, hl, wl, dl = xl.shape
    _, hh, wh, dh = xh.shape
    ht, wt = _check_geometry(xh.shape, xl.shape, g)
    d = _check_projections(p, dl, dh)

    def lnorm(a, gamma, beta):
        out, _, _ = tk._layer_norm_np(a, gamma.array, beta.array, 1e-6)
        return out

    h_lo = lnorm(xl, p.ln_lo_gamma, p.ln_lo_beta)
    h_hi = lnorm(xh, p.ln_hi_gamma, p.ln_hi_beta)
    q = h_lo @ p.q_w.array + p.q_b.array  # (B, Hl, Wl, d)
    k = h_hi @ p.k_w.array + p.k_b.array  # (B, Hh, Wh, d)
    v = h_hi @ p.v_w.array + p.v_b.array
    bias = p.bias_table.array
    inv = 1.0 / math.sqrt(d)

    y = np.zeros((b, hl, wl, dl), dtype=xl.dtype)
    m_rec = np.zeros((b, ht * wt, g.slots), dtype=xl.dtype)
    for r in range(hl):
        for c in range(wl):
            covers = covering_windows(g, r, c, ht, wt)
            for bi in range(b):
                logits = np.array(
                    [q[bi, r, c] @ k[bi, i, j] * inv + bias[slot] for i, j, slot in covers],
                    dtype=np.float64,
                )
                w = np.exp(logits - logits.max())
                w = w / w.sum()
                ctx = np.zeros(d, dtype=np.float64)
                for wgt, (i, j, slot) in zip(w, covers):
                    ctx += wgt * v[bi, i, j].astype(np.float64)
                    m_rec[bi, i * wt + j, slot] = wgt
                y[bi, r, c] = (ctx.astype(xl.dtype) @ p.f_w.array) + p.f_b.array

    out = ag.constant(Tensor._wrap(xl + y))
    record = InterLevelWeights(
        m=Tensor._wrap(m_rec),
        direction="top_down",
        geometry=g,
        hi_grid=(hh, wh),
        lo_grid=(hl, wl),
        stage=x_hi.stage,
    )
    return replace(x_lo, data=out), record


def top_down_attention_efficient(
    x_lo,
    x_hi,
    p: InterLevelAttnParams,
    g: PatchGeometry,
    mac=None,
):
    """Fold/unfold implementation of the top-down attention.

    Mathematically identical to :func:`top_down_attention_naive`: per-window
    exp-logits are fold-summed across overlapping windows to obtain each
    pixel's softmax denominator, zero-coverage (padding ghost) denominators
    are guarded to one, and the weighted values are fold-summed back onto
    the lower grid, where ghost slots drop out by construction.
    """
    xl, xh = x_lo.data, x_hi.data
    b, hl, wl, dl = xl.shape
    _, hh, wh, dh = xh.shape
    ht, wt = _check_geometry(xh.shape, xl.shape, g)
    d = _check_projections(p, dl, dh)
    th = ht * wt
    kk = g.slots

    h_lo = ag.layer_norm(_tokens(xl), p.ln_lo_gamma, p.ln_lo_beta)
    h_hi = ag.layer_norm(_tokens(xh), p.ln_hi_gamma, p.ln_hi_beta)
    q = _linear(h_lo, p.q_w, p.q_b, mac, "interlevel_fc")
    k = _linear(h_hi, p.k_w, p.k_b, mac, "interlevel_fc")
    v = _linear(h_hi, p.v_w, p.v_b, mac, "interlevel_fc")

    q_pat = ag.unfold(ag.reshape(q, (b, hl, wl, d)), g)  # (B, Th, kk, d)
    logits = ag.matmul(q_pat, ag.reshape(k, (b, th, d, 1)))  # (B, Th, kk, 1)
    if mac is not None:
        mac.add("interlevel_dot", b * th * kk * d)
    logits = ag.scale(logits, 1.0 / math.sqrt(d))
    logits = ag.add(logits, ag.reshape(p.bias_table, (1, 1, kk, 1)))

    # Stabilize exp with a per-sample constant shift; every pixel's covering
    # set shifts together so the normalized weights are unchanged.
    shift = logits.array.max(axis=(1, 2, 3), keepdims=True)
    logits = ag.add(logits, ag.constant(Tensor._wrap(-shift)))
    e = ag.exp(logits)

    den_map = ag.fold(e, hl, wl, g)  # (B, Hl, Wl, 1)
    den_pat = ag.guard_nonzero(ag.unfold(den_map, g))  # (B, Th, kk, 1)
    m = ag.div(e, den_pat)

    out_pat = ag.matmul(m, ag.reshape(v, (b, th, 1, d)))  # (B, Th, kk, d)
    if mac is not None:
        mac.add("interlevel_dot", b * th * kk * d)
    y_map = ag.fold(out_pat, hl, wl, g)
    y = _linear(ag.reshape(y_map, (b, hl * wl, d)), p.f_w, p.f_b, mac, "interlevel_fc")
    out = ag.add(xl, ag.reshape(y, (b, hl, wl, dl)))

    m_rec = m.array.reshape(b, th, kk).copy()
    ghosts = ghost_slot_mask(g, hl, wl)
    m_rec[:, ghosts] = 0.0
    record = InterLevelWeights(
        m=Tensor._wrap(m_rec),
        direction="top_down",
        geometry=g,
        hi_grid=(hh, wh),
        lo_grid=(hl, wl),
        stage=x_hi.stage,
    )
    return replace(x_lo, data=out), record


def ffn_core(x: Node, p: MixFfnParams) -> Node:
    """LN -> expand MLP -> depthwise 3x3 conv -> GELU -> contract MLP."""
    b, h, w, c = x.shape
    t = ag.layer_norm(ag.reshape(x, (b, h * w, c)), p.ln_gamma, p.ln_beta)
    t = ag.linear(t, p.w1, p.b1)
    e = p.w1.shape[1]
    t = ag.reshape(t, (b, h, w, e))
    t = ag.conv2d(t, p.dw_w, p.dw_b, stride=1, padding=1, depthwise=True)
    t = ag.gelu(t)
    t = ag.linear(ag.reshape(t, (b, h * w, e)), p.w2, p.b2)
    return ag.reshape(t, (b, h, w, c))


def mix_ffn(x, p: MixFfnParams, alpha: float, beta: float):
    """Blend a feature map with its feed-forward refinement: a*x + b*FFN(x)."""
    if alpha < 0 or beta < 0:
        raise ShapeError("mix_ffn blend constants must be non-negative")
    y = ffn_core(x.data, p)
    out = ag.add(ag.scale(x.data, alpha), ag.scale(y, beta))
    return replace(x, data=out)


def bottom_up_update(x_hi, x_lo, params, self_attn_block, mac=None, collect=None):
    """Bottom-up attention, Mix-FFN blend, then the stage's own block."""
    x, rec = bottom_up_attention(x_hi, x_lo, params.attn_bu, params.geometry, mac=mac)
    if collect is not None:
        collect["bottom_up"] = rec
    x = mix_ffn(x, params.ffn_bu, params.alpha, params.beta)
    return self_attn_block(x)


def top_down_update(x_lo, x_hi, params, td_self_attn_block, mac=None, collect=None):
    """Top-down attention, Mix-FFN blend, then the dedicated lower block."""
    x, rec = top_down_attention_efficient(
        x_lo, x_hi, params.attn_td, params.geometry, mac=mac
    )
    if collect is not None:
        collect["top_down"] = rec
    x = mix_ffn(x, params.ffn_td, params.alpha, params.beta)
    out = td_self_attn_block(x)
    return replace(out, iteration=x_lo.iteration + 1)
