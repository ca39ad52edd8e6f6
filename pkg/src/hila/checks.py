"""Executable invariant suites behind ``hila check``.

Each suite exercises one family of contracts: oracle equivalence of the
two top-down implementations, attention-weight normalization, unfold/fold
adjointness, gradient correctness against central finite differences,
update scheduling and weight sharing, and the MAC-count audit of the
closed-form complexity formulas. ``run_all`` returns one result per suite;
the CLI turns them into a pass/fail table and an exit code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import hierarchy as hy
from . import interlevel as il
from . import metrics as mt
from . import rng as hrng
from . import tensor as tk
from .encoder import (
    FeatureMap,
    ModelConfig,
    ParamFactory,
    build_model,
    sra_block,
    wrapped_blocks,
)
from .tensor import PatchGeometry, Tensor


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def randomize_params(store: dict, seed: int, scale: float = 0.25) -> None:
    """Overwrite every parameter with non-degenerate random values.

    Norm scales stay near one; everything else (including zero-initialized
    output projections and bias tables) becomes generic, so gradient and
    oracle checks see no accidental zeros.
    """
    stream = hrng.Stream(hrng.derive_seed(seed, 77))
    for name, node in store.items():
        vals = stream.normal(node.shape) * scale
        if name.endswith(".gamma"):
            vals = 1.0 + 0.1 * vals
        node.value = Tensor._wrap(vals.astype(node.array.dtype))


def make_interlevel_params(
    d_query: int, d_attend: int, query_is_hi: bool, slots: int, seed: int,
    dtype: str = "float32",
) -> il.InterLevelAttnParams:
    f = ParamFactory(seed)
    p = f.interlevel_attn("chk", d_query, d_attend, query_is_hi, slots)
    randomize_params(f.store, seed)
    if dtype != "float32":
        for node in f.store.values():
            node.value = node.value.astype(dtype)
    return p


def _fmap(arr: np.ndarray, stage: int, dtype: str = "float32") -> FeatureMap:
    return FeatureMap(ag.constant(Tensor(arr, dtype=dtype)), stage=stage, iteration=0)


# --- suites -----------------------------------------------------------------


def check_oracle_equivalence(trials: int = 12, seed: int = 0,
                             tol32: float = 1e-5, tol64: float = 1e-10) -> CheckResult:
    t0 = time.time()
    stream = hrng.Stream(hrng.derive_seed(seed, 1))
    g = PatchGeometry()
    worst = {"float32": 0.0, "float64": 0.0}
    for trial in range(trials):
        hl = 2 * stream.integers(1, 5)
        wl = 2 * stream.integers(1, 7)
        dl = int(np.random.default_rng(trial).choice([4, 8]))
        dh = 2 * dl
        for dtype, tol in (("float32", tol32), ("float64", tol64)):
            p = make_interlevel_params(dl, dh, False, g.slots, seed + trial, dtype)
            xl = _fmap(stream.normal((2, hl, wl, dl)), 1, dtype)
            xh = _fmap(stream.normal((2, hl // 2, wl // 2, dh)), 2, dtype)
            eff, w_eff = il.top_down_attention_efficient(xl, xh, p, g)
            nai, w_nai = il.top_down_attention_naive(xl, xh, p, g)
            err = max(
                float(np.abs(eff.data.array - nai.data.array).max()),
                float(np.abs(w_eff.m.array - w_nai.m.array).max()),
            )
            worst[dtype] = max(worst[dtype], err)
            if err > tol:
                return CheckResult(
                    "oracle_equivalence", False,
                    f"trial {trial} {dtype}: |delta| {err:.2e} > {tol:.0e}",
                    time.time() - t0,
                )
    return CheckResult(
        "oracle_equivalence", True,
        f"{trials} trials, worst f32 {worst['float32']:.2e}, f64 {worst['float64']:.2e}",
        time.time() - t0,
    )


def check_normalization(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    t0 = time.time()
    stream = hrng.Stream(hrng.derive_seed(seed, 2))
    g = PatchGeometry()
    hl, wl, dl, dh = 8, 12, 4, 8
    xl = _fmap(stream.normal((1, hl, wl, dl)), 2)
    xh = _fmap(stream.normal((1, hl // 2, wl // 2, dh)), 3)

    p_bu = make_interlevel_params(dh, dl, True, g.slots, seed)
    _, w_bu = il.bottom_up_attention(xh, xl, p_bu, g)
    row_err = float(np.abs(w_bu.m.array.sum(-1) - 1.0).max())

    p_td = make_interlevel_params(dl, dh, False, g.slots, seed + 1)
    _, w_td = il.top_down_attention_efficient(xl, xh, p_td, g)
    folded = tk.fold(
        Tensor(np.ascontiguousarray(w_td.m.array[..., None])), hl, wl, g
    ).array
    fold_err = float(np.abs(folded - 1.0).max())

    # Two-level composition: rows normalized, support inside the closed form.
    xll = _fmap(stream.normal((1, 2 * hl, 2 * wl, 4)), 1)
    p_td1 = make_interlevel_params(4, dl, False, g.slots, seed + 2)
    _, w_td1 = il.top_down_attention_efficient(xll, xl, p_td1, g)
    mask = hy.compose(w_td, hy.mask_from_weights(w_td1, 2))
    sums = [sum(r.values()) for r in mask.rows]
    comp_err = float(np.abs(np.array(sums) - 1.0).max())
    side = hy.receptive_window(3, 1, g)
    support_ok = True
    th, twd = mask.src_grid
    tgt_h, tgt_w = mask.tgt_grid
    for t, row in enumerate(mask.rows):
        r0, c0 = hy.window_origin(3, 1, g, (t // twd, t % twd))
        for pix in row:
            r, c = pix // tgt_w, pix % tgt_w
            if not (r0 <= r < r0 + side and c0 <= c < c0 + side):
                support_ok = False
    ok = row_err < tol and fold_err < tol and comp_err < tol and support_ok
    return CheckResult(
        "normalization", ok,
        f"bottom-up rows {row_err:.1e}, top-down fold {fold_err:.1e}, "
        f"composed rows {comp_err:.1e}, support {'ok' if support_ok else 'VIOLATED'}",
        time.time() - t0,
    )


def check_adjointness(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    t0 = time.time()
    stream = hrng.Stream(hrng.derive_seed(seed, 3))
    g = PatchGeometry()
    worst = 0.0
    for h, w, c in ((4, 4, 1), (6, 8, 3), (2, 12, 2)):
        x = Tensor(stream.normal((2, h, w, c)), dtype="float32")
        pat = tk.unfold(x, g)
        y = Tensor(stream.normal(pat.shape), dtype="float32")
        ip1 = float((pat.array.astype(np.float64) * y.array).sum())
        ip2 = float(
            (x.array.astype(np.float64) * tk.fold(y, h, w, g).array).sum()
        )
        scale = max(abs(ip1), abs(ip2), 1.0)
        worst = max(worst, abs(ip1 - ip2) / scale)
    cov = tk.fold(tk.unfold(tk.ones((1, 4, 4, 1)), g), 4, 4, g).array[0, :, :, 0]
    cov_ok = np.array_equal(cov, [[1, 2, 2, 1], [2, 4, 4, 2], [2, 4, 4, 2], [1, 2, 2, 1]])
    ok = worst < tol and cov_ok
    return CheckResult(
        "adjointness", ok,
        f"inner-product mismatch {worst:.1e}, coverage {'ok' if cov_ok else 'wrong'}",
        time.time() - t0,
    )


def _fd_check(build, x0: Tensor, h: float = 1e-4) -> float:
    """Relative error between backward() and central differences at x0."""
    node = ag.parameter(x0)
    loss = build(node)
    grads = ag.backward(loss)
    analytic = grads.get(node)
    analytic = (
        np.zeros(x0.shape, dtype=np.float64) if analytic is None else analytic.array
    )

    def f(t: Tensor) -> float:
        return build(ag.constant(t)).item()

    numeric = ag.finite_diff_grad(f, x0, h).array
    return _rel_err(analytic, numeric)


def check_gradients(seed: int = 0, composed_tol: float = 1e-3,
                    op_tol: float = 1e-5) -> CheckResult:
    t0 = time.time()
    stream = hrng.Stream(hrng.derive_seed(seed, 4))
    g = PatchGeometry()

    def t64(shape):
        return Tensor(stream.normal(shape), dtype="float64")

    def frozen_wsum(fn, out_shape):
        # Constants must be drawn once: finite differencing re-evaluates the
        # closure and must see the same function every time.
        w = ag.constant(t64(out_shape))
        return lambda n: ag.sum_all(ag.mul(fn(n), w))

    mm_b = ag.constant(t64((2, 4, 5)))
    lin_w, lin_b = ag.constant(t64((4, 3))), ag.constant(t64((3,)))
    ln_g, ln_b = ag.constant(t64((4,))), ag.constant(t64((4,)))
    div_num = ag.constant(t64((3, 4)))
    div_off = ag.constant(Tensor(np.full((3, 4), 1.5), dtype="float64"))
    cv_w, cv_b = ag.constant(t64((3, 3, 2, 3))), ag.constant(t64((3,)))
    dw_w, dw_b = ag.constant(t64((3, 3, 1, 2))), ag.constant(t64((2,)))

    cases = {
        "matmul": ((2, 3, 4), frozen_wsum(lambda n: ag.matmul(n, mm_b), (2, 3, 5))),
        "linear": ((2, 5, 4), frozen_wsum(lambda n: ag.linear(n, lin_w, lin_b), (2, 5, 3))),
        "softmax": ((3, 6), frozen_wsum(ag.softmax_lastdim, (3, 6))),
        "layer_norm": ((3, 4), frozen_wsum(lambda n: ag.layer_norm(n, ln_g, ln_b), (3, 4))),
        "gelu": ((3, 4), frozen_wsum(ag.gelu, (3, 4))),
        "exp": ((3, 4), frozen_wsum(lambda n: ag.exp(ag.scale(n, 0.3)), (3, 4))),
        "div": ((3, 4), frozen_wsum(
            lambda n: ag.div(div_num, ag.add(ag.mul(n, n), div_off)), (3, 4))),
        "unfold": ((1, 4, 6, 2), frozen_wsum(lambda n: ag.unfold(n, g), (1, 6, 16, 2))),
        "fold": ((1, 4, 6, 2), frozen_wsum(
            lambda n: ag.fold(ag.unfold(n, g), 4, 6, g), (1, 4, 6, 2))),
        "bilinear": ((1, 3, 4, 2), frozen_wsum(
            lambda n: ag.bilinear_resize(n, 5, 7), (1, 5, 7, 2))),
        "conv2d": ((1, 5, 6, 2), frozen_wsum(
            lambda n: ag.conv2d(n, cv_w, cv_b, stride=2, padding=1), (1, 3, 3, 3))),
        "depthwise": ((1, 5, 5, 2), frozen_wsum(
            lambda n: ag.conv2d(n, dw_w, dw_b, stride=1, padding=1, depthwise=True),
            (1, 5, 5, 2))),
    }
    worst_name, worst = "", 0.0
    for name, (shape, build) in cases.items():
        err = _fd_check(build, t64(shape))
        if err > worst:
            worst_name, worst = name, err
        if err > op_tol:
            return CheckResult(
                "gradient", False, f"{name}: rel err {err:.2e} > {op_tol:.0e}",
                time.time() - t0,
            )

    # Composed: top-down update then bottom-up update with real blocks.
    f = ParamFactory(seed)
    dl, dh = 4, 8
    hp_attn_td = f.interlevel_attn("td", dl, dh, False, g.slots)
    hp_attn_bu = f.interlevel_attn("bu", dh, dl, True, g.slots)
    ffn_td = f.mix_ffn("ffn_td", dl, 2)
    ffn_bu = f.mix_ffn("ffn_bu", dh, 2)
    blk = f.sra_block("blk", dh, 1, 2)
    td_blk = f.sra_block("td_blk", dl, 1, 2)
    randomize_params(f.store, seed + 5)
    for node in f.store.values():
        node.value = node.value.astype("float64")

    x_hi0 = t64((1, 2, 2, dh))
    x_lo0 = t64((1, 4, 4, dl))
    w_out = Tensor(stream.normal((1, 2, 2, dh)), dtype="float64")

    def composed(n_lo):
        lo = FeatureMap(n_lo, stage=1, iteration=0)
        hi = FeatureMap(ag.constant(x_hi0), stage=2, iteration=1)
        lo2, _ = il.top_down_attention_efficient(lo, hi, hp_attn_td, g)
        lo2 = il.mix_ffn(lo2, ffn_td, 0.5, 0.5)
        lo2 = sra_block(lo2, td_blk, 1, 1)
        hi2, _ = il.bottom_up_attention(hi, lo2, hp_attn_bu, g)
        hi2 = il.mix_ffn(hi2, ffn_bu, 0.5, 0.5)
        hi2 = sra_block(hi2, blk, 1, 1)
        return ag.sum_all(ag.mul(hi2.data, ag.constant(w_out)))

    err_input = _fd_check(composed, x_lo0)
    sampled = ["td.q.w", "bu.v.w", "ffn_td.mlp1.w", "blk.o.w", "td.bias_table"]
    worst_p = 0.0
    for pname in sampled:
        node = f.store[pname]
        base = node.value

        def loss_with(t: Tensor) -> float:
            node.value = t
            try:
                return composed(ag.constant(x_lo0)).item()
            finally:
                node.value = base

        loss = composed(ag.constant(x_lo0))
        grads = ag.backward(loss)
        analytic = grads.get(node)
        analytic = (
            np.zeros(node.shape) if analytic is None else analytic.array
        )
        numeric = ag.finite_diff_grad(loss_with, base).array
        worst_p = max(worst_p, _rel_err(analytic, numeric))
    comp_err = max(err_input, worst_p)
    ok = comp_err < composed_tol
    return CheckResult(
        "gradient", ok,
        f"worst op {worst_name} {worst:.1e}; composed {comp_err:.1e} "
        f"(tol {composed_tol:.0e})",
        time.time() - t0,
    )


def check_schedule(seed: int = 0) -> CheckResult:
    t0 = time.time()
    details = []
    ok = True
    for n, s in ((2, 1), (4, 2), (6, 3), (5, 2), (3, 4)):
        got = wrapped_blocks(n, s)
        want = [i for i in range(1, n + 1) if i % s == 0]
        if got != want:
            ok = False
            details.append(f"N={n},s={s}: {got} != {want}")
    cfg = _tiny_for_checks(hila=True)
    cfg.stages[2].N = 6
    cfg.stages[2].s_stride = 3
    model = build_model(cfg, seed=seed)
    trace: dict = {}
    img = np.zeros((1, 32, 32, 3), dtype=np.float32)
    model.forward_encoder(img, trace=trace)
    st3 = trace[3]
    if st3["wrapped"] != [3, 6] or st3["top_down"] != [6]:
        ok = False
        details.append(f"stage3 trace {st3}")
    for idx in (2, 4):
        st = trace[idx]
        if st["top_down"] and st["top_down"][0] == st["wrapped"][0]:
            ok = False
            details.append(f"stage{idx} ran top-down on its first wrapped block")

    # Weight sharing: added parameters independent of N, equal to the formula.
    for n_blocks in (2, 6):
        cfg_on = _tiny_for_checks(hila=True)
        cfg_off = _tiny_for_checks(hila=False)
        for c in (cfg_on, cfg_off):
            c.stages[2].N = n_blocks
        got = build_model(cfg_on, 0).param_count() - build_model(cfg_off, 0).param_count()
        want = sum(
            hila_param_delta(cfg_on, idx)
            for idx, sc in enumerate(cfg_on.stages, start=1)
            if sc.hila_enabled
        )
        if got != want:
            ok = False
            details.append(f"N={n_blocks}: param delta {got} != formula {want}")
    return CheckResult(
        "schedule", ok, "; ".join(details) if details else
        "wrapped sets, first-block skip, and shared-parameter formula all hold",
        time.time() - t0,
    )


def check_flops_audit(cfg: ModelConfig, sizes=((32, 32), (64, 64)),
                      seed: int = 0) -> CheckResult:
    t0 = time.time()
    details = []
    ok = True
    model = build_model(cfg, seed=seed)
    for h, w in sizes:
        mac = mt.MacCounter()
        img = np.zeros((1, h, w, 3), dtype=np.float32)
        model.forward_encoder(img, mac=mac)
        want_fc, want_dot = interlevel_flops_for_config(cfg, h, w)
        got_fc = mac.total("interlevel_fc")
        got_dot = mac.total("interlevel_dot")
        if (got_fc, got_dot) != (want_fc, want_dot):
            ok = False
            details.append(
                f"{h}x{w}: fc {got_fc} vs {want_fc}, dot {got_dot} vs {want_dot}"
            )
    # Dot-product comparison against full self-attention on sample dims.
    for hh, ww, d in ((8, 8, 32), (16, 24, 64)):
        self_quadratic = 2 * d * (hh * ww) ** 2
        inter_dot = 2 * 16 * d * hh * ww
        if self_quadratic * 16 != inter_dot * hh * ww:
            ok = False
            details.append(f"reduction ratio broken at {hh}x{ww}x{d}")
    return CheckResult(
        "flops_audit", ok,
        "; ".join(details) if details else
        f"counter equals closed forms at {', '.join(f'{h}x{w}' for h, w in sizes)}; "
        "quadratic term reduces by HW/16",
        time.time() - t0,
    )


def _tiny_for_checks(hila: bool) -> ModelConfig:
    from .encoder import tiny_config

    return tiny_config(hila=hila)


# --- closed-form aggregation over a config -----------------------------------


def stage_grids(cfg: ModelConfig, h: int, w: int) -> list[tuple[int, int]]:
    grids = []
    cur_h, cur_w = h, w
    for sc in cfg.stages:
        cur_h //= sc.S
        cur_w //= sc.S
        grids.append((cur_h, cur_w))
    return grids


def _ffn_params(d: int, e: int) -> int:
    ed = d * e
    return 2 * d + (d * ed + ed) + (9 * ed + ed) + (ed * d + d)


def _block_params(d: int, r: int, e: int) -> int:
    p = 2 * d + 4 * (d * d + d)
    if r > 1:
        p += r * r * d * d + d + 2 * d
    return p + _ffn_params(d, e)


def _attn_params(d_query: int, d_attend: int, slots: int) -> int:
    d = min(d_query, d_attend)
    return (
        2 * d_query + 2 * d_attend
        + (d_query * d + d) + 2 * (d_attend * d + d)
        + (d * d_query + d_query) + slots
    )


def hila_param_delta(cfg: ModelConfig, stage_idx: int) -> int:
    """Hand-derived parameter count added by enabling updates at one stage."""
    sc = cfg.stages[stage_idx - 1]
    prev = cfg.stages[stage_idx - 2]
    slots = sc.p_patch * sc.p_patch
    return (
        _attn_params(sc.d, prev.d, slots)
        + _attn_params(prev.d, sc.d, slots)
        + _ffn_params(sc.d, sc.E)
        + _ffn_params(prev.d, prev.E)
        + _block_params(prev.d, prev.R, prev.E)
    )


def interlevel_flops_for_config(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    """Closed-form (fc, dot) MAC totals for one forward pass at batch 1."""
    grids = stage_grids(cfg, h, w)
    total_fc = total_dot = 0
    for idx, sc in enumerate(cfg.stages, start=1):
        if not sc.hila_enabled:
            continue
        hh, wh = grids[idx - 1]
        hl, wl = grids[idx - 2]
        prev = cfg.stages[idx - 2]
        report = mt.flops_interlevel(
            sc.d, prev.d, hh, wh, hl, wl, slots=sc.p_patch**2
        )
        n_bu = len(wrapped_blocks(sc.N, sc.s_stride))
        n_td = max(0, n_bu - 1)
        bu_fc = sum(v for k, v in report.components.items()
                    if k.startswith("bottom_up/") and not k.endswith("dot"))
        td_fc = sum(v for k, v in report.components.items()
                    if k.startswith("top_down/") and not k.endswith("dot"))
        total_fc += n_bu * bu_fc + n_td * td_fc
        total_dot += (
            n_bu * report.components["bottom_up/dot"]
            + n_td * report.components["top_down/dot"]
        )
    return total_fc, total_dot


def run_all(cfg: ModelConfig | None = None, seed: int = 0,
            float64: bool = False, trials: int = 12) -> list[CheckResult]:
    if cfg is None:
        cfg = _tiny_for_checks(hila=True)
    composed_tol = 1e-5 if float64 else 1e-3
    return [
        check_oracle_equivalence(trials=trials, seed=seed),
        check_normalization(seed=seed),
        check_adjointness(seed=seed),
        check_gradients(seed=seed, composed_tol=composed_tol),
        check_schedule(seed=seed),
        check_flops_audit(cfg, seed=seed),
    ]
