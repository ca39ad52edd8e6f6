"""The hierarchical encoder: patch merging, spatial-reduction attention
blocks, inter-level update scheduling across stages, and the decode head.

A model is four stages at the 1/4, 1/8, 1/16, 1/32 resolution ladder. Each
stage starts with an overlapping strided-conv patch merge and runs N
transformer blocks. Stages with inter-level updates enabled wrap every
``s_stride``-th block: the wrapped block runs a top-down update of the
previous stage's map (skipped for the first wrapped block of the stage,
right after patch merging) followed by a bottom-up update whose
self-attention IS that block. All wrap-added parameters are shared across
iterations within a stage, so the added parameter count is independent of
depth. Each stage's returned lower-level map replaces the stored one, so
the decode head sees features after all downstream top-down refinement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import interlevel as il
from . import rng as hrng
from .autograd import Node
from .errors import ConfigError, ShapeError
from .interlevel import InterLevelAttnParams, MixFfnParams
from .tensor import PatchGeometry, Tensor


# --- configuration ---------------------------------------------------------

_STAGE_FIELDS = {
    "K": "K", "S": "S", "d": "d", "N": "N", "H": "H", "E": "E", "R": "R",
    "hila": "hila_enabled", "alpha": "alpha", "beta": "beta",
    "s_stride": "s_stride", "p_patch": "p_patch",
}


@dataclass
class StageConfig:
    K: int
    S: int
    d: int
    N: int
    H: int
    E: int
    R: int
    hila_enabled: bool = False
    alpha: float = 0.5
    beta: float = 0.5
    s_stride: int = 1
    p_patch: int = 4

    def validate(self, index: int) -> None:
        for name in ("K", "S", "d", "N", "H", "E", "R", "s_stride", "p_patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage {index}: {name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"stage {index}: alpha/beta must be non-negative")
        if self.p_patch % 2 != 0:
            raise ConfigError(f"stage {index}: p_patch must be even, got {self.p_patch}")
        if self.hila_enabled and index < 2:
            raise ConfigError("inter-level updates need a previous stage (index >= 2)")
        if self.d % self.H != 0:
            raise ConfigError(
                f"stage {index}: dim {self.d} not divisible by {self.H} heads"
            )


@dataclass
class ModelConfig:
    stages: list[StageConfig]
    num_classes: int
    decode_dim: int = 64
    input_channels: int = 3

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"expected exactly 4 stages, got {len(self.stages)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.stages[0].S != 4 or any(s.S != 2 for s in self.stages[1:]):
            raise ConfigError("stage strides must follow the 1/4,1/8,1/16,1/32 ladder")
        for i, s in enumerate(self.stages, start=1):
            s.validate(i)

    def to_json(self) -> str:
        stages = []
        for s in self.stages:
            stages.append({key: getattr(s, attr) for key, attr in _STAGE_FIELDS.items()})
        doc = {
            "num_classes": self.num_classes,
            "decode_dim": self.decode_dim,
            "input_channels": self.input_channels,
            "stages": stages,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        doc = json.loads(text)
        known = {"num_classes", "decode_dim", "input_channels", "stages"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        stages = []
        for i, sdoc in enumerate(doc.get("stages", []), start=1):
            bad = set(sdoc) - set(_STAGE_FIELDS)
            if bad:
                raise ConfigError(f"stage {i}: unknown fields {sorted(bad)}")
            missing = set(_STAGE_FIELDS) - set(sdoc)
            if missing:
                raise ConfigError(f"stage {i}: missing fields {sorted(missing)}")
            stages.append(StageConfig(**{_STAGE_FIELDS[k]: v for k, v in sdoc.items()}))
        cfg = cls(
            stages=stages,
            num_classes=doc.get("num_classes", 0),
            decode_dim=doc.get("decode_dim", 64),
            input_channels=doc.get("input_channels", 3),
        )
        cfg.validate()
        return cfg


def tiny_config(num_classes: int = 4, hila: bool = True) -> ModelConfig:
    """Desk-scale default: runs the full check suite in seconds."""
    dims = (16, 32, 64, 128)
    heads = (1, 1, 2, 4)
    reductions = (4, 2, 1, 1)
    stages = []
    for i in range(4):
        stages.append(
            StageConfig(
                K=7 if i == 0 else 3,
                S=4 if i == 0 else 2,
                d=dims[i],
                N=2,
                H=heads[i],
                E=4,
                R=reductions[i],
                hila_enabled=hila and i >= 1,
            )
        )
    cfg = ModelConfig(stages=stages, num_classes=num_classes, decode_dim=64)
    cfg.validate()
    return cfg


@dataclass
class FeatureMap:
    """A stage's feature tensor (B, H, W, d) plus bookkeeping counters."""

    data: Node
    stage: int
    iteration: int = 0

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


# --- parameters ------------------------------------------------------------


@dataclass
class MergeParams:
    w: Node
    b: Node
    ln_gamma: Node
    ln_beta: Node


@dataclass
class SraBlockParams:
    ln1_gamma: Node
    ln1_beta: Node
    q_w: Node
    q_b: Node
    k_w: Node
    k_b: Node
    v_w: Node
    v_b: Node
    o_w: Node
    o_b: Node
    sr_w: Node | None
    sr_b: Node | None
    sr_ln_gamma: Node | None
    sr_ln_beta: Node | None
    ffn: MixFfnParams


@dataclass
class StageParams:
    merge: MergeParams
    blocks: list[SraBlockParams]


@dataclass
class HilaStageParams:
    attn_bu: InterLevelAttnParams
    ffn_bu: MixFfnParams
    attn_td: InterLevelAttnParams
    ffn_td: MixFfnParams
    td_block: SraBlockParams
    geometry: PatchGeometry
    alpha: float
    beta: float
    # The top-down block reuses the previous stage's block design.
    td_block_heads: int = 1
    td_block_reduction: int = 1


@dataclass
class DecodeParams:
    proj_w: list[Node]
    proj_b: list[Node]
    fuse_w: Node
    fuse_b: Node
    cls_w: Node
    cls_b: Node


class ParamFactory:
    """Creates named parameters in a deterministic order."""

    def __init__(self, seed: int):
        self.rng = hrng.Stream(hrng.derive_seed(seed, 0))
        self.store: dict[str, Node] = {}

    def _register(self, name: str, arr: np.ndarray) -> Node:
        if name in self.store:
            raise ConfigError(f"duplicate parameter name {name}")
        node = ag.parameter(Tensor._wrap(arr.astype(np.float32)))
        self.store[name] = node
        return node

    def proj(self, name: str, shape) -> Node:
        return self._register(name, self.rng.trunc_normal(shape, std=0.02))

    def zeros(self, name: str, shape) -> Node:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Node:
        return self._register(name, np.ones(shape))

    def linear(self, prefix: str, d_in: int, d_out: int) -> tuple[Node, Node]:
        return self.proj(f"{prefix}.w", (d_in, d_out)), self.zeros(f"{prefix}.b", (d_out,))

    def norm(self, prefix: str, d: int) -> tuple[Node, Node]:
        return self.ones(f"{prefix}.gamma", (d,)), self.zeros(f"{prefix}.beta", (d,))

    def mix_ffn(self, prefix: str, d: int, expansion: int) -> MixFfnParams:
        e = d * expansion
        g, bndt = self.norm(f"{prefix}.ln", d)
        w1, b1 = self.linear(f"{prefix}.mlp1", d, e)
        dw = self.proj(f"{prefix}.dw.w", (3, 3, 1, e))
        dwb = self.zeros(f"{prefix}.dw.b", (e,))
        w2, b2 = self.linear(f"{prefix}.mlp2", e, d)
        return MixFfnParams(g, bndt, w1, b1, dw, dwb, w2, b2)

    def sra_block(self, prefix: str, d: int, reduction: int, expansion: int) -> SraBlockParams:
        g1, b1 = self.norm(f"{prefix}.ln1", d)
        q_w, q_b = self.linear(f"{prefix}.q", d, d)
        k_w, k_b = self.linear(f"{prefix}.k", d, d)
        v_w, v_b = self.linear(f"{prefix}.v", d, d)
        o_w, o_b = self.linear(f"{prefix}.o", d, d)
        sr_w = sr_b = sr_g = sr_be = None
        if reduction > 1:
            sr_w = self.proj(f"{prefix}.sr.w", (reduction, reduction, d, d))
            sr_b = self.zeros(f"{prefix}.sr.b", (d,))
            sr_g, sr_be = self.norm(f"{prefix}.sr.ln", d)
        ffn = self.mix_ffn(f"{prefix}.ffn", d, expansion)
        return SraBlockParams(
            g1, b1, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, sr_w, sr_b, sr_g, sr_be, ffn
        )

    def interlevel_attn(
        self, prefix: str, d_query: int, d_attend: int, query_is_hi: bool, slots: int
    ) -> InterLevelAttnParams:
        d = min(d_query, d_attend)
        # hi/lo naming: the bottom-up layer queries the higher level, the
        # top-down layer queries the lower level; the output projection maps
        # back to the query (updated) side.
        d_hi, d_lo = (d_query, d_attend) if query_is_hi else (d_attend, d_query)
        ln_hi = self.norm(f"{prefix}.ln_hi", d_hi)
        ln_lo = self.norm(f"{prefix}.ln_lo", d_lo)
        d_out = d_query
        q_w, q_b = self.linear(f"{prefix}.q", d_query, d)
        k_w, k_b = self.linear(f"{prefix}.k", d_attend, d)
        v_w, v_b = self.linear(f"{prefix}.v", d_attend, d)
        # Zero-init output projection: a freshly wrapped block starts as a
        # near-identity perturbation of the plain stage.
        f_w = self.zeros(f"{prefix}.f.w", (d, d_out))
        f_b = self.zeros(f"{prefix}.f.b", (d_out,))
        bias = self.zeros(f"{prefix}.bias_table", (slots,))
        return InterLevelAttnParams(
            ln_hi[0], ln_hi[1], ln_lo[0], ln_lo[1],
            q_w, q_b, k_w, k_b, v_w, v_b, f_w, f_b, bias,
        )


# --- forward ops -----------------------------------------------------------


def patch_merge(x: FeatureMap, p: MergeParams, cfg: StageConfig) -> FeatureMap:
    """Overlapping strided conv + layer norm; produces a stage's initial map."""
    data = ag.lift(x.data)
    out = ag.conv2d(data, p.w, p.b, stride=cfg.S, padding=cfg.K // 2)
    b, h, w, d = out.shape
    t = ag.layer_norm(ag.reshape(out, (b, h * w, d)), p.ln_gamma, p.ln_beta)
    return FeatureMap(ag.reshape(t, (b, h, w, d)), stage=x.stage + 1, iteration=0)


def sra_block(
    x: FeatureMap,
    p: SraBlockParams,
    heads: int,
    reduction: int,
    collect: dict | None = None,
) -> FeatureMap:
    """Pre-norm residual block: spatial-reduction attention + feed-forward."""
    data = ag.lift(x.data)
    b, h, w, d = data.shape
    if d % heads != 0:
        raise ConfigError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    t = h * w

    hx = ag.layer_norm(ag.reshape(data, (b, t, d)), p.ln1_gamma, p.ln1_beta)
    q = ag.linear(hx, p.q_w, p.q_b)

    if reduction > 1:
        kv_map = ag.reshape(hx, (b, h, w, d))
        pad_h = (-h) % reduction
        pad_w = (-w) % reduction
        if pad_h or pad_w:
            kv_map = ag.pad_bottom_right(kv_map, pad_h, pad_w)
        kv_map = ag.conv2d(kv_map, p.sr_w, p.sr_b, stride=reduction, padding=0)
        rb, rh, rw, _ = kv_map.shape
        kv = ag.layer_norm(ag.reshape(kv_map, (rb, rh * rw, d)), p.sr_ln_gamma, p.sr_ln_beta)
    else:
        kv = hx
    tr = kv.shape[1]
    k = ag.linear(kv, p.k_w, p.k_b)
    v = ag.linear(kv, p.v_w, p.v_b)

    def split_heads(n: Node, length: int) -> Node:
        return ag.transpose(ag.reshape(n, (b, length, heads, dh)), (0, 2, 1, 3))

    qh = split_heads(q, t)
    kh = split_heads(k, tr)
    vh = split_heads(v, tr)
    logits = ag.scale(ag.matmul(qh, ag.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ag.softmax_lastdim(logits)  # (B, heads, T, Tr)
    if collect is not None:
        collect["attn"] = Tensor._wrap(attn.array.copy())
    ctx = ag.matmul(attn, vh)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = ag.linear(ctx, p.o_w, p.o_b)
    data = ag.add(data, ag.reshape(out, (b, h, w, d)))

    data = ag.add(data, il.ffn_core(data, p.ffn))
    return FeatureMap(data, stage=x.stage, iteration=x.iteration + 1)


def wrapped_blocks(n: int, s_stride: int) -> list[int]:
    """Block indices (1-based) that receive inter-level updates."""
    return [i for i in range(1, n + 1) if i % s_stride == 0]


def run_stage(
    x_prev_final: FeatureMap,
    cfg: StageConfig,
    params: StageParams,
    hila: HilaStageParams | None,
    collect: dict | None = None,
    mac=None,
    trace: dict | None = None,
) -> tuple[FeatureMap, FeatureMap]:
    """Run one stage; returns its output and the updated previous-stage map."""
    x = patch_merge(x_prev_final, params.merge, cfg)
    lo = x_prev_final
    schedule = wrapped_blocks(cfg.N, cfg.s_stride) if (cfg.hila_enabled and hila) else []
    first_wrapped = schedule[0] if schedule else None
    if trace is not None:
        trace["wrapped"] = list(schedule)
        trace["top_down"] = []

    for i in range(1, cfg.N + 1):
        block = params.blocks[i - 1]

        def block_fn(fm, _p=block):
            return sra_block(fm, _p, cfg.H, cfg.R, collect=None)

        if i in schedule:
            if i != first_wrapped:
                def td_fn(fm):
                    return sra_block(
                        fm, hila.td_block, hila.td_block_heads, hila.td_block_reduction
                    )
                lo = il.top_down_update(lo, x, hila, td_fn, mac=mac, collect=collect)
                if trace is not None:
                    trace["top_down"].append(i)
            x = il.bottom_up_update(x, lo, hila, block_fn, mac=mac, collect=collect)
        else:
            x = block_fn(x)
    return x, lo


class Model:
    """A built encoder + decode head with a flat named parameter store."""

    def __init__(self, cfg: ModelConfig, store, stages, hila, decode):
        self.cfg = cfg
        self.store: dict[str, Node] = store
        self.stages: list[StageParams] = stages
        self.hila: dict[int, HilaStageParams] = hila
        self.decode: DecodeParams = decode

    def named_params(self) -> list[tuple[str, Node]]:
        return list(self.store.items())

    def param_count(self) -> int:
        return sum(n.value.size for n in self.store.values())

    def state(self) -> list[tuple[str, Tensor]]:
        return [(name, node.value) for name, node in self.store.items()]

    def load_state(self, tensors: dict[str, Tensor]) -> None:
        missing = set(self.store) - set(tensors)
        if missing:
            raise ConfigError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, node in self.store.items():
            t = tensors[name]
            if t.shape != node.shape:
                raise ConfigError(
                    f"parameter {name}: checkpoint shape {t.shape} != model {node.shape}"
                )
            node.value = t

    def cast(self, dtype: str) -> "Model":
        for node in self.store.values():
            node.value = node.value.astype(dtype)
        return self

    def forward_encoder(self, image, collect=None, mac=None, trace=None) -> list[FeatureMap]:
        return forward_encoder(self, image, collect=collect, mac=mac, trace=trace)

    def forward_logits(self, image, collect=None, mac=None) -> Node:
        feats = self.forward_encoder(image, collect=collect, mac=mac)
        return decode_head(feats, self.decode, self.cfg.num_classes)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    f = ParamFactory(seed)
    stages: list[StageParams] = []
    hila: dict[int, HilaStageParams] = {}
    in_ch = cfg.input_channels
    for idx, sc in enumerate(cfg.stages, start=1):
        prefix = f"stage{idx}"
        merge = MergeParams(
            f.proj(f"{prefix}.merge.w", (sc.K, sc.K, in_ch, sc.d)),
            f.zeros(f"{prefix}.merge.b", (sc.d,)),
            *f.norm(f"{prefix}.merge.ln", sc.d),
        )
        blocks = [
            f.sra_block(f"{prefix}.block{i}", sc.d, sc.R, sc.E) for i in range(1, sc.N + 1)
        ]
        stages.append(StageParams(merge, blocks))
        if sc.hila_enabled:
            prev = cfg.stages[idx - 2]
            geometry = PatchGeometry.for_patch(sc.p_patch)
            hp = HilaStageParams(
                attn_bu=f.interlevel_attn(
                    f"{prefix}.hila.bu", sc.d, prev.d, True, geometry.slots
                ),
                ffn_bu=f.mix_ffn(f"{prefix}.hila.bu_ffn", sc.d, sc.E),
                attn_td=f.interlevel_attn(
                    f"{prefix}.hila.td", prev.d, sc.d, False, geometry.slots
                ),
                ffn_td=f.mix_ffn(f"{prefix}.hila.td_ffn", prev.d, prev.E),
                td_block=f.sra_block(f"{prefix}.hila.td_block", prev.d, prev.R, prev.E),
                geometry=geometry,
                alpha=sc.alpha,
                beta=sc.beta,
            )
            hp.td_block_heads = prev.H
            hp.td_block_reduction = prev.R
            hila[idx] = hp
        in_ch = sc.d
    proj_w, proj_b = [], []
    for idx, sc in enumerate(cfg.stages, start=1):
        w, b = f.linear(f"decode.proj{idx}", sc.d, cfg.decode_dim)
        proj_w.append(w)
        proj_b.append(b)
    fuse_w, fuse_b = f.linear("decode.fuse", 4 * cfg.decode_dim, cfg.decode_dim)
    cls_w, cls_b = f.linear("decode.cls", cfg.decode_dim, cfg.num_classes)
    decode = DecodeParams(proj_w, proj_b, fuse_w, fuse_b, cls_w, cls_b)
    return Model(cfg, f.store, stages, hila, decode)


def forward_encoder(
    model: Model, image, collect=None, mac=None, trace=None
) -> list[FeatureMap]:
    """Run all four stages; features reflect downstream top-down refinement."""
    img = ag.lift(image if isinstance(image, (Node, Tensor)) else Tensor(image))
    if img.shape[1] % 32 or img.shape[2] % 32:
        raise ShapeError(
            f"input spatial dims must be divisible by 32, got {img.shape[1]}x{img.shape[2]}"
        )
    features: list[FeatureMap] = []
    prev = FeatureMap(img, stage=0, iteration=0)
    for idx, sc in enumerate(model.cfg.stages, start=1):
        stage_collect = None
        if collect is not None:
            stage_collect = collect.setdefault(idx, {})
        stage_trace = None
        if trace is not None:
            stage_trace = trace.setdefault(idx, {})
        x, lo = run_stage(
            prev,
            sc,
            model.stages[idx - 1],
            model.hila.get(idx),
            collect=stage_collect,
            mac=mac,
            trace=stage_trace,
        )
        if idx >= 2:
            features[idx - 2] = lo
        features.append(x)
        prev = x
    return features


def decode_head(features: list[FeatureMap], p: DecodeParams, num_classes: int) -> Node:
    """Per-stage linear -> resize to 1/4 scale -> concat -> fuse -> logits."""
    if len(features) != 4:
        raise ShapeError(f"decode head expects 4 stage features, got {len(features)}")
    th, tw = features[0].grid
    merged = []
    for i, fm in enumerate(features):
        data = ag.lift(fm.data)
        b, h, w, d = data.shape
        t = ag.linear(ag.reshape(data, (b, h * w, d)), p.proj_w[i], p.proj_b[i])
        t = ag.reshape(t, (b, h, w, p.proj_w[i].shape[1]))
        if (h, w) != (th, tw):
            t = ag.bilinear_resize(t, th, tw)
        merged.append(t)
    cat = ag.concat_lastdim(merged)
    b = cat.shape[0]
    flat = ag.reshape(cat, (b, th * tw, cat.shape[-1]))
    fused = ag.linear(flat, p.fuse_w, p.fuse_b)
    logits = ag.linear(fused, p.cls_w, p.cls_b)
    return ag.reshape(logits, (b, th, tw, num_classes))


def cross_entropy_loss(logits: Node, labels: np.ndarray, ignore_index: int = 255) -> Node:
    """Mean pixel cross-entropy over non-ignored pixels.

    Logits are bilinearly upsampled to the label resolution first when the
    spatial shapes differ. An all-ignored batch yields loss 0 with zero
    gradient.
    """
    logits = ag.lift(logits)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, lh, lw = labels.shape
    if logits.shape[0] != b:
        raise ShapeError(f"batch mismatch: logits {logits.shape}, labels {labels.shape}")
    c = logits.shape[-1]
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ShapeError(f"labels contain ids outside [0, {c}) and ignore_index")
    if logits.shape[1] != lh or logits.shape[2] != lw:
        logits = ag.bilinear_resize(logits, lh, lw)

    arr = logits.array
    shifted = arr - arr.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[..., None], axis=-1)[..., 0]
    if n_valid == 0:
        loss_val = np.asarray(0.0, dtype=arr.dtype)
    else:
        loss_val = np.asarray(-(picked * valid).sum() / n_valid, dtype=arr.dtype)

    def vjp(g):
        if n_valid == 0:
            return np.zeros_like(arr)
        p = np.exp(logp)
        onehot = np.zeros_like(arr)
        np.put_along_axis(onehot, safe_labels[..., None], 1.0, axis=-1)
        return g * (p - onehot) * valid[..., None] / n_valid

    return Node(Tensor._wrap(loss_val), ((logits, vjp),))


def predict_labels(model: Model, image, ignore_shape=None) -> np.ndarray:
    """Argmax class map at input resolution (no gradient tracking)."""
    logits = model.forward_logits(image)
    h, w = image.shape[1], image.shape[2]
    up = ag.bilinear_resize(logits, h, w)
    return np.argmax(up.array, axis=-1).astype(np.int32)
