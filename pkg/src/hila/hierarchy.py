"""Whole-to-part attention hierarchies composed from top-down weights.

Each stage's top-down attention records how strongly every higher-level
location claims each lower-level pixel under its window. Chaining those
records multiplicatively (raw weights, summed over intermediate locations,
re-normalized once at the end) yields masks from a coarse source grid down
to any finer target grid. Rows are sparse by construction: an n-level mask
row is contained in a window of side 4, 10, 22, ... under the default
geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GeometryError
from .interlevel import InterLevelWeights
from .tensor import PatchGeometry, Tensor


@dataclass
class HierarchyMask:
    source_stage: int
    target_stage: int
    src_grid: tuple[int, int]
    tgt_grid: tuple[int, int]
    rows: list[dict[int, float]]
    normalized: bool = False
    geometry: PatchGeometry = PatchGeometry()

    def row_dense(self, index: int) -> np.ndarray:
        h, w = self.tgt_grid
        out = np.zeros(h * w, dtype=np.float64)
        for pix, val in self.rows[index].items():
            out[pix] = val
        return out

    def to_dense(self) -> np.ndarray:
        return np.stack([self.row_dense(i) for i in range(len(self.rows))])

    def normalized_copy(self) -> "HierarchyMask":
        rows = []
        for row in self.rows:
            total = sum(row.values())
            if total > 0:
                rows.append({pix: val / total for pix, val in row.items()})
            else:
                rows.append({})
        return HierarchyMask(
            self.source_stage, self.target_stage, self.src_grid, self.tgt_grid,
            rows, normalized=True, geometry=self.geometry,
        )


def mask_from_weights(weights: InterLevelWeights, source_stage: int) -> HierarchyMask:
    """One-level mask (stage -> stage-1) from a top-down weight record."""
    if weights.direction != "top_down":
        raise ContractError("hierarchy masks are built from top-down weights")
    g = weights.geometry
    ht, wt = weights.hi_grid
    hl, wl = weights.lo_grid
    m = weights.m.array[0]
    k, s, p = g.kernel, g.stride, g.padding
    rows: list[dict[int, float]] = []
    for i in range(ht):
        for j in range(wt):
            row: dict[int, float] = {}
            vals = m[i * wt + j]
            for slot in range(g.slots):
                r = s * i - p + slot // k
                c = s * j - p + slot % k
                if 0 <= r < hl and 0 <= c < wl and vals[slot] != 0.0:
                    row[r * wl + c] = float(vals[slot])
            rows.append(row)
    return HierarchyMask(source_stage, source_stage - 1, (ht, wt), (hl, wl), rows,
                         geometry=g)


def identity_mask(stage: int, h: int, w: int) -> HierarchyMask:
    rows = [{i: 1.0} for i in range(h * w)]
    return HierarchyMask(stage, stage, (h, w), (h, w), rows, normalized=True)


def compose(
    m_upper: InterLevelWeights,
    m_lower: HierarchyMask,
    normalize: bool = True,
) -> HierarchyMask:
    """Chain an upper top-down record onto a lower mask.

    The weighted sum runs over the intermediate locations; pass
    ``normalize=False`` when further composition will follow, and normalize
    once at the end.
    """
    if m_upper.stage and m_upper.stage != m_lower.source_stage + 1:
        raise ContractError(
            f"stages do not chain: upper record belongs to stage {m_upper.stage}, "
            f"lower mask starts at stage {m_lower.source_stage}"
        )
    upper = mask_from_weights(m_upper, m_lower.source_stage + 1)
    if upper.tgt_grid != m_lower.src_grid:
        raise ContractError(
            f"grids do not chain: upper targets {upper.tgt_grid}, "
            f"lower sources {m_lower.src_grid}"
        )
    rows: list[dict[int, float]] = []
    for urow in upper.rows:
        acc: dict[int, float] = {}
        for mid, uval in urow.items():
            for pix, lval in m_lower.rows[mid].items():
                acc[pix] = acc.get(pix, 0.0) + uval * lval
        rows.append(acc)
    out = HierarchyMask(
        upper.source_stage, m_lower.target_stage, upper.src_grid, m_lower.tgt_grid,
        rows, geometry=upper.geometry,
    )
    return out.normalized_copy() if normalize else out


def compose_chain(
    weights_by_stage: dict[int, InterLevelWeights],
    source_stage: int,
    levels: int,
) -> HierarchyMask:
    """Normalized mask spanning ``levels`` stages down from ``source_stage``."""
    if levels < 1:
        raise ContractError("need at least one level")
    for n in range(levels):
        stage = source_stage - n
        if stage not in weights_by_stage or weights_by_stage[stage] is None:
            raise ContractError(
                f"no top-down weights for stage {stage}; the composition "
                f"{source_stage}->{source_stage - levels} is undefined"
            )
    base = weights_by_stage[source_stage - levels + 1]
    mask = mask_from_weights(base, source_stage - levels + 1)
    for stage in range(source_stage - levels + 2, source_stage + 1):
        mask = compose(weights_by_stage[stage], mask, normalize=False)
    return mask.normalized_copy()


def save_mask(mask: HierarchyMask, path) -> None:
    """Export the dense row matrix in the binary tensor format."""
    from .tensor import write_tensor

    write_tensor(path, Tensor(mask.to_dense(), dtype="float64"))


def receptive_window(source_stage: int, target_stage: int, g: PatchGeometry) -> int:
    """Window side on the target grid reachable from one source location.

    One level is the window itself; each further level grows it by
    ``w <- kernel + stride*(w - 1)``.
    """
    if source_stage <= target_stage:
        raise ContractError("source stage must be above target stage")
    side = g.kernel
    for _ in range(source_stage - target_stage - 1):
        side = g.kernel + g.stride * (side - 1)
    return side


def window_origin(
    source_stage: int, target_stage: int, g: PatchGeometry, loc: tuple[int, int]
) -> tuple[int, int]:
    """Top-left corner (may be negative) of the receptive window on the target grid."""
    r, c = loc
    for _ in range(source_stage - target_stage):
        r = g.stride * r - g.padding
        c = g.stride * c - g.padding
    return r, c


def render_mask(
    mask: HierarchyMask,
    query_loc: tuple[int, int],
    base_image: Tensor,
    alpha: float = 0.6,
) -> Tensor:
    """Overlay one query row on a grayscale copy of the base image.

    The row is reshaped to the target grid, max-normalized, block-upsampled
    to image resolution and blended in red; the analytic receptive window
    is drawn as a red rectangle.
    """
    hs, ws = mask.src_grid
    qh, qw = query_loc
    if not (0 <= qh < hs and 0 <= qw < ws):
        raise ContractError(f"query {query_loc} outside source grid {hs}x{ws}")
    img = base_image.array
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"base image must be (H,W,3), got {img.shape}")
    ih, iw = img.shape[:2]
    th, tw = mask.tgt_grid
    if ih % th or iw % tw:
        raise GeometryError(
            f"image {ih}x{iw} is not an integer multiple of target grid {th}x{tw}"
        )
    cell_h, cell_w = ih // th, iw // tw

    row = mask.row_dense(qh * ws + qw).reshape(th, tw)
    peak = row.max()
    if peak > 0:
        row = row / peak
    heat = np.kron(row, np.ones((cell_h, cell_w)))[:, :, None]

    # Blend in float64 so an alpha of zero returns the base bit-for-bit.
    gray = img.astype(np.float64).mean(axis=2, keepdims=True)
    canvas = np.repeat(gray, 3, axis=2)
    red = np.array([1.0, 0.0, 0.0])
    out = canvas * (1.0 - alpha * heat) + red * (alpha * heat)

    if alpha > 0:
        r0, c0 = window_origin(
            mask.source_stage, mask.target_stage, mask.geometry, (qh, qw)
        )
        side = receptive_window(mask.source_stage, mask.target_stage, mask.geometry)
        top = max(r0, 0) * cell_h
        left = max(c0, 0) * cell_w
        bottom = min(r0 + side, th) * cell_h - 1
        right = min(c0 + side, tw) * cell_w - 1
        if bottom >= top and right >= left:
            out[top, left : right + 1] = red
            out[bottom, left : right + 1] = red
            out[top : bottom + 1, left] = red
            out[top : bottom + 1, right] = red
    return Tensor._wrap(np.clip(out, 0.0, 1.0).astype(np.float32))
