"""Segmentation quality metrics and closed-form compute accounting.

Boundary extraction uses 4-connectivity class changes; matching runs
through an exact two-pass squared Euclidean distance transform, so the
scores coincide with a brute-force pairwise oracle. The threshold is
absolute pixels when given, otherwise relative (0.00088 of the image
diagonal, the convention behind the "3px" figure on 1024x2048 frames).

Multiply-accumulate counts follow the closed forms for the inter-level
attention layers: one MAC is one unit (products are counted, not 2x for
the add). ``MacCounter`` is the runtime instrumentation the closed forms
are audited against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

RELATIVE_THRESHOLD = 0.00088


class ConfusionAccumulator:
    """Mergeable per-class intersection / prediction / label counts."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.intersection = np.zeros(num_classes, dtype=np.int64)
        self.pred_count = np.zeros(num_classes, dtype=np.int64)
        self.label_count = np.zeros(num_classes, dtype=np.int64)

    @property
    def union(self) -> np.ndarray:
        return self.pred_count + self.label_count - self.intersection

    def update(self, pred: np.ndarray, label: np.ndarray) -> "ConfusionAccumulator":
        pred = np.asarray(pred)
        label = np.asarray(label)
        if pred.shape != label.shape:
            raise DataError(f"shape mismatch: pred {pred.shape}, label {label.shape}")
        valid = label != self.ignore_index
        p, l = pred[valid], label[valid]
        for name, arr in (("pred", p), ("label", l)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise DataError(
                    f"{name} ids outside [0, {self.num_classes}): "
                    f"[{arr.min()}, {arr.max()}]"
                )
        self.intersection += np.bincount(l[p == l], minlength=self.num_classes)
        self.pred_count += np.bincount(p, minlength=self.num_classes)
        self.label_count += np.bincount(l, minlength=self.num_classes)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge accumulators with different class counts")
        self.intersection += other.intersection
        self.pred_count += other.pred_count
        self.label_count += other.label_count
        return self

    def iou(self) -> tuple[np.ndarray, float]:
        """Per-class IoU (NaN for classes absent from pred and label) + mean."""
        union = self.union
        per_class = np.full(self.num_classes, np.nan)
        present = union > 0
        per_class[present] = self.intersection[present] / union[present]
        mean = float(np.nanmean(per_class)) if present.any() else float("nan")
        return per_class, mean

    def pixel_accuracy(self) -> float:
        total = int(self.label_count.sum())
        return float(self.intersection.sum() / total) if total else float("nan")


def miou(
    preds, labels, num_classes: int, ignore_index: int = 255
) -> tuple[np.ndarray, float]:
    acc = ConfusionAccumulator(num_classes, ignore_index)
    acc.update(np.asarray(preds), np.asarray(labels))
    return acc.iou()


# --- boundary F-scores -----------------------------------------------------


def _boundary_of(binary: np.ndarray) -> np.ndarray:
    """Pixels of the region whose 4-neighborhood leaves the region.

    Image borders do not count as boundaries by themselves.
    """
    b = np.zeros_like(binary, dtype=bool)
    b[:-1] |= binary[:-1] & ~binary[1:]
    b[1:] |= binary[1:] & ~binary[:-1]
    b[:, :-1] |= binary[:, :-1] & ~binary[:, 1:]
    b[:, 1:] |= binary[:, 1:] & ~binary[:, :-1]
    return b


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Lower envelope of parabolas: 1-d squared distance transform.

    Entries of ``f`` may be +inf (no point in that row yet); only finite
    parabolas enter the envelope.
    """
    n = f.shape[0]
    finite = np.flatnonzero(np.isfinite(f))
    if finite.size == 0:
        return f.copy()
    d = np.empty(n)
    v = np.zeros(finite.size, dtype=np.int64)
    z = np.empty(finite.size + 1)
    v[0] = finite[0]
    z[0], z[1] = -np.inf, np.inf
    k = 0
    for q in finite[1:]:
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def squared_edt(points: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest True pixel."""
    h, w = points.shape
    d = np.where(points, 0.0, np.inf)
    for r in range(h):
        d[r] = _edt_1d(d[r])
    for c in range(w):
        d[:, c] = _edt_1d(d[:, c])
    return d


def _resolve_threshold(shape, threshold_px) -> tuple[float, str]:
    if threshold_px is not None:
        return float(threshold_px), "absolute"
    h, w = shape
    return RELATIVE_THRESHOLD * float(np.hypot(h, w)), "relative"


def _match_fscore(pred_b: np.ndarray, gt_b: np.ndarray, thr: float) -> float:
    np_pred, np_gt = int(pred_b.sum()), int(gt_b.sum())
    if np_pred == 0 and np_gt == 0:
        return 1.0
    if np_pred == 0 or np_gt == 0:
        return 0.0
    thr_sq = thr * thr
    d_gt = squared_edt(gt_b)
    d_pred = squared_edt(pred_b)
    precision = float((d_gt[pred_b] <= thr_sq).mean())
    recall = float((d_pred[gt_b] <= thr_sq).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def boundary_fscore(
    pred,
    label,
    threshold_px: float | None = None,
    ignore_index: int = 255,
) -> tuple[dict[int, float], float]:
    """Per-class boundary F-measure and the mean over present classes."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise DataError(f"shape mismatch: pred {pred.shape}, label {label.shape}")
    thr, _ = _resolve_threshold(pred.shape, threshold_px)
    classes = sorted(
        set(np.unique(pred).tolist()) | set(np.unique(label).tolist())
    )
    per_class: dict[int, float] = {}
    for cls in classes:
        if cls == ignore_index:
            continue
        per_class[cls] = _match_fscore(
            _boundary_of(pred == cls), _boundary_of(label == cls), thr
        )
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def imagewise_boundaries(mask: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    """All class contours merged into one set: any 4-neighbor class change."""
    mask = np.asarray(mask)
    valid = mask != ignore_index
    b = np.zeros_like(mask, dtype=bool)
    diff_v = (mask[:-1] != mask[1:]) & valid[:-1] & valid[1:]
    b[:-1] |= diff_v
    b[1:] |= diff_v
    diff_h = (mask[:, :-1] != mask[:, 1:]) & valid[:, :-1] & valid[:, 1:]
    b[:, :-1] |= diff_h
    b[:, 1:] |= diff_h
    return b


def imagewise_fscore(
    pred, label, threshold_px: float | None = None, ignore_index: int = 255
) -> float:
    """F-measure over merged contours, isolating boundary quality from labels."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise DataError(f"shape mismatch: pred {pred.shape}, label {label.shape}")
    thr, _ = _resolve_threshold(pred.shape, threshold_px)
    return _match_fscore(
        imagewise_boundaries(pred, ignore_index),
        imagewise_boundaries(label, ignore_index),
        thr,
    )


def crop_eval(pred, label, crop_h: int, crop_w: int, metric):
    """Apply a metric to aligned center crops of both maps."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    h, w = pred.shape
    if crop_h > h or crop_w > w:
        raise ContractError(f"crop {crop_h}x{crop_w} exceeds image {h}x{w}")
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    sl = (slice(top, top + crop_h), slice(left, left + crop_w))
    return metric(pred[sl], label[sl])


# --- FLOP accounting -------------------------------------------------------


class MacCounter:
    """Tagged multiply-accumulate counter for runtime instrumentation."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, tag: str, n: int) -> None:
        self.counts[tag] = self.counts.get(tag, 0) + int(n)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))


@dataclass
class FlopsReport:
    """Per-component MAC counts with derived totals."""

    components: dict[str, int] = field(default_factory=dict)

    @property
    def fc_total(self) -> int:
        return sum(
            v for k, v in self.components.items()
            if k.endswith(("/q", "/k", "/v", "/f"))
        )

    @property
    def dot_total(self) -> int:
        return sum(v for k, v in self.components.items() if k.endswith("/dot"))

    @property
    def selfattn_total(self) -> int:
        return sum(v for k, v in self.components.items() if "selfattn" in k)

    @property
    def total(self) -> int:
        return sum(self.components.values())


def flops_interlevel(
    d_hi: int,
    d_lo: int,
    h_hi: int,
    w_hi: int,
    h_lo: int,
    w_lo: int,
    slots: int = 16,
) -> FlopsReport:
    """Closed-form MACs for one bottom-up plus one top-down attention.

    Four linear projections per direction (q, k, v and the final output
    projection), each counted at rows x d_in x d_out, plus the dot-product
    terms: 2 * slots * d per higher-level location and direction.
    """
    for v in (d_hi, d_lo, h_hi, w_hi, h_lo, w_lo):
        if v < 1:
            raise ContractError("flops_interlevel needs positive dimensions")
    d = min(d_hi, d_lo)
    hi = h_hi * w_hi
    lo = h_lo * w_lo
    comp = {
        "bottom_up/q": hi * d_hi * d,
        "bottom_up/k": lo * d_lo * d,
        "bottom_up/v": lo * d_lo * d,
        "bottom_up/f": hi * d * d_hi,
        "bottom_up/dot": 2 * slots * d * hi,
        "top_down/q": lo * d_lo * d,
        "top_down/k": hi * d_hi * d,
        "top_down/v": hi * d_hi * d,
        "top_down/f": lo * d * d_lo,
        "top_down/dot": 2 * slots * d * hi,
    }
    return FlopsReport(comp)


def flops_selfattention(h: int, w: int, d: int) -> int:
    """Closed-form MACs of full self-attention on an h*w token map."""
    hw = h * w
    return 4 * hw * d * d + 2 * d * hw * hw
