"""Toy-scale training and evaluation on the synthetic shapes corpus.

Training is deterministic under a fixed seed: batch sampling, crops, and
flips all draw from the documented generator. Augmentation is random
horizontal flips plus random square crops (the crop side must stay
divisible by 32). Evaluation runs single-scale at native resolution and
parallelizes across images through mergeable accumulators; the
``HILA_THREADS`` environment variable caps the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import metrics as mt
from . import rng as hrng
from .data import SegSample
from .encoder import Model, cross_entropy_loss
from .errors import ConfigError, TrainingDiverged
from .threads import single_thread_blas, worker_count


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    crop: int = 32
    weight_decay: float = 0.01
    ignore_index: int = 255
    log_every: int = 50
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("invalid steps/batch_size")
        if self.crop % 32 != 0:
            raise ConfigError(f"crop side must be divisible by 32, got {self.crop}")


@dataclass
class TrainResult:
    history: list[tuple[int, float]] = field(default_factory=list)
    final_loss: float = float("nan")


def _make_batch(samples, indices, crop, flips, offsets):
    imgs, labs = [], []
    for n, idx in enumerate(indices):
        s = samples[idx]
        img = s.image.array
        lab = s.labels
        top, left = offsets[n]
        img = img[top : top + crop, left : left + crop]
        lab = lab[top : top + crop, left : left + crop]
        if flips[n]:
            img = img[:, ::-1]
            lab = lab[:, ::-1]
        imgs.append(np.ascontiguousarray(img))
        labs.append(np.ascontiguousarray(lab))
    return np.stack(imgs), np.stack(labs)


def train(model: Model, samples: list[SegSample], tcfg: TrainConfig,
          log=None) -> TrainResult:
    tcfg.validate()
    if not samples:
        raise ConfigError("empty training set")
    with single_thread_blas():
        return _train_loop(model, samples, tcfg, log)


def _train_loop(model, samples, tcfg, log) -> TrainResult:
    state = ag.AdamWState(
        lr=tcfg.lr, total_steps=max(tcfg.steps, 1), weight_decay=tcfg.weight_decay
    )
    named = model.named_params()
    size = samples[0].image.shape[0]
    crop = min(tcfg.crop, size)
    stream = hrng.Stream(hrng.derive_seed(tcfg.seed, 9001))
    result = TrainResult()
    recent: list[float] = []
    for step in range(tcfg.steps):
        idx = stream.integers(0, len(samples), (tcfg.batch_size,))
        flips = stream.integers(0, 2, (tcfg.batch_size,))
        offsets = stream.integers(0, size - crop + 1, (tcfg.batch_size, 2))
        imgs, labs = _make_batch(samples, idx, crop, flips, offsets)
        logits = model.forward_logits(imgs)
        loss = cross_entropy_loss(logits, labs, tcfg.ignore_index)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"loss became {loss_val} at step {step}",
                diagnostics={
                    "step": step,
                    "lr": state.lr_now(),
                    "recent_losses": recent[-10:],
                    "param_norms": {
                        name: float(np.abs(node.array).max())
                        for name, node in named[:20]
                    },
                },
            )
        grads = ag.backward(loss)
        ag.adamw_step(named, {n: grads.get(nd) for n, nd in named}, state)
        recent.append(loss_val)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            result.history.append((step, loss_val))
            if log:
                log(f"step {step:5d}  loss {loss_val:.4f}  lr {state.lr_now():.2e}")
    result.final_loss = recent[-1] if recent else float("nan")
    return result


def predict(model: Model, image) -> np.ndarray:
    """Label map at input resolution from upsampled argmax logits."""
    arr = image.array if hasattr(image, "array") else np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    logits = model.forward_logits(arr)
    up = ag.bilinear_resize(logits, arr.shape[1], arr.shape[2])
    return np.argmax(up.array, axis=-1).astype(np.int32)[0]


def evaluate(
    model: Model,
    samples: list[SegSample],
    num_classes: int,
    threshold_px: float | None = 3.0,
    ignore_index: int = 255,
    crop_sizes: list[int] | None = None,
) -> dict:
    """mIoU, boundary F-scores, and pixel accuracy over a sample list."""

    def one(sample: SegSample):
        pred = predict(model, sample.image)
        acc = mt.ConfusionAccumulator(num_classes, ignore_index)
        acc.update(pred, sample.labels)
        _, bf = mt.boundary_fscore(pred, sample.labels, threshold_px, ignore_index)
        iw = mt.imagewise_fscore(pred, sample.labels, threshold_px, ignore_index)
        crops = {}
        for cs in crop_sizes or []:
            crops[cs] = mt.crop_eval(
                pred, sample.labels, cs, cs,
                lambda p, l: mt.miou(p, l, num_classes, ignore_index)[1],
            )
        return pred, acc, bf, iw, crops

    workers = worker_count()
    with single_thread_blas():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, samples))
        else:
            results = [one(s) for s in samples]

    total = mt.ConfusionAccumulator(num_classes, ignore_index)
    bfs, iws = [], []
    crop_acc: dict[int, list[float]] = {}
    for _, acc, bf, iw, crops in results:
        total.merge(acc)
        bfs.append(bf)
        iws.append(iw)
        for cs, val in crops.items():
            crop_acc.setdefault(cs, []).append(val)
    per_class, mean_iou = total.iou()
    report = {
        "miou": mean_iou,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "pixel_accuracy": total.pixel_accuracy(),
        "fscore_3px": float(np.nanmean(bfs)),
        "imagewise_fscore": float(np.nanmean(iws)),
        "threshold_mode": "absolute" if threshold_px is not None else "relative",
        "threshold_px": threshold_px if threshold_px is not None else mt.RELATIVE_THRESHOLD,
        "num_images": len(samples),
    }
    if crop_acc:
        report["crop_miou"] = {str(cs): float(np.nanmean(v)) for cs, v in crop_acc.items()}
    return report


def pixel_accuracy(model: Model, samples: list[SegSample], num_classes: int,
                   ignore_index: int = 255) -> float:
    total = mt.ConfusionAccumulator(num_classes, ignore_index)
    for s in samples:
        total.update(predict(model, s.image), s.labels)
    return total.pixel_accuracy()
