"""Downstream segmentation: soft Jaccard loss, training, IoU reporting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .checkpoint import Checkpoint
from .data import AugmentSettings, augment
from .rng import stream
from .unet import UNet

log = logging.getLogger(__name__)

JACCARD_EPS = 1e-7
DEFAULT_SEEDS = (0, 1234, 3741)


def one_hot(labels: np.ndarray, num_classes: int, ignore_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W) ids -> (N, C, H, W) one-hot and (N, H, W) validity mask."""
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    ids = labels[valid]
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        bad = ids[(ids < 0) | (ids >= num_classes)][0]
        raise ValueError(f"label id {bad} outside [0, {num_classes})")
    safe = np.where(valid, labels, 0)
    onehot = (safe[:, None] == np.arange(num_classes)[None, :, None, None]) & valid[:, None]
    return onehot, valid


def jaccard_loss(scores: Tensor, labels: np.ndarray, ignore_index: int | None = None, eps: float = JACCARD_EPS) -> Tensor:
    """1 - mean over classes of the soft IoU between softmax(scores) and one-hot labels."""
    scores = ad.as_tensor(scores)
    n, c, h, w = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match scores {scores.shape}")
    onehot, valid = one_hot(labels, c, ignore_index)
    t = Tensor(onehot.astype(scores.dtype))
    probs = ad.softmax(scores, axis=1)
    if ignore_index is not None:
        probs = probs * Tensor(np.broadcast_to(valid[:, None], scores.shape).astype(scores.dtype))
    axes = (0, 2, 3)
    inter = (probs * t).sum(axis=axes)
    psum = probs.sum(axis=axes)
    tsum = Tensor(onehot.sum(axis=axes).astype(scores.dtype))
    jac = (inter + eps) / (psum + tsum - inter + eps)
    return 1.0 - jac.mean()


@dataclass
class SegReport:
    class_names: list[str]
    intersection: np.ndarray
    union: np.ndarray
    iou: np.ndarray
    miou: float
    miou_foreground: float
    seed: int | None = None
    runs: int = 1

    @classmethod
    def from_counts(cls, intersection, union, class_names=None, seed=None) -> "SegReport":
        inter = np.asarray(intersection, dtype=np.int64)
        uni = np.asarray(union, dtype=np.int64)
        names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(inter.size)]
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(uni > 0, inter / np.maximum(uni, 1), np.nan)
        return cls(names, inter, uni, iou, _nanmean(iou), _nanmean(iou[1:]), seed)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_csv(self) -> str:
        lines = ["class_id,class_name,intersection,union,iou"]
        for i, name in enumerate(self.class_names):
            lines.append(f"{i},{name},{self.intersection[i]:.10g},{self.union[i]:.10g},{self.iou[i]:.10g}")
        lines.append(
            f"# summary miou={self.miou:.10g} miou_foreground={self.miou_foreground:.10g} "
            f"seed={'none' if self.seed is None else self.seed} runs={self.runs}"
        )
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "SegReport":
        names, inter, uni, iou, summary = [], [], [], [], {}
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("class_id"):
                continue
            if line.startswith("# summary"):
                for tok in line.split()[2:]:
                    k, _, v = tok.partition("=")
                    summary[k] = v
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}: malformed report row {line!r}")
            names.append(parts[1])
            inter.append(float(parts[2]))
            uni.append(float(parts[3]))
            iou.append(float(parts[4]))
        if "miou" not in summary:
            raise ValueError(f"{path}: report has no summary line")
        seed = summary.get("seed", "none")
        return cls(names, np.array(inter), np.array(uni), np.array(iou), float(summary["miou"]),
                   float(summary.get("miou_foreground", "nan")), None if seed == "none" else int(seed),
                   int(summary.get("runs", 1)))


def _nanmean(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x[~np.isnan(x)])) if np.any(~np.isnan(x)) else float("nan")


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int, ignore_index: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds, labels = np.asarray(preds).reshape(-1), np.asarray(labels).reshape(-1)
    keep = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    idx = labels[keep].astype(np.int64) * num_classes + preds[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def report_from_predictions(preds, labels, num_classes: int, ignore_index=None, class_names=None, seed=None) -> SegReport:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, labels):  # fixed accumulation order
        conf += confusion_matrix(p, t, num_classes, ignore_index)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    return SegReport.from_counts(tp, union, class_names, seed)


def predict(model: UNet, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    preds = []
    for start in range(0, len(images), batch_size):
        batch = np.stack(images[start:start + batch_size]).transpose(0, 3, 1, 2).astype(model.dtype)
        scores = model.forward(batch, record_gradients=False).data
        preds.extend(scores.argmax(axis=1))
    return preds


def iou_report(model: UNet, images, labels, num_classes: int | None = None, ignore_index=None,
               class_names=None, seed=None, batch_size: int = 8) -> SegReport:
    if not len(images):
        raise ValueError("evaluation set is empty")
    c = model.config.out_channels if num_classes is None else num_classes
    return report_from_predictions(predict(model, list(images), batch_size), labels, c, ignore_index, class_names, seed)


def lowest_k(report: SegReport, k: int) -> list[int]:
    """Classes with the smallest defined IoU, ascending; ties by class id."""
    defined = [i for i in range(report.num_classes) if not np.isnan(report.iou[i])]
    if k > len(defined):
        raise ValueError(f"k={k} exceeds the {len(defined)} classes with a defined IoU")
    return sorted(defined, key=lambda i: (report.iou[i], i))[:k]


def compare_runs(reports: Sequence[SegReport]) -> SegReport:
    """Per-class IoU and mIoU averaged across runs."""
    if not reports:
        raise ValueError("no reports to average")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise ValueError(f"class sets differ: {r.class_names} vs {names}")
    ious = np.stack([r.iou for r in reports])
    with np.errstate(invalid="ignore"):
        valid = ~np.isnan(ious)
        iou = np.where(valid.any(axis=0), np.nansum(ious, axis=0) / np.maximum(valid.sum(axis=0), 1), np.nan)
    return SegReport(
        list(names),
        np.mean([r.intersection for r in reports], axis=0),
        np.mean([r.union for r in reports], axis=0),
        iou,
        float(np.mean([r.miou for r in reports])),
        float(np.mean([r.miou_foreground for r in reports])),
        None,
        sum(r.runs for r in reports),
    )


@dataclass
class DownstreamConfig:
    epochs: int = 500
    batch_size: int = 8
    crop_size: int | None = None
    hflip_prob: float = 0.5
    jitter: tuple[float, float] = (0.8, 1.2)
    lr: float = 1e-3
    ignore_index: int | None = None

    def augment_settings(self) -> AugmentSettings:
        j = tuple(self.jitter)
        return AugmentSettings(self.hflip_prob, self.crop_size, j, j, j)


@dataclass
class DownstreamHistory:
    train_loss: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def train_downstream(
    init: UNet,
    train_images: Sequence[np.ndarray],
    train_labels: Sequence[np.ndarray],
    val_images: Sequence[np.ndarray] = (),
    val_labels: Sequence[np.ndarray] = (),
    config: DownstreamConfig | None = None,
    seed: int = 0,
) -> tuple[Checkpoint, DownstreamHistory]:
    """Train with the Jaccard loss; keeps the weights with the best validation mIoU."""
    config = config or DownstreamConfig()
    if init.config.head != "segmentation":
        raise ValueError("downstream training needs a segmentation head")
    n = len(train_images)
    if config.epochs and config.batch_size > n:
        raise ValueError(f"batch size {config.batch_size} exceeds the {n} training images")
    model = init
    opt = Adam(model.parameters(), lr=config.lr)
    settings = config.augment_settings()
    history = DownstreamHistory()
    best = Checkpoint.from_model(model, epoch=0, seed=seed)
    best_miou = -np.inf
    for epoch in range(config.epochs):
        rng = stream(seed, "downstream", epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            pairs = [augment(train_images[i], train_labels[i], settings, rng) for i in order[start:start + config.batch_size]]
            x = np.stack([p[0] for p in pairs]).transpose(0, 3, 1, 2).astype(model.dtype)
            y = np.stack([p[1] for p in pairs])
            loss = jaccard_loss(model(x), y, config.ignore_index)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite Jaccard loss {value} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(pairs)
        history.train_loss.append(total / n)
        if len(val_images):
            miou = iou_report(model, val_images, val_labels, ignore_index=config.ignore_index).miou
            history.val_miou.append(miou)
            if miou > best_miou:
                best_miou, history.best_epoch = miou, epoch
                best = Checkpoint.from_model(model, epoch=epoch + 1, seed=seed, val_miou=f"{miou:.6f}")
        else:
            best = Checkpoint.from_model(model, epoch=epoch + 1, seed=seed)
            history.best_epoch = epoch
    return best, history
