"""Iterative partitioned pretraining with random or selective masking.

Partition 0 is trained on randomly masked images.  Every later partition is
masked using the checkpoint from the partition before it, then training
continues from those weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import AugmentSettings, color_jitter, sample_geometry, sample_jitter
from .masking import apply_mask, random_mask, selective_mask_image
from .metrics import train_loss
from .patches import PatchGrid, PatchMask, make_grid
from .rng import stream
from .unet import UNet, UNetConfig, build_unet

log = logging.getLogger(__name__)

MODES = ("selective", "random")


@dataclass
class PretrainConfig:
    num_partitions: int = 10
    samples_per_image: int = 5
    mask_ratio: float = 0.5
    epochs_per_partition: int = 30
    batch_size: int = 8
    seed: int = 0
    masking_mode: str = "selective"
    target_patches: int = 64
    crop_size: int | None = 64
    hflip_prob: float = 0.5
    jitter: tuple[float, float] = (0.8, 1.2)
    fill: float = 0.0
    paired_samples: bool = True
    random_redraw: bool = True
    lr: float = 1e-3
    threads: int = 1
    model: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.masking_mode not in MODES:
            raise ValueError(f"masking_mode must be one of {MODES}")
        if self.masking_mode == "selective" and self.num_partitions < 2:
            raise ValueError("selective mode needs at least 2 partitions")
        if self.num_partitions < 1 or self.batch_size < 1 or self.epochs_per_partition < 0:
            raise ValueError("partitions and batch size must be positive, epochs non-negative")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        self.jitter = tuple(self.jitter)
        if isinstance(self.model, dict):
            self.model = UNetConfig(**self.model)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of every setting that influences the weights (worker count excluded)."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def augment_settings(self, align: tuple[int, int] = (1, 1)) -> AugmentSettings:
        return AugmentSettings(
            hflip_prob=self.hflip_prob,
            crop_size=self.crop_size,
            brightness=self.jitter,
            contrast=self.jitter,
            saturation=self.jitter,
            crop_align=align,
        )


@dataclass
class PartitionPlan:
    parts: list[list[str]]

    def __post_init__(self):
        flat = [i for p in self.parts for i in p]
        if len(flat) != len(set(flat)):
            raise ValueError("partitions overlap")

    def __len__(self) -> int:
        return len(self.parts)


def partition(ids: Sequence[str], n: int, rng: np.random.Generator) -> PartitionPlan:
    """Shuffle, then split into n contiguous chunks whose sizes differ by at most one."""
    if n < 1:
        raise ValueError("need at least one partition")
    if len(ids) < n:
        raise ValueError(f"{len(ids)} images cannot fill {n} partitions")
    order = rng.permutation(len(ids))
    return PartitionPlan([[ids[i] for i in chunk] for chunk in np.array_split(order, n)])


@dataclass
class TrainExample:
    image: np.ndarray
    # fixed H x W pixel mask; None draws a fresh random patch mask every epoch
    mask: np.ndarray | None = None


@dataclass
class StepReport:
    partition: int
    mode: str
    image_ids: list[str]
    loss_history: list[float] = field(default_factory=list)
    examples_processed: int = 0
    forward_passes: int = 0
    source_checkpoint: str = ""
    checkpoint: str = ""
    masks: dict[str, str] = field(default_factory=dict)
    grid: str = ""

    def write(self, out_dir: Path) -> None:
        head = {
            "partition": self.partition,
            "mode": self.mode,
            "images": len(self.image_ids),
            "epochs": len(self.loss_history),
            "examples_processed": self.examples_processed,
            "forward_passes": self.forward_passes,
            "source_checkpoint": self.source_checkpoint or "none",
            "checkpoint": self.checkpoint,
        }
        lines = [f"{k}={v}" for k, v in head.items()] + ["---", "epoch,mean_loss"]
        lines += [f"{i},{v:.9g}" for i, v in enumerate(self.loss_history)]
        (out_dir / f"partition_{self.partition:02d}_report.txt").write_text("\n".join(lines) + "\n")
        if self.masks:
            mlines = [f"source_checkpoint={self.source_checkpoint}", f"grid={self.grid}", "---", "image_id,mask_bits"]
            mlines += [f"{k},{v}" for k, v in self.masks.items()]
            (out_dir / f"partition_{self.partition:02d}_masks.txt").write_text("\n".join(mlines) + "\n")


def crop_patch_shape(config: PretrainConfig, image_shape: tuple[int, int]) -> tuple[int, int]:
    h, w = image_shape
    if config.crop_size is not None:
        h = w = config.crop_size
    g = make_grid(h, w, config.target_patches)
    return g.patch_h, g.patch_w


def full_grid(config: PretrainConfig, image_shape: tuple[int, int]) -> PatchGrid:
    """Grid over the whole image using the patch size the training crop implies."""
    ph, pw = crop_patch_shape(config, image_shape)
    h, w = image_shape
    if h % ph or w % pw:
        raise ValueError(f"image {h}x{w} is not a whole number of {ph}x{pw} patches")
    return PatchGrid(h // ph, w // pw, ph, pw)


def _prepare(ex: TrainExample, config: PretrainConfig, rng: np.random.Generator):
    align = (1, 1)
    if ex.mask is not None:
        align = crop_patch_shape(config, ex.image.shape[:2])
    settings = config.augment_settings(align)
    geo = sample_geometry(ex.image.shape[:2], settings, rng)
    factors = sample_jitter(settings, rng)
    target = geo.apply(ex.image)
    if ex.mask is None:
        grid = make_grid(target.shape[0], target.shape[1], config.target_patches)
        pix = random_mask(grid, config.mask_ratio, rng).pixel_mask()
    else:
        pix = geo.apply(ex.mask)
    inp = color_jitter(target, factors)
    inp[pix] = config.fill
    return inp, target


def _to_nchw(batch: list[np.ndarray], dtype) -> np.ndarray:
    return np.ascontiguousarray(np.stack(batch).transpose(0, 3, 1, 2), dtype=dtype)


def train_reconstruction_epochs(
    model: UNet,
    examples: Sequence[TrainExample],
    epochs: int,
    batch_size: int,
    optimizer: Adam,
    config: PretrainConfig,
    stream_key: tuple = (),
) -> list[float]:
    """Minibatch training on (1 - MS-SSIM) + L1; returns the per-epoch mean loss."""
    if epochs and batch_size > len(examples):
        raise ValueError(f"batch size {batch_size} exceeds the {len(examples)} training images")
    history = []
    for epoch in range(epochs):
        rng = stream(config.seed, "train", *stream_key, epoch)
        order = rng.permutation(len(examples))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), batch_size)):
            pairs = [_prepare(examples[i], config, rng) for i in order[start:start + batch_size]]
            x = _to_nchw([p[0] for p in pairs], model.dtype)
            y = _to_nchw([p[1] for p in pairs], model.dtype)
            loss = train_loss(model(x), Tensor(y))
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at {stream_key} epoch {epoch} batch {b}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += value * len(pairs)
            seen += len(pairs)
        history.append(total / seen)
        log.debug("%s epoch %d loss %.5f", stream_key, epoch, history[-1])
    return history


def _train_step(model: UNet, examples, config: PretrainConfig, p: int) -> list[float]:
    opt = Adam(model.parameters(), lr=config.lr)  # fresh moments at each partition
    return train_reconstruction_epochs(
        model, examples, config.epochs_per_partition, config.batch_size, opt, config, ("partition", p)
    )


def _checkpoint(model: UNet, config: PretrainConfig, p: int) -> Checkpoint:
    return Checkpoint.from_model(
        model,
        partition=p,
        epoch=config.epochs_per_partition,
        seed=config.seed,
        masking_mode=config.masking_mode,
        config_fingerprint=config.fingerprint(),
    )


def init_step(config: PretrainConfig, ids: Sequence[str], images: Sequence[np.ndarray],
              model: UNet | None = None) -> tuple[Checkpoint, StepReport]:
    """Train a fresh model on randomly masked partition-0 images."""
    if not images:
        raise ValueError("partition 0 is empty")
    model = build_unet(config.model) if model is None else model
    examples = [TrainExample(np.asarray(img, dtype=np.float64)) for img in images]
    report = StepReport(0, "random", list(ids))
    report.loss_history = _train_step(model, examples, config, 0)
    report.examples_processed = len(examples) * config.epochs_per_partition
    ckpt = _checkpoint(model, config, 0)
    report.checkpoint = ckpt.digest()
    return ckpt, report


class CountingReconstructor:
    """Forward-only wrapper that counts images passed through the model."""

    def __init__(self, model: UNet):
        self.model = model
        self.calls = 0

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        self.calls += len(batch)
        return self.model.reconstruct(batch)


def _threads(config: PretrainConfig) -> int:
    env = os.environ.get("SMIR_THREADS")
    cap = int(env) if env else config.threads
    return max(1, min(config.threads, cap))


def compute_selective_masks(
    reconstructor: Callable[[np.ndarray], np.ndarray],
    ids: Sequence[str],
    images: Sequence[np.ndarray],
    config: PretrainConfig,
    p: int,
) -> list[PatchMask]:
    """One selective mask per image; per-image RNG streams make the result thread-independent."""

    def one(i: int) -> PatchMask:
        img = np.asarray(images[i], dtype=np.float64)
        grid = full_grid(config, img.shape[:2])
        rng = stream(config.seed, "select", p, i)
        mask, _ = selective_mask_image(
            reconstructor, img, grid, rng,
            k=config.samples_per_image, ratio=config.mask_ratio,
            fill=config.fill, paired=config.paired_samples,
        )
        return mask

    workers = _threads(config)
    if workers == 1:
        return [one(i) for i in range(len(images))]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(len(images))))


def selective_step(prev: Checkpoint, ids: Sequence[str], images: Sequence[np.ndarray],
                   config: PretrainConfig, p: int) -> tuple[Checkpoint, StepReport]:
    """Mask partition ``p`` with ``prev`` once, then continue training from ``prev``."""
    if prev.head != "reconstruction":
        raise ValueError("selective masking needs a reconstruction checkpoint")
    if not images:
        raise ValueError(f"partition {p} is empty")
    source_hash = prev.digest()
    model = prev.model()
    report = StepReport(p, config.masking_mode, list(ids), source_checkpoint=source_hash)
    imgs = [np.asarray(img, dtype=np.float64) for img in images]

    if config.masking_mode == "selective":
        counter = CountingReconstructor(model)
        masks = compute_selective_masks(counter, ids, imgs, config, p)
        report.forward_passes = counter.calls
        examples = [TrainExample(img, m.pixel_mask()) for img, m in zip(imgs, masks)]
    elif config.random_redraw:
        masks = []
        examples = [TrainExample(img) for img in imgs]
    else:
        masks = [random_mask(full_grid(config, img.shape[:2]), config.mask_ratio, stream(config.seed, "fixed-random", p, i))
                 for i, img in enumerate(imgs)]
        examples = [TrainExample(img, m.pixel_mask()) for img, m in zip(imgs, masks)]
    if masks:
        report.masks = {k: m.to_bits() for k, m in zip(ids, masks)}
        g = masks[0].grid
        report.grid = f"{g.rows}x{g.cols}"

    report.loss_history = _train_step(model, examples, config, p)
    report.examples_processed = len(examples) * config.epochs_per_partition
    ckpt = _checkpoint(model, config, p)
    report.checkpoint = ckpt.digest()
    return ckpt, report


@dataclass
class PretrainResult:
    final: Checkpoint | None
    plan: PartitionPlan
    reports: list[StepReport]
    checkpoint_hashes: list[str]
    completed: bool = True
    resumed_from: int | None = None


def _ckpt_path(out_dir: Path, p: int) -> Path:
    return out_dir / f"partition_{p:02d}.smir"


def _find_resume_point(out_dir: Path, config: PretrainConfig) -> tuple[int, Checkpoint | None]:
    last, ckpt = -1, None
    for p in range(config.num_partitions):
        path = _ckpt_path(out_dir, p)
        if not path.exists():
            break
        try:
            c = load_checkpoint(path)
        except CheckpointError as e:
            log.warning("ignoring unreadable checkpoint %s: %s", path, e)
            break
        if c.meta.get("config_fingerprint") != config.fingerprint() or c.meta.get("masking_mode") != config.masking_mode:
            break
        last, ckpt = p, c
    return last, ckpt


def run_pretraining(
    config: PretrainConfig,
    ids: Sequence[str],
    images: Sequence[np.ndarray],
    out_dir=None,
    resume: bool = True,
    stop_after: int | None = None,
) -> PretrainResult:
    """Init step on partition 0, then one masking+training step per later partition.

    With ``out_dir`` every partition is checkpointed; a rerun picks up after the
    last checkpoint written with the same config.  ``stop_after`` ends the run
    early after that partition (used to simulate interruption).
    """
    ids = list(ids)
    lookup = dict(zip(ids, images))
    plan = partition(ids, config.num_partitions, stream(config.seed, "partition"))
    out = Path(out_dir) if out_dir is not None else None
    start, ckpt = 0, None
    resumed_from = None
    hashes: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            last, ckpt = _find_resume_point(out, config)
            if last >= 0:
                start, resumed_from = last + 1, last
                hashes = [load_checkpoint(_ckpt_path(out, p)).digest() for p in range(last + 1)]
                log.info("resuming after partition %d", last)

    reports: list[StepReport] = []
    completed = True
    for p in range(start, config.num_partitions):
        part_ids = plan.parts[p]
        part_imgs = [lookup[k] for k in part_ids]
        if p == 0:
            ckpt, report = init_step(config, part_ids, part_imgs)
        else:
            ckpt, report = selective_step(ckpt, part_ids, part_imgs, config, p)
        reports.append(report)
        hashes.append(report.checkpoint)
        log.info("partition %d done: loss %.4f -> %.4f", p,
                 report.loss_history[0] if report.loss_history else float("nan"),
                 report.loss_history[-1] if report.loss_history else float("nan"))
        if out is not None:
            save_checkpoint(ckpt, _ckpt_path(out, p))
            report.write(out)
            _write_run_log(out, config, plan, hashes)
        if stop_after is not None and p >= stop_after and p < config.num_partitions - 1:
            completed = False
            break
    if out is not None and not reports:
        _write_run_log(out, config, plan, hashes)
    return PretrainResult(ckpt, plan, reports, hashes, completed, resumed_from)


def _write_run_log(out: Path, config: PretrainConfig, plan: PartitionPlan, hashes: list[str]) -> None:
    doc = {
        "command": "pretrain",
        "seed": config.seed,
        "masking_mode": config.masking_mode,
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "partition_plan": plan.parts,
        "checkpoint_hashes": hashes,
    }
    path = out / "pretrain_log.json"
    if path.exists():
        prev = json.loads(path.read_text())
        doc = {**prev, **doc}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def validate_reconstruction(
    model,
    images: Sequence[np.ndarray],
    masking_mode: str,
    config: PretrainConfig,
    seed: int | None = None,
) -> float:
    """Mean (1 - MS-SSIM) + L1 on held-out images masked per ``masking_mode``.

    ``model`` is a :class:`UNet` or any callable mapping a stack of H x W x C
    images to reconstructions.  Images are cropped once with a fixed stream.
    """
    if not len(images):
        raise ValueError("held-out set is empty")
    if masking_mode not in MODES:
        raise ValueError(f"masking_mode must be one of {MODES}")
    recon = model.reconstruct if isinstance(model, UNet) else model
    seed = config.seed if seed is None else seed
    settings = config.augment_settings()
    settings = AugmentSettings(hflip_prob=0.0, crop_size=settings.crop_size)
    losses = []
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        rng = stream(seed, "validate", i)
        if settings.crop_size is not None:
            align = crop_patch_shape(config, img.shape[:2])
            settings = AugmentSettings(hflip_prob=0.0, crop_size=settings.crop_size, crop_align=align)
        crop = sample_geometry(img.shape[:2], settings, rng).apply(img)
        grid = make_grid(crop.shape[0], crop.shape[1], config.target_patches)
        if masking_mode == "selective":
            _, masked = selective_mask_image(
                recon, crop, grid, rng, k=config.samples_per_image, ratio=config.mask_ratio,
                fill=config.fill, paired=config.paired_samples,
            )
        else:
            masked = apply_mask(crop, random_mask(grid, config.mask_ratio, rng), config.fill)
        out = np.asarray(recon(masked[None]))[0]
        with ad.no_grad():
            loss = train_loss(Tensor(out.transpose(2, 0, 1)[None].copy()), Tensor(crop.transpose(2, 0, 1)[None].copy()))
        losses.append(loss.item())
    return float(np.mean(losses))
