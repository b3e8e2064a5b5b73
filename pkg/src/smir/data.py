"""Image/label ingestion, tiling, augmentation and the synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = 0
SHAPE_KINDS = ("disk", "rectangle", "triangle")
MANIFEST_SEPARATOR = "---"


# -- manifests -------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str | None]] = field(default_factory=list)
    split: str = "pretrain"
    num_classes: int = 0
    tile_size: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        lines = [f"split={self.split}", f"num_classes={self.num_classes}", f"tile_size={self.tile_size}"]
        lines += [f"{k}={v}" for k, v in self.extra.items()]
        lines.append(MANIFEST_SEPARATOR)
        lines += [img if lbl is None else f"{img},{lbl}" for img, lbl in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        header: dict[str, str] = {}
        entries: list[tuple[str, str | None]] = []
        in_body = False
        for raw in path.read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not in_body:
                if line == MANIFEST_SEPARATOR:
                    in_body = True
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}: malformed header line {raw!r}")
                header[key.strip()] = value.strip()
                continue
            img, _, lbl = line.partition(",")
            entries.append((img.strip(), lbl.strip() or None))
        return cls(
            root=path.parent,
            entries=entries,
            split=header.pop("split", "pretrain"),
            num_classes=int(header.pop("num_classes", 0)),
            tile_size=int(header.pop("tile_size", 0)),
            extra=header,
        )

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(lbl is not None for _, lbl in self.entries)


@dataclass
class Dataset:
    ids: list[str]
    images: list[np.ndarray]
    labels: list[np.ndarray] | None = None
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, ids) -> "Dataset":
        pos = {k: i for i, k in enumerate(self.ids)}
        idx = [pos[k] for k in ids]
        return Dataset(
            [self.ids[i] for i in idx],
            [self.images[i] for i in idx],
            None if self.labels is None else [self.labels[i] for i in idx],
            self.num_classes,
        )


def read_image(path) -> np.ndarray:
    """8-bit image -> float64 H x W x 3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"{path}: label must be a single-channel image, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_label(path, label: np.ndarray) -> None:
    """Indexed (palette) PNG; pixel values are class ids."""
    arr = np.ascontiguousarray(label, dtype=np.uint8)
    im = Image.frombytes("P", (arr.shape[1], arr.shape[0]), arr.tobytes())
    rng = np.random.default_rng(0)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    palette[0] = 0
    im.putpalette(palette.reshape(-1).tolist())
    im.save(path)


def load_dataset(manifest: DatasetManifest) -> Dataset:
    entries = sorted(manifest.entries, key=lambda e: e[0])
    ids, images, labels = [], [], []
    for img_rel, lbl_rel in entries:
        img_path = manifest.root / img_rel
        try:
            img = read_image(img_path)
        except (OSError, ValueError) as e:
            raise OSError(f"cannot read image {img_path}: {e}") from e
        if lbl_rel is not None:
            lbl_path = manifest.root / lbl_rel
            try:
                lbl = read_label(lbl_path)
            except (OSError, ValueError) as e:
                raise OSError(f"cannot read label {lbl_path}: {e}") from e
            if lbl.shape != img.shape[:2]:
                raise ValueError(
                    f"label {lbl_path} is {lbl.shape[1]}x{lbl.shape[0]} but image {img_path} "
                    f"is {img.shape[1]}x{img.shape[0]}"
                )
            labels.append(lbl)
        ids.append(Path(img_rel).stem)
        images.append(img)
    has_labels = bool(labels) and len(labels) == len(images)
    return Dataset(ids, images, labels if has_labels else None, manifest.num_classes)


# -- tiling ----------------------------------------------------------------

def tile_image(big: np.ndarray, tile: int) -> list[np.ndarray]:
    """Row-major non-overlapping tiles; partial tiles at the edges are dropped."""
    if tile < 1:
        raise ValueError("tile must be >= 1")
    rows, cols = big.shape[0] // tile, big.shape[1] // tile
    return [big[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] for r in range(rows) for c in range(cols)]


def tile_count(h: int, w: int, tile: int) -> int:
    return (h // tile) * (w // tile)


# -- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentSettings:
    hflip_prob: float = 0.5
    crop_size: int | None = None
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)
    # crop offsets snap to multiples of (dy, dx) so patch grids stay aligned
    crop_align: tuple[int, int] = (1, 1)


@dataclass(frozen=True)
class Geometry:
    top: int
    left: int
    height: int
    width: int
    flip: bool

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = arr[self.top:self.top + self.height, self.left:self.left + self.width]
        if self.flip:
            out = out[:, ::-1]
        return np.ascontiguousarray(out)


def sample_geometry(shape: tuple[int, int], settings: AugmentSettings, rng: np.random.Generator) -> Geometry:
    h, w = shape
    flip = bool(rng.random() < settings.hflip_prob)
    size = settings.crop_size
    if size is None:
        return Geometry(0, 0, h, w, flip)
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    ah, aw = (max(1, a) for a in settings.crop_align)
    top = int(rng.integers(0, (h - size) // ah + 1)) * ah
    left = int(rng.integers(0, (w - size) // aw + 1)) * aw
    return Geometry(top, left, size, size, flip)


def sample_jitter(settings: AugmentSettings, rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(rng.uniform(*r)) if r[0] != r[1] else float(r[0])
                 for r in (settings.brightness, settings.contrast, settings.saturation))


def color_jitter(image: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    b, c, s = factors
    out = image
    if b != 1.0:
        out = out * b
    if c != 1.0:
        m = _gray(out).mean()
        out = (out - m) * c + m
    if s != 1.0:
        g = _gray(out)[..., None]
        out = (out - g) * s + g
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


def _gray(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def augment(image: np.ndarray, label: np.ndarray | None, settings: AugmentSettings, rng: np.random.Generator):
    """Joint flip/crop of image and label, color jitter on the image only."""
    geo = sample_geometry(image.shape[:2], settings, rng)
    factors = sample_jitter(settings, rng)
    out = color_jitter(geo.apply(image), factors)
    return out, None if label is None else geo.apply(label)


# -- synthetic corpus ------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    count: int = 160
    size: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 3)
    textured: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPE_KINDS) + 1:
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}]")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValueError("invalid shapes_per_image range")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(size / 8, size / 4.5)
    cy, cx = rng.uniform(r, size - r, size=2)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        hh, hw = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    # upward triangle inscribed in the bounding circle
    top, base = cy - r, cy + 0.7 * r
    half = (yy - top) / (base - top) * r
    return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 6.0)
        phase = (np.cos(theta) * xx + np.sin(theta) * yy) * 2 * np.pi / period
        return 0.25 * np.sin(phase)[..., None]
    return rng.normal(0.0, 0.15, size=(size, size, 3))


def generate_synthetic_arrays(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, S, S, 3) quantized to 8-bit levels, labels (N, S, S)."""
    rng = np.random.default_rng(spec.seed)
    kinds = SHAPE_KINDS[: spec.num_classes - 1]
    n, s = spec.count, spec.size
    images = np.empty((n, s, s, 3))
    labels = np.zeros((n, s, s), dtype=np.int64)
    for i in range(n):
        bg = rng.uniform(0.25, 0.75, size=3)
        img = np.broadcast_to(bg, (s, s, 3)) + rng.normal(0.0, 0.01, size=(s, s, 3))
        count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        for _ in range(count):
            cls = int(rng.integers(len(kinds)))
            mask = _shape_mask(kinds[cls], s, rng)
            color = rng.uniform(0.15, 0.85, size=3)
            fill = np.broadcast_to(color, (s, s, 3))
            if spec.textured:
                fill = fill + _texture(s, rng)
            img = np.where(mask[..., None], fill, img)
            labels[i][mask] = cls + 1
        images[i] = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return images, labels


def generate_synthetic(spec: SynthSpec, root, split: str = "pretrain") -> DatasetManifest:
    """Write PNG images and labels under ``root`` plus ``manifest.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    images, labels = generate_synthetic_arrays(spec)
    entries = []
    for i, (img, lbl) in enumerate(zip(images, labels)):
        name = f"synth_{i:05d}.png"
        write_image(root / "images" / name, img)
        write_label(root / "labels" / name, lbl)
        entries.append((f"images/{name}", f"labels/{name}"))
    manifest = DatasetManifest(root, entries, split=split, num_classes=spec.num_classes,
                               extra={"name": "synthetic", "seed": str(spec.seed),
                                      "class_names": ",".join(("background",) + SHAPE_KINDS[: spec.num_classes - 1])})
    manifest.write(root / "manifest.txt")
    return manifest


def foreground_patch_flags(label: np.ndarray, grid) -> np.ndarray:
    """True for every patch that overlaps at least one non-background pixel."""
    blocks = grid.to_blocks(label[..., None])
    return (blocks != BACKGROUND).any(axis=(1, 2, 3))
