"""SSIM, MS-SSIM and L1, plus the patch-selection and training losses.

Two code paths exist on purpose: plain numpy for evaluation (``ssim_map``,
``patch_loss``) and autodiff tensors for training (``ms_ssim_tensor``,
``train_loss``).  Images on the numpy path are H x W x C (or H x W); tensors
are N x C x H x W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .patches import PatchGrid, PatchLossMap

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# lower bound for per-scale terms before the fractional power
MS_SSIM_FLOOR = 1e-6


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_kind: str = "gaussian"
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.window_kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown window kind {self.window_kind!r}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window_1d(self) -> np.ndarray:
        if self.window_kind == "uniform":
            return np.full(self.window_size, 1.0 / self.window_size)
        r = np.arange(self.window_size) - self.window_size // 2
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        return g / g.sum()


SELECTION_PARAMS = SsimParams(window_size=3, window_kind="uniform")
TRAINING_PARAMS = SsimParams(window_size=11, window_kind="gaussian", sigma=1.5)


def _channels_first(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img.transpose(2, 0, 1)
    raise ValueError(f"expected an H x W or H x W x C image, got shape {img.shape}")


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-region weighted window mean over the last two axes."""
    k = w.size
    tmp = sliding_window_view(img, k, axis=-2) @ w
    return sliding_window_view(tmp, k, axis=-1) @ w


def _ssim_parts(x: np.ndarray, y: np.ndarray, params: SsimParams) -> tuple[np.ndarray, np.ndarray]:
    w = params.window_1d()
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    lum = (2 * mx * my + params.c1) / (mx * mx + my * my + params.c1)
    cs = (2 * sxy + params.c2) / (sxx + syy + params.c2)
    return lum, cs


def ssim_map(x, y, params: SsimParams = SELECTION_PARAMS) -> np.ndarray:
    """Local SSIM over every fully-contained window, averaged over channels."""
    xc, yc = _channels_first(x), _channels_first(y)
    if xc.shape != yc.shape:
        raise ValueError(f"shape mismatch {np.shape(x)} vs {np.shape(y)}")
    if min(xc.shape[1:]) < params.window_size:
        raise ValueError(f"image {xc.shape[1:]} smaller than the {params.window_size}px window")
    lum, cs = _ssim_parts(xc, yc, params)
    return (lum * cs).mean(axis=0)


def l1(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


def max_scales(h: int, w: int, window_size: int, limit: int = 5) -> int:
    s = 0
    while s < limit and min(h, w) >= window_size * 2**s:
        s += 1
    if s == 0:
        raise ValueError(f"image {h}x{w} smaller than the {window_size}px window")
    return s


def scale_weights(scales: int) -> np.ndarray:
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
    w = np.array(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    return w / w.sum()


# -- differentiable path --------------------------------------------------

def _window_kernels(params: SsimParams, dtype) -> tuple[Tensor, Tensor]:
    w = params.window_1d().astype(dtype)
    k = params.window_size
    return Tensor(w.reshape(1, 1, k, 1)), Tensor(w.reshape(1, 1, 1, k))


def _filter_t(x: Tensor, kv: Tensor, kh: Tensor) -> Tensor:
    return ad.conv2d(ad.conv2d(x, kv), kh)


def ssim_parts_tensor(x: Tensor, y: Tensor, params: SsimParams) -> tuple[Tensor, Tensor]:
    """Luminance and contrast-structure maps, shape (N, C, H', W')."""
    n, c, h, w = x.shape
    kv, kh = _window_kernels(params, x.dtype)
    xs, ys = x.reshape(n * c, 1, h, w), y.reshape(n * c, 1, h, w)
    mx, my = _filter_t(xs, kv, kh), _filter_t(ys, kv, kh)
    mxx, myy, mxy = mx * mx, my * my, mx * my
    sxx = _filter_t(xs * xs, kv, kh) - mxx
    syy = _filter_t(ys * ys, kv, kh) - myy
    sxy = _filter_t(xs * ys, kv, kh) - mxy
    lum = (2.0 * mxy + params.c1) / (mxx + myy + params.c1)
    cs = (2.0 * sxy + params.c2) / (sxx + syy + params.c2)
    oh, ow = lum.shape[2], lum.shape[3]
    return lum.reshape(n, c, oh, ow), cs.reshape(n, c, oh, ow)


def ms_ssim_tensor(x: Tensor, y: Tensor, params: SsimParams = TRAINING_PARAMS, scales: int | None = None) -> Tensor:
    """Per-image MS-SSIM, shape (N,).  Downsampling is 2x2 mean pooling."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape or x.ndim != 4:
        raise ValueError(f"expected matching N x C x H x W tensors, got {x.shape} and {y.shape}")
    h, w = x.shape[2:]
    if scales is None:
        scales = max_scales(h, w, params.window_size)
    weights = scale_weights(scales)
    if min(h, w) < params.window_size * 2 ** (scales - 1):
        raise ValueError(f"image {h}x{w} too small for {scales} scales with a {params.window_size}px window")
    result = None
    for j in range(scales):
        lum, cs = ssim_parts_tensor(x, y, params)
        if j < scales - 1:
            term = cs.mean(axis=(1, 2, 3))
            x, y = ad.avgpool2(x), ad.avgpool2(y)
        else:
            term = (lum * cs).mean(axis=(1, 2, 3))
        term = ad.power(ad.clamp_min(term, MS_SSIM_FLOOR), float(weights[j]))
        result = term if result is None else result * term
    return result


def ms_ssim(x, y, params: SsimParams = TRAINING_PARAMS, scales: int | None = None) -> float:
    """MS-SSIM of two H x W x C images (or N x C x H x W tensors, batch-averaged)."""
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        xt, yt = ad.as_tensor(x), ad.as_tensor(y)
    else:
        xc, yc = _channels_first(x), _channels_first(y)
        if xc.shape != yc.shape:
            raise ValueError(f"shape mismatch {np.shape(x)} vs {np.shape(y)}")
        xt, yt = Tensor(xc[None]), Tensor(yc[None])
    with ad.no_grad():
        return float(ms_ssim_tensor(xt, yt, params, scales).data.mean())


def train_loss(recon: Tensor, target, params: SsimParams = TRAINING_PARAMS, scales: int | None = None) -> Tensor:
    """(1 - MS-SSIM) + L1, averaged over the batch; differentiable in ``recon``."""
    recon = ad.as_tensor(recon)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=recon.dtype))
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {target.shape}")
    ms = ms_ssim_tensor(recon, target, params, scales)
    return (1.0 - ms.mean()) + ad.tabs(recon - target).mean()


# -- selection loss --------------------------------------------------------

def patch_loss(recon, original, grid: PatchGrid, params: SsimParams = SELECTION_PARAMS) -> PatchLossMap:
    """Per-patch (1 - SSIM) + L1 using only windows fully inside each patch."""
    recon, original = np.asarray(recon, dtype=np.float64), np.asarray(original, dtype=np.float64)
    if recon.shape != original.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {original.shape}")
    if grid.patch_h < params.window_size or grid.patch_w < params.window_size:
        raise ValueError("patch smaller than the SSIM window")
    rb, ob = grid.to_blocks(recon), grid.to_blocks(original)
    lum, cs = _ssim_parts(rb, ob, params)
    ssim = (lum * cs).mean(axis=(1, 2, 3))
    err = np.abs(rb - ob).mean(axis=(1, 2, 3))
    return PatchLossMap(grid, np.maximum(1.0 - ssim, 0.0) + err)
