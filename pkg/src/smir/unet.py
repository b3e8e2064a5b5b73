"""Compact U-Net encoder-decoder with a swappable output head."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD_KINDS = ("reconstruction", "segmentation")
NORM_KINDS = ("none", "instance")
HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 3
    out_channels: int = 3
    norm_kind: str = "instance"
    seed: int = 0
    head: str = "reconstruction"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.out_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def for_segmentation(self, num_classes: int, seed: int | None = None) -> "UNetConfig":
        return replace(
            self,
            out_channels=num_classes,
            head="segmentation",
            seed=self.seed if seed is None else seed,
        )


def layer_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in construction order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix: str, cin: int, cout: int) -> None:
        shapes[f"{prefix}.conv1.weight"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv1.bias"] = (cout,)
        shapes[f"{prefix}.conv2.weight"] = (cout, cout, 3, 3)
        shapes[f"{prefix}.conv2.bias"] = (cout,)

    widths = [config.base_channels * 2**i for i in range(config.depth + 1)]
    cin = config.in_channels
    for i in range(config.depth):
        block(f"enc{i}", cin, widths[i])
        cin = widths[i]
    block("bottleneck", cin, widths[config.depth])
    for i in reversed(range(config.depth)):
        block(f"dec{i}", widths[i + 1] + widths[i], widths[i])
    shapes["head.weight"] = (config.out_channels, widths[0], 1, 1)
    shapes["head.bias"] = (config.out_channels,)
    return shapes


def init_tensor(name: str, shape: tuple[int, ...], seed: int, dtype=np.float32) -> np.ndarray:
    """He-style fan-in init; each tensor has its own stream keyed by (seed, name)."""
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class UNet:
    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        expected = layer_shapes(config)
        missing = [k for k in expected if k not in params]
        if missing:
            raise KeyError(f"missing tensor(s): {', '.join(missing)}")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"tensor {k} has shape {params[k].shape}, expected {shape}")
        extra = set(params) - set(expected)
        if extra:
            raise KeyError(f"unexpected tensor(s): {', '.join(sorted(extra))}")
        self.config = config
        self.params = {k: params[k] for k in expected}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "UNet":
        return UNet(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()})

    def copy(self) -> "UNet":
        return UNet(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def _block(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        for conv in ("conv1", "conv2"):
            x = ad.conv2d(x, p[f"{prefix}.{conv}.weight"], p[f"{prefix}.{conv}.bias"], padding=1)
            if self.config.norm_kind == "instance":
                x = ad.instance_norm(x)
            x = ad.relu(x)
        return x

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected input [N,{self.config.in_channels},H,W], got {x.shape}")
        step = 2**self.config.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {step} for depth {self.config.depth}")
        return x

    def features(self, x) -> Tensor:
        """Activation entering the output head."""
        x = self._check_input(x)
        skips = []
        for i in range(self.config.depth):
            x = self._block(f"enc{i}", x)
            skips.append(x)
            x = ad.maxpool2(x)
        x = self._block("bottleneck", x)
        for i in reversed(range(self.config.depth)):
            x = ad.concat_channels(ad.upsample_nearest2(x), skips[i])
            x = self._block(f"dec{i}", x)
        return x

    def forward(self, x, record_gradients: bool = True) -> Tensor:
        if not record_gradients:
            with ad.no_grad():
                return self.forward(x, record_gradients=True)
        out = ad.conv2d(self.features(x), self.params["head.weight"], self.params["head.bias"])
        if self.config.head == "reconstruction":
            out = ad.sigmoid(out)
        return out

    __call__ = forward

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Forward-only pass over a stack of H x W x C images."""
        arr = np.asarray(images)
        single = arr.ndim == 3
        batch = arr[None] if single else arr
        out = self.forward(batch.transpose(0, 3, 1, 2).astype(self.dtype), record_gradients=False)
        res = out.data.transpose(0, 2, 3, 1).astype(np.float64)
        return res[0] if single else res


def build_unet(config: UNetConfig, dtype=np.float32) -> UNet:
    params = {
        name: Tensor(init_tensor(name, shape, config.seed, dtype), requires_grad=True)
        for name, shape in layer_shapes(config).items()
    }
    return UNet(config, params)


def transfer_weights(source, target_config: UNetConfig) -> UNet:
    """Copy every tensor except the output head; the head is freshly initialized.

    ``source`` is a :class:`UNet` or anything with a ``model()`` method that
    returns one (a loaded checkpoint).
    """
    if not isinstance(source, UNet):
        source = source.model()
    src = source.config
    mismatched = [
        f for f in ("depth", "base_channels", "in_channels", "norm_kind")
        if getattr(src, f) != getattr(target_config, f)
    ]
    if mismatched:
        raise ValueError(f"config mismatch beyond the head: {', '.join(mismatched)}")
    shapes = layer_shapes(target_config)
    dtype = source.dtype
    params = {}
    for name, shape in shapes.items():
        if name in HEAD_PARAMS:
            data = init_tensor(name, shape, target_config.seed, dtype)
        else:
            if name not in source.params:
                raise KeyError(f"source checkpoint is missing tensor {name}")
            data = source.params[name].data.copy()
        params[name] = Tensor(data, requires_grad=True)
    return UNet(target_config, params)
