"""Desk-scale classifier: conv stem -> CAGA block(s) -> global average pool -> linear head."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import CagaBlock, CagaConfig, caga_config_from_kv, caga_config_to_kv, parse_bool
from .errors import ConfigError, ShapeError
from .layers import DEFAULT_SEED, BatchNorm2d, Conv2d, ConvSpec, Linear, Module
from .tensor import Tensor, concat, mean, relu, slice_axis

# (out_channels, stride) per stem stage. The third stage keeps stride 1 so a
# 32x32 input leaves the stem at 8x8, enough for the dilation-3 kernel (7x7).
DEFAULT_STEM = ((16, 2), (32, 2), (32, 1))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    stem: tuple[tuple[int, int], ...] = DEFAULT_STEM
    caga: CagaConfig = field(default_factory=CagaConfig)
    num_classes: int = 4
    num_caga_blocks: int = 1
    use_caga: bool = True
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stem", tuple((int(c), int(s)) for c, s in self.stem))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.num_caga_blocks < 1:
            raise ConfigError("num_caga_blocks must be at least 1")
        if not self.stem:
            raise ConfigError("the stem needs at least one stage")
        if self.feature_size < self.caga.caa.max_k_eff:
            raise ConfigError(
                f"stem reduces {self.image_size}x{self.image_size} input to {self.feature_size}x{self.feature_size}, "
                f"below the largest effective kernel {self.caga.caa.max_k_eff}")

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _, stride in self.stem:
            size = (size - 1) // stride + 1
        return size

    @property
    def stem_channels(self) -> int:
        return self.stem[-1][0]


class ChannelAdapter(Module):
    """Parameter-free stand-in for a CAGA block: output channel c copies input channel c mod C_in."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        if self.in_channels == self.out_channels:
            return x
        parts = []
        remaining = self.out_channels
        while remaining > 0:
            take = min(remaining, self.in_channels)
            parts.append(slice_axis(x, 1, 0, take))
            remaining -= take
        return concat(parts, axis=1)


class StemStage(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(ConvSpec(in_channels, out_channels, 3, stride, 1, "same", bias=False), rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class CagaClassifier(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = DEFAULT_SEED):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c_in = cfg.in_channels
        for i, (c_out, stride) in enumerate(cfg.stem):
            setattr(self, f"stem{i}", StemStage(c_in, c_out, stride, rng))
            c_in = c_out
        for b in range(cfg.num_caga_blocks):
            if cfg.use_caga:
                block = CagaBlock(c_in, cfg.caga, rng=rng)
            else:
                block = ChannelAdapter(c_in, cfg.caga.channels)
            setattr(self, f"caga{b}", block)
            c_in = cfg.caga.channels
        self.head = Linear(c_in, cfg.num_classes, rng)

    def layer_names(self) -> list[str]:
        names = [f"stem{i}" for i in range(len(self.cfg.stem))]
        names += [f"caga{b}" for b in range(self.cfg.num_caga_blocks)]
        return names + ["pool", "head"]

    def forward(self, images: Tensor, capture: dict | None = None, record: list | None = None) -> Tensor:
        """Logits for a B×C×H×W batch. ``capture`` collects per-layer outputs by name."""
        if images.ndim != 4:
            raise ShapeError(f"expected B×C×H×W images, got shape {images.shape}")
        x = images
        for i in range(len(self.cfg.stem)):
            x = getattr(self, f"stem{i}")(x)
            if capture is not None:
                capture[f"stem{i}"] = x
        for b in range(self.cfg.num_caga_blocks):
            block = getattr(self, f"caga{b}")
            x = block(x, record) if isinstance(block, CagaBlock) else block(x)
            if capture is not None:
                capture[f"caga{b}"] = x
        pooled = mean(x, axis=(2, 3))
        if capture is not None:
            capture["pool"] = pooled
        logits = self.head(pooled)
        if capture is not None:
            capture["head"] = logits
        return logits


def forward(images: Tensor, cfg: ModelConfig, params: CagaClassifier) -> Tensor:
    if params.cfg != cfg:
        raise ConfigError("parameters were built for a different model configuration")
    return params(images)


def predict(logits) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim == 1:
        arr = arr[None, :]
    return np.argmax(arr, axis=1)


# ---------------------------------------------------------------------------
# key=value serialization
# ---------------------------------------------------------------------------

def model_config_to_kv(cfg: ModelConfig) -> dict:
    values = caga_config_to_kv(cfg.caga)
    values.update({
        "image_size": cfg.image_size,
        "stem_channels": [c for c, _ in cfg.stem],
        "stem_strides": [s for _, s in cfg.stem],
        "num_classes": cfg.num_classes,
        "num_caga_blocks": cfg.num_caga_blocks,
        "use_caga": cfg.use_caga,
    })
    return values


def model_config_from_kv(values: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    caga = caga_config_from_kv(values, base.caga)
    try:
        stem = base.stem
        if "stem_channels" in values or "stem_strides" in values:
            chans = [int(v) for v in values.get("stem_channels", ",".join(str(c) for c, _ in base.stem)).split(",")]
            strides = [int(v) for v in values.get("stem_strides", ",".join(str(s) for _, s in base.stem)).split(",")]
            if len(chans) != len(strides):
                raise ConfigError("stem_channels and stem_strides must have the same length")
            stem = tuple(zip(chans, strides))
        return replace(
            base,
            image_size=int(values.get("image_size", base.image_size)),
            stem=stem,
            caga=caga,
            num_classes=int(values.get("num_classes", base.num_classes)),
            num_caga_blocks=int(values.get("num_caga_blocks", base.num_caga_blocks)),
            use_caga=parse_bool(values["use_caga"]) if "use_caga" in values else base.use_caga,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
