"""Grad-CAM heatmaps and analytic parameter / multiply-accumulate accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import CaaHead, CagaBlock, CgaParams
from .dataio import encode_pgm, encode_ppm
from .errors import ContractError, ShapeError
from .layers import BatchNorm2d, Conv2d, DepthwiseSeparableConv, Linear, Module, interpolation_matrix
from .model import CagaClassifier, ChannelAdapter, StemStage
from .tensor import ComputationTape, Tensor, backward

OVERLAY_ALPHA = 0.5


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------

@dataclass
class GradCamResult:
    heatmap: np.ndarray
    target_class: int
    layer: str


def _minmax(cam: np.ndarray) -> np.ndarray:
    lo, hi = cam.min(), cam.max()
    if hi <= 0:
        return np.zeros_like(cam)
    if hi - lo <= 0:
        return np.ones_like(cam)
    return (cam - lo) / (hi - lo)


def grad_cam_from_maps(features: np.ndarray, grads: np.ndarray, size: tuple[int, int] | None = None,
                       normalize: bool = True) -> np.ndarray:
    """Heatmap from a C×h×w feature map and its gradient.

    Channel weights are the spatial means of ``grads``; the weighted sum is
    rectified, bilinearly resized to ``size`` and min-max normalized.
    """
    features = np.asarray(features, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if features.ndim != 3 or features.shape != grads.shape:
        raise ShapeError(f"features and grads must be matching C×h×w arrays, got {features.shape} and {grads.shape}")
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, features, axes=1), 0.0)
    if size is not None and tuple(size) != cam.shape:
        cam = interpolation_matrix(cam.shape[0], size[0], cam.dtype) @ cam @ \
            interpolation_matrix(cam.shape[1], size[1], cam.dtype).T
        cam = np.maximum(cam, 0.0)
    return _minmax(cam) if normalize else cam


def grad_cam(model: CagaClassifier, image: np.ndarray, target_class: int, layer: str = "caga0") -> GradCamResult:
    """Grad-CAM for one (already normalized) C×H×W image."""
    if layer not in model.layer_names():
        raise LookupError(f"unknown layer {layer!r}; choose from {', '.join(model.layer_names())}")
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected a C×H×W image, got shape {image.shape}")
    if not 0 <= target_class < model.cfg.num_classes:
        raise ContractError(f"target class {target_class} out of range")
    was_training = model.training
    model.eval()
    try:
        with ComputationTape():
            capture: dict[str, Tensor] = {}
            logits = model(Tensor(image[None]), capture=capture)
            feature = capture[layer]
            if feature.ndim != 4:
                raise ShapeError(f"layer {layer!r} is not a spatial feature map")
            if not feature.requires_grad:
                raise ContractError(f"layer {layer!r} does not depend on trainable parameters")
            backward(logits[0, target_class])
            grads = feature.grad if feature.grad is not None else np.zeros_like(feature.data)
    finally:
        model.train(was_training)
    heatmap = grad_cam_from_maps(feature.data[0], grads[0], image.shape[1:])
    return GradCamResult(heatmap, int(target_class), layer)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to a 3×H×W blue-cyan-yellow-red ramp (piecewise linear)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b])


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the coloured heatmap onto a [0,1] 3×H×W image."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.shape[1:] != heatmap.shape:
        raise ShapeError(f"image {image.shape} and heatmap {heatmap.shape} differ in size")
    return (1 - alpha) * image + alpha * colormap(heatmap)


def heatmap_files(image: np.ndarray, result: GradCamResult) -> tuple[bytes, bytes]:
    """(PGM heatmap, PPM overlay) file contents."""
    return encode_pgm(result.heatmap), encode_ppm(overlay(image, result.heatmap))


# ---------------------------------------------------------------------------
# Profiling
# ---------------------------------------------------------------------------

@dataclass
class ProfileRow:
    layer: str
    params: int
    macs: int


@dataclass
class ProfileReport:
    rows: list[ProfileRow] = field(default_factory=list)

    def add(self, layer: str, params: int = 0, macs: int = 0) -> None:
        self.rows.append(ProfileRow(layer, int(params), int(macs)))

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def flops(self) -> int:
        return 2 * self.total_macs

    def to_csv(self, double: bool = False) -> str:
        """CSV with columns layer,params,macs; ``double`` reports 2 FLOPs per MAC."""
        scale = 2 if double else 1
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.layer, r.params, r.macs * scale])
        writer.writerow(["total", self.total_params, self.total_macs * scale])
        return buf.getvalue()


def _own_param_count(module: Module) -> int:
    return sum(p.size for p in module._params.values())


def count_params(model: Module) -> ProfileReport:
    """Trainable element counts grouped by the module that owns them."""
    report = ProfileReport()
    for name, module in model.named_modules():
        n = _own_param_count(module)
        if n:
            report.add(name or "<root>", n)
    return report


def conv_macs(in_channels: int, out_channels: int, kernel: int, groups: int, out_h: int, out_w: int) -> int:
    return kernel * kernel * (in_channels // groups) * out_channels * out_h * out_w


def attention_macs(d_qkv: int, tokens: int) -> tuple[int, int]:
    """(QᵀK plus V·Aᵀ products, softmax cost) for one branch."""
    return 2 * d_qkv * tokens * tokens, tokens * tokens


def interpolation_macs(channels: int, src: tuple[int, int], dst: tuple[int, int]) -> int:
    return 0 if tuple(src) == tuple(dst) else 4 * channels * dst[0] * dst[1]


class _MacWalker:
    def __init__(self):
        self.report = ProfileReport()

    def conv(self, name: str, layer: Conv2d, h: int, w: int) -> tuple[int, int]:
        s = layer.spec
        ho, wo = s.output_extent(h), s.output_extent(w)
        self.report.add(name, _own_param_count(layer),
                        conv_macs(s.in_channels, s.out_channels, s.kernel, s.groups, ho, wo))
        return ho, wo

    def bn(self, name: str, layer: BatchNorm2d) -> None:
        self.report.add(name, _own_param_count(layer), 0)

    def dsconv(self, name: str, layer: DepthwiseSeparableConv, h: int, w: int) -> tuple[int, int]:
        h, w = self.conv(f"{name}.depthwise", layer.depthwise, h, w)
        return self.conv(f"{name}.pointwise", layer.pointwise, h, w)

    def caa_head(self, name: str, head: CaaHead, h: int, w: int) -> None:
        cfg = head.cfg
        prev_shape = None
        for j, _ in enumerate(cfg.dilations):
            if j > 0 and cfg.cascade_dilations:
                ph, pw = self.conv(f"{name}.cascade{j}", getattr(head, f"cascade{j}"), *prev_shape)
                self.report.add(f"{name}.cascade{j}.interp", 0,
                                interpolation_macs(cfg.head_dim, (ph, pw), (h, w)))
            ht, wt = self.conv(f"{name}.qkv{j}", getattr(head, f"qkv{j}"), h, w)
            self.conv(f"{name}.transform{j}", getattr(head, f"transform{j}"), ht, wt)
            products, softmax = attention_macs(cfg.d_qkv, ht * wt)
            self.report.add(f"{name}.attn{j}", 0, products)
            self.report.add(f"{name}.attn{j}.softmax", 0, softmax)
            self.report.add(f"{name}.interp{j}", 0, interpolation_macs(cfg.d_qkv, (ht, wt), (h, w)))
            prev_shape = (ht, wt)
        self.conv(f"{name}.out_proj", head.out_proj, h, w)

    def cga(self, name: str, cga: CgaParams, h: int, w: int) -> None:
        for i, head in enumerate(cga.heads()):
            self.caa_head(f"{name}.head{i}", head, h, w)
        self.conv(f"{name}.proj", cga.proj, h, w)

    def block(self, name: str, block: CagaBlock, h: int, w: int) -> tuple[int, int]:
        h, w = self.dsconv(f"{name}.dsconv", block.dsconv, h, w)
        self.cga(f"{name}.cga", block.cga, h, w)
        self.bn(f"{name}.bn", block.bn)
        return h, w

    def linear(self, name: str, layer: Linear) -> None:
        self.report.add(name, _own_param_count(layer), layer.in_features * layer.out_features)


def count_macs(model: Module, input_shape: Sequence[int]) -> ProfileReport:
    """Per-layer parameters and multiply-accumulates for one C×H×W input.

    Batch norm, ReLU, pooling and residual additions count as zero MACs.
    """
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 4:
        shape = shape[1:]
    if len(shape) != 3:
        raise ShapeError(f"expected a C×H×W input shape, got {input_shape}")
    _, h, w = shape
    walker = _MacWalker()
    if isinstance(model, CagaClassifier):
        for i in range(len(model.cfg.stem)):
            stage: StemStage = getattr(model, f"stem{i}")
            h, w = walker.conv(f"stem{i}.conv", stage.conv, h, w)
            walker.bn(f"stem{i}.bn", stage.bn)
        for b in range(model.cfg.num_caga_blocks):
            block = getattr(model, f"caga{b}")
            if isinstance(block, CagaBlock):
                h, w = walker.block(f"caga{b}", block, h, w)
            elif not isinstance(block, ChannelAdapter):
                raise ContractError(f"cannot profile block of type {type(block).__name__}")
        walker.linear("head", model.head)
    elif isinstance(model, CagaBlock):
        walker.block("caga", model, h, w)
    elif isinstance(model, Conv2d):
        walker.conv("conv", model, h, w)
    elif isinstance(model, DepthwiseSeparableConv):
        walker.dsconv("dsconv", model, h, w)
    elif isinstance(model, Linear):
        walker.linear("linear", model)
    else:
        raise ContractError(f"no MAC rule for {type(model).__name__}")
    return walker.report


def parameter_reduction(old: int | float, new: int | float) -> float:
    """Relative reduction 1 - new/old."""
    if old <= 0:
        raise ContractError("reference parameter count must be positive")
    return 1.0 - new / old
