"""Layer primitives: dilated convolution, depthwise-separable convolution,
batch normalization, bilinear resizing and Xavier initialization."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ContractError, ParseError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    default_dtype,
    load_tnsr,
    make_result,
    matmul,
    mean,
    mul,
    power,
    reshape,
    save_tnsr,
    sub,
)

DEFAULT_SEED = 82


def effective_kernel_size(k: int, d: int) -> int:
    """Span of a k-tap kernel whose taps sit d pixels apart."""
    if k < 1 or d < 1:
        raise ContractError(f"kernel size and dilation must be positive, got k={k}, d={d}")
    return k + (k - 1) * (d - 1)


def dilated_output_extent(H: int, k: int, d: int, s: int = 1) -> int:
    """Output extent of a valid (unpadded) dilated convolution.

    When ``H - k_eff`` is not a multiple of ``s`` the trailing partial
    window is dropped (floor).
    """
    if s < 1:
        raise ContractError(f"stride must be positive, got {s}")
    k_eff = effective_kernel_size(k, d)
    if H < k_eff:
        raise ShapeError(f"kernel larger than input: extent {H} < effective kernel {k_eff} (k={k}, d={d})")
    return (H - k_eff) // s + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: str = "valid"
    bias: bool = True
    groups: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, field) < 1:
                raise ContractError(f"ConvSpec.{field} must be positive")
        if self.padding not in ("valid", "same"):
            raise ContractError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.padding == "same" and self.k_eff % 2 == 0:
            raise ContractError(f"'same' padding needs an odd effective kernel, got {self.k_eff}")
        if self.groups not in (1, self.in_channels):
            raise ContractError("only dense (groups=1) or depthwise (groups=in_channels) convolutions are supported")
        if self.groups != 1 and self.out_channels != self.in_channels:
            raise ContractError("depthwise convolution keeps the channel count")

    @property
    def k_eff(self) -> int:
        return effective_kernel_size(self.kernel, self.dilation)

    @property
    def pad(self) -> int:
        return (self.k_eff - 1) // 2 if self.padding == "same" else 0

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_extent(self, H: int) -> int:
        return dilated_output_extent(H + 2 * self.pad, self.kernel, self.dilation, self.stride)

    def param_count(self) -> int:
        n = int(np.prod(self.weight_shape))
        return n + (self.out_channels if self.bias else 0)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _tap_slices(i: int, j: int, d: int, s: int, Ho: int, Wo: int):
    r0, c0 = i * d, j * d
    return slice(r0, r0 + s * (Ho - 1) + 1, s), slice(c0, c0 + s * (Wo - 1) + 1, s)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None, *,
           stride: int = 1, dilation: int = 1, padding: str = "valid", groups: int = 1) -> Tensor:
    """2-D cross-correlation with dilated taps (no kernel flip).

    ``x`` is C×H×W or B×C×H×W; ``weight`` is C_out×(C_in/groups)×k×k.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be C_out×C_in×k×k, got {weight.shape}")
    xb, squeeze = _batched(x)
    B, C, H, W = xb.shape
    if spec is None:
        spec = ConvSpec(C, weight.shape[0], weight.shape[2], stride, dilation, padding,
                        bias is not None, groups)
    if C != spec.in_channels:
        raise ShapeError(f"input has {C} channels, conv expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    k, d, s, p = spec.kernel, spec.dilation, spec.stride, spec.pad
    Ho, Wo = spec.output_extent(H), spec.output_extent(W)
    xp = xb.data if p == 0 else np.pad(xb.data, ((0, 0), (0, 0), (p, p), (p, p)))
    w = weight.data
    depthwise = spec.groups != 1

    if k == 1 and d == 1 and not depthwise:
        cols = xp[:, :, ::s, ::s][:, :, :Ho, :Wo]
        out = np.einsum("bchw,oc->bohw", cols, w[:, :, 0, 0], optimize=True)
    else:
        cols = np.empty((B, C, k, k, Ho, Wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                rs, cs = _tap_slices(i, j, d, s, Ho, Wo)
                cols[:, :, i, j] = xp[:, :, rs, cs]
        if depthwise:
            out = np.einsum("bcijhw,cij->bchw", cols, w[:, 0], optimize=True)
        else:
            out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
        out = out + bias.data[None, :, None, None]

    def bw(g):
        if k == 1 and d == 1 and not depthwise:
            gw = np.einsum("bohw,bchw->oc", g, cols, optimize=True)[:, :, None, None]
            gcols = np.einsum("bohw,oc->bchw", g, w[:, :, 0, 0], optimize=True)
            gxp = np.zeros_like(xp)
            gxp[:, :, :s * (Ho - 1) + 1:s, :s * (Wo - 1) + 1:s] = gcols
        else:
            if depthwise:
                gw = np.einsum("bchw,bcijhw->cij", g, cols, optimize=True)[:, None]
                gcols = np.einsum("bchw,cij->bcijhw", g, w[:, 0], optimize=True)
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
                gcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    rs, cs = _tap_slices(i, j, d, s, Ho, Wo)
                    gxp[:, :, rs, cs] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [gx.reshape(x.shape), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    y = make_result(out, inputs, bw, "conv2d")
    return _unbatched(y, squeeze)


def interpolation_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """n_out×n_in linear-interpolation weights, align-corners-false convention."""
    if n_in < 1 or n_out < 1:
        raise ContractError(f"interpolation extents must be positive, got {n_in} -> {n_out}")
    A = np.zeros((n_out, n_in), dtype=dtype or default_dtype())
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        A[i, i0] += 1.0 - frac
        A[i, i1] += frac
    return A


def interpolate_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of a C×h×w (or B×C×h×w) map to ``size``."""
    x = as_tensor(x)
    H, W = size
    if H < 1 or W < 1:
        raise ContractError(f"target size must be positive, got {size}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got shape {x.shape}")
    h1, w1 = x.shape[-2:]
    if (h1, w1) == (H, W):
        return x
    Ah = Tensor(interpolation_matrix(h1, H, x.dtype))
    Awt = Tensor(interpolation_matrix(w1, W, x.dtype).T.copy())
    return matmul(matmul(Ah, x), Awt)


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=None) -> Tensor:
    """Xavier/Glorot uniform draw on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError("fans must be positive")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-a, a, size=shape).astype(dtype or default_dtype())
    return Tensor(data, requires_grad=True)


def conv_fans(weight_shape) -> tuple[int, int]:
    out_c, in_c, kh, kw = weight_shape
    return in_c * kh * kw, out_c * kh * kw


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Module:
    """Container tracking trainable tensors, buffers and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(f"{prefix}{cname}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        owners = {}
        for mname, m in self.named_modules():
            for bname in m._buffers:
                owners[f"{mname}.{bname}" if mname else bname] = (m, bname)
        missing = (set(params) | set(owners)) - set(state)
        if missing:
            raise ContractError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data[...] = arr
        for name, (m, bname) in owners.items():
            m._set_buffer(bname, np.array(state[name], dtype=m._buffers[bname].dtype))


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in, fan_out = conv_fans(spec.weight_shape)
        self.weight = xavier_uniform(spec.weight_shape, fan_in, fan_out, rng)
        if spec.bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype=default_dtype()), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = xavier_uniform((in_features, out_features), in_features, out_features, rng)
        self.bias = Tensor(np.zeros(out_features, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects {self.in_features} features, got shape {x.shape}")
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class DepthwiseSeparableConv(Module):
    """Per-channel k×k convolution ("same" padding) followed by a 1×1 mix."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel: int = 3, dilation: int = 1, bias: bool = True):
        super().__init__()
        self.depthwise = Conv2d(ConvSpec(in_channels, in_channels, kernel, 1, dilation, "same", bias,
                                         groups=in_channels), rng)
        self.pointwise = Conv2d(ConvSpec(in_channels, out_channels, 1, 1, 1, "valid", bias), rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


def depthwise_separable_conv(x: Tensor, dw_weight: Tensor, dw_bias: Tensor | None,
                             pw_weight: Tensor, pw_bias: Tensor | None, dilation: int = 1) -> Tensor:
    C = dw_weight.shape[0]
    dw = ConvSpec(C, C, dw_weight.shape[-1], 1, dilation, "same", dw_bias is not None, groups=C)
    pw = ConvSpec(C, pw_weight.shape[0], 1, 1, 1, "valid", pw_bias is not None)
    return conv2d(conv2d(x, dw_weight, dw_bias, dw), pw_weight, pw_bias, pw)


@dataclass
class BatchNormState:
    """Learnable affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None) -> "BatchNormState":
        dtype = dtype or default_dtype()
        if eps <= 0:
            raise ContractError("batch-norm epsilon must be positive")
        return cls(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization over batch and spatial axes, then affine.

    Training mode uses batch statistics (biased variance) and updates the
    running statistics as ``r <- (1 - momentum) * r + momentum * batch``,
    with the unbiased batch variance feeding ``running_var``.
    """
    xb, squeeze = _batched(as_tensor(x))
    B, C, H, W = xb.shape
    if C != state.channels:
        raise ShapeError(f"input has {C} channels, batch norm expects {state.channels}")
    shape = (1, C, 1, 1)
    if training:
        n = B * H * W
        if n < 2:
            raise ContractError(f"degenerate batch: batch norm needs at least 2 values per channel, got {n}")
        mu = mean(xb, axis=(0, 2, 3), keepdims=True)
        centered = sub(xb, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        xhat = mul(centered, power(add(var, state.eps), -0.5))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu.data.reshape(C)
        state.running_var[...] = (1 - m) * state.running_var + m * var.data.reshape(C) * n / (n - 1)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = mul(sub(xb, Tensor(state.running_mean.reshape(shape))), Tensor(inv_std.reshape(shape).astype(xb.dtype)))
    y = add(mul(xhat, reshape(state.gamma, shape)), reshape(state.beta, shape))
    return _unbatched(y, squeeze)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        st = BatchNormState.create(channels, momentum, eps)
        self.gamma = st.gamma
        self.beta = st.beta
        self.register_buffer("running_mean", st.running_mean)
        self.register_buffer("running_var", st.running_var)
        self.momentum = momentum
        self.eps = eps

    @property
    def state(self) -> BatchNormState:
        return BatchNormState(self.gamma, self.beta, self.running_mean, self.running_var, self.momentum, self.eps)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.state, self.training)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"
BUFFER_MANIFEST = "buffers.txt"


def _write_manifest(directory: str, filename: str, entries: dict[str, np.ndarray]) -> None:
    lines = []
    for i, (name, arr) in enumerate(entries.items()):
        fname = f"{filename.split('.')[0]}_{i:04d}.tnsr"
        save_tnsr(os.path.join(directory, fname), arr)
        lines.append(f"{name}\t{fname}\n")
    with open(os.path.join(directory, filename), "w") as fh:
        fh.writelines(lines)


def read_manifest(path: str) -> dict[str, str]:
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, f"line {lineno}: expected 'name<TAB>file'")
            entries[parts[0]] = parts[1]
    return entries


def save_checkpoint(module: Module, directory: str) -> None:
    """Write parameters (``manifest.txt``) and buffers (``buffers.txt``) as TNSR files."""
    os.makedirs(directory, exist_ok=True)
    _write_manifest(directory, MANIFEST, {n: p.data for n, p in module.named_parameters()})
    _write_manifest(directory, BUFFER_MANIFEST, dict(module.named_buffers()))


def load_checkpoint(module: Module, directory: str) -> None:
    state = {}
    for manifest in (MANIFEST, BUFFER_MANIFEST):
        path = os.path.join(directory, manifest)
        if not os.path.exists(path):
            continue
        for name, fname in read_manifest(path).items():
            state[name] = load_tnsr(os.path.join(directory, fname))
    module.load_state_dict(state)
