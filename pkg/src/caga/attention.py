"""Cascaded atrous attention inside cascaded group attention.

Data flow for one block (channels first, batch axis optional)::

    x (C_in) --DSConv--> X (n*h) --split--> heads X_1..X_n
    head i input:   X_i (+ output of head i-1 when cascade_heads)
    per head, per dilation d (in order):
        branch input = head input (+ interp(Proj_d(Attn_prev)) when cascade_dilations)
        dilated kxk conv -> 1x1 -> Q, K, V  (d_qkv x S each, S = H~ * W~)
        Attn_d = attention(Q, K, V), reshaped to d_qkv x H~ x W~, resized to H x W
    head output = 1x1 proj(concat over dilations)       (len(dilations)*d_qkv -> h)
    X^ = X + 1x1 proj(concat over heads)                 (n*h -> n*h)
    y = BatchNorm(X^)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    DEFAULT_SEED,
    BatchNorm2d,
    Conv2d,
    ConvSpec,
    DepthwiseSeparableConv,
    Module,
    _batched,
    _unbatched,
    effective_kernel_size,
    interpolate_bilinear,
)
from .tensor import Tensor, add, concat, matmul, reshape, scale, slice_axis, softmax_rows, transpose


@dataclass(frozen=True)
class CaaConfig:
    head_dim: int = 16
    d_qkv: int = 8
    dilations: tuple[int, ...] = (1, 2, 3)
    kernel: int = 3
    stride: int = 1
    cascade_dilations: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.dilations:
            raise ConfigError("at least one dilation rate is required")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilation rates must be positive, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilation rates must be strictly increasing, got {self.dilations}")
        for name in ("head_dim", "d_qkv", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def max_k_eff(self) -> int:
        return effective_kernel_size(self.kernel, self.dilations[-1])


@dataclass(frozen=True)
class CagaConfig:
    num_heads: int = 3
    caa: CaaConfig = field(default_factory=CaaConfig)
    cascade_heads: bool = True
    dsconv_kernel: int = 3

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError("num_heads must be at least 1")
        if self.dsconv_kernel < 1 or self.dsconv_kernel % 2 == 0:
            raise ConfigError("dsconv_kernel must be a positive odd integer")

    @property
    def channels(self) -> int:
        return self.num_heads * self.caa.head_dim

    def with_toggles(self, cascade_dilations: bool | None = None, cascade_heads: bool | None = None) -> "CagaConfig":
        caa = self.caa if cascade_dilations is None else replace(self.caa, cascade_dilations=cascade_dilations)
        heads = self.cascade_heads if cascade_heads is None else cascade_heads
        return replace(self, caa=caa, cascade_heads=heads)


@dataclass
class AttentionTriple:
    """Per-dilation query/key/value matrices, each ``[..., d_qkv, S]``."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ShapeError(f"Q/K/V shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")

    @property
    def d_qkv(self) -> int:
        return self.q.shape[-2]

    @property
    def positions(self) -> int:
        return self.q.shape[-1]


def attention_weights(t: AttentionTriple) -> Tensor:
    """Row j holds the softmax weights query position j puts on every key."""
    logits = scale(matmul(transpose(t.q), t.k), 1.0 / math.sqrt(t.d_qkv))
    return softmax_rows(logits)


def scaled_dot_attention(t: AttentionTriple, return_weights: bool = False):
    """Softmax attention over the S spatial positions; output is ``d_qkv x S``."""
    weights = attention_weights(t)
    out = matmul(t.v, transpose(weights))
    return (out, weights) if return_weights else out


class CaaHead(Module):
    """Parameters of one head's cascaded atrous attention."""

    def __init__(self, cfg: CaaConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        h, dq, k = cfg.head_dim, cfg.d_qkv, cfg.kernel
        for j, d in enumerate(cfg.dilations):
            setattr(self, f"qkv{j}", Conv2d(ConvSpec(h, 3 * dq, k, cfg.stride, d, "valid", bias=False), rng))
            setattr(self, f"transform{j}", Conv2d(ConvSpec(3 * dq, 3 * dq, 1, 1, 1, "valid", bias=False), rng))
            if j > 0 and cfg.cascade_dilations:
                setattr(self, f"cascade{j}", Conv2d(ConvSpec(dq, h, 1, 1, 1, "valid", bias=True), rng))
        self.out_proj = Conv2d(ConvSpec(len(cfg.dilations) * dq, h, 1, 1, 1, "valid", bias=True), rng)

    def forward(self, x: Tensor) -> Tensor:
        return caa_forward(x, self.cfg, self)


def caa_forward(head_input: Tensor, cfg: CaaConfig, params: CaaHead, record: list | None = None) -> Tensor:
    """One head of cascaded atrous attention; maps h×H×W to h×H×W.

    ``record``, when given, receives each branch's attention weights.
    """
    x, squeeze = _batched(head_input)
    B, C, H, W = x.shape
    if C != cfg.head_dim:
        raise ShapeError(f"head input has {C} channels, expected head_dim={cfg.head_dim}")
    for d in cfg.dilations:
        k_eff = effective_kernel_size(cfg.kernel, d)
        if min(H, W) < k_eff:
            raise ShapeError(f"spatial extent {H}x{W} is smaller than the effective kernel {k_eff} "
                             f"of dilation {d} (k={cfg.kernel})")
    dq = cfg.d_qkv
    prev = None
    maps = []
    for j, d in enumerate(cfg.dilations):
        branch = x
        if j > 0 and cfg.cascade_dilations:
            projected = getattr(params, f"cascade{j}")(prev)
            branch = add(x, interpolate_bilinear(projected, (H, W)))
        qkv = getattr(params, f"transform{j}")(getattr(params, f"qkv{j}")(branch))
        Ht, Wt = qkv.shape[-2:]
        flat = reshape(qkv, (B, 3 * dq, Ht * Wt))
        triple = AttentionTriple(slice_axis(flat, 1, 0, dq), slice_axis(flat, 1, dq, 2 * dq),
                                 slice_axis(flat, 1, 2 * dq, 3 * dq))
        attn, weights = scaled_dot_attention(triple, return_weights=True)
        if record is not None:
            record.append(weights)
        prev = reshape(attn, (B, dq, Ht, Wt))
        maps.append(interpolate_bilinear(prev, (H, W)))
    out = params.out_proj(concat(maps, axis=1))
    return _unbatched(out, squeeze)


class CgaParams(Module):
    def __init__(self, cfg: CagaConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        for i in range(cfg.num_heads):
            setattr(self, f"head{i}", CaaHead(cfg.caa, rng))
        self.proj = Conv2d(ConvSpec(cfg.channels, cfg.channels, 1, 1, 1, "valid", bias=True), rng)

    def heads(self) -> list[CaaHead]:
        return [getattr(self, f"head{i}") for i in range(self.cfg.num_heads)]

    def forward(self, x: Tensor) -> Tensor:
        return cga_forward(x, self.cfg, self)


def cga_forward(x: Tensor, cfg: CagaConfig, params: CgaParams, record: list | None = None) -> Tensor:
    """Cascaded group attention with residual: X + Proj(concat of head outputs)."""
    xb, squeeze = _batched(x)
    if xb.shape[1] != cfg.channels:
        raise ConfigError(f"input has {xb.shape[1]} channels but num_heads*head_dim = {cfg.channels}")
    h = cfg.caa.head_dim
    outputs = []
    prev = None
    for i, head in enumerate(params.heads()):
        head_in = slice_axis(xb, 1, i * h, (i + 1) * h)
        if prev is not None and cfg.cascade_heads:
            head_in = add(head_in, prev)
        prev = caa_forward(head_in, cfg.caa, head, record)
        outputs.append(prev)
    y = add(xb, params.proj(concat(outputs, axis=1)))
    return _unbatched(y, squeeze)


class CagaBlock(Module):
    """DSConv input reduction, cascaded group attention, batch norm."""

    def __init__(self, in_channels: int, cfg: CagaConfig | None = None,
                 rng: np.random.Generator | None = None, seed: int = DEFAULT_SEED):
        super().__init__()
        cfg = cfg or CagaConfig()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.in_channels = in_channels
        self.dsconv = DepthwiseSeparableConv(in_channels, cfg.channels, rng, kernel=cfg.dsconv_kernel)
        self.cga = CgaParams(cfg, rng)
        self.bn = BatchNorm2d(cfg.channels)

    def forward(self, x: Tensor, record: list | None = None) -> Tensor:
        return caga_block(x, self.cfg, self, record)


def caga_block(x: Tensor, cfg: CagaConfig, params: CagaBlock, record: list | None = None) -> Tensor:
    return params.bn(cga_forward(params.dsconv(x), cfg, params.cga, record))


def caga_param_count(cfg: CagaConfig, in_channels: int) -> int:
    """Closed-form number of trainable scalars in a :class:`CagaBlock`."""
    caa = cfg.caa
    h, dq, k, m = caa.head_dim, caa.d_qkv, caa.kernel, len(caa.dilations)
    qkv = m * (3 * dq * h * k * k)
    transform = m * (3 * dq) ** 2
    cascade = (m - 1) * (dq * h + h) if caa.cascade_dilations else 0
    head_out = m * dq * h + h
    per_head = qkv + transform + cascade + head_out
    c = cfg.channels
    final_proj = c * c + c
    kd = cfg.dsconv_kernel
    dsconv = in_channels * kd * kd + in_channels + in_channels * c + c
    bn = 2 * c
    return dsconv + cfg.num_heads * per_head + final_proj + bn


def cascade_projection_count(cfg: CagaConfig) -> int:
    """Parameters owned by the inter-dilation 1×1 projections alone."""
    caa = cfg.caa
    if not caa.cascade_dilations:
        return 0
    return cfg.num_heads * (len(caa.dilations) - 1) * (caa.d_qkv * caa.head_dim + caa.head_dim)


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

CONFIG_KEYS = ("num_heads", "head_dim", "d_qkv", "dilations", "kernel", "stride",
               "cascade_dilations", "cascade_heads")


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(values: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k}={fmt(v)}\n" for k, v in values.items())


def caga_config_to_kv(cfg: CagaConfig) -> dict:
    return {
        "num_heads": cfg.num_heads,
        "head_dim": cfg.caa.head_dim,
        "d_qkv": cfg.caa.d_qkv,
        "dilations": cfg.caa.dilations,
        "kernel": cfg.caa.kernel,
        "stride": cfg.caa.stride,
        "cascade_dilations": cfg.caa.cascade_dilations,
        "cascade_heads": cfg.cascade_heads,
        "dsconv_kernel": cfg.dsconv_kernel,
    }


def caga_config_from_kv(values: dict[str, str], base: CagaConfig | None = None) -> CagaConfig:
    """Build a config from parsed key=value pairs; unknown keys are ignored."""
    base = base or CagaConfig()
    try:
        caa_kwargs = {f.name: getattr(base.caa, f.name) for f in fields(CaaConfig)}
        if "head_dim" in values:
            caa_kwargs["head_dim"] = int(values["head_dim"])
        if "d_qkv" in values:
            caa_kwargs["d_qkv"] = int(values["d_qkv"])
        if "dilations" in values:
            raw = values["dilations"].strip()
            caa_kwargs["dilations"] = tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if "kernel" in values:
            caa_kwargs["kernel"] = int(values["kernel"])
        if "stride" in values:
            caa_kwargs["stride"] = int(values["stride"])
        if "cascade_dilations" in values:
            caa_kwargs["cascade_dilations"] = parse_bool(values["cascade_dilations"])
        num_heads = int(values.get("num_heads", base.num_heads))
        cascade_heads = parse_bool(values["cascade_heads"]) if "cascade_heads" in values else base.cascade_heads
        dsk = int(values.get("dsconv_kernel", base.dsconv_kernel))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return CagaConfig(num_heads, CaaConfig(**caa_kwargs), cascade_heads, dsk)
