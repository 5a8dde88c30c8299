"""Datasets: PPM/PGM codecs, class-per-directory trees, z-score
normalization, augmentation and a synthetic texture generator."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DatasetError, ParseError
from .layers import interpolation_matrix

logger = logging.getLogger(__name__)

ZSCORE_EPS = 1e-6
TINT_SATURATION = 0.1
TINT_JITTER = 0.06


@dataclass
class Dataset:
    """Images (N×3×H×W, float) with dense integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N×C×H×W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("labels must index class_names")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), split or self.split)


# ---------------------------------------------------------------------------
# PNM codecs
# ---------------------------------------------------------------------------

def _read_header(data: bytes, path) -> tuple[bytes, list[int], int]:
    """Return magic, [width, height, maxval] and the offset of the raster."""
    fields_: list[bytes] = []
    pos = 0
    n = len(data)
    while len(fields_) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ParseError(path, "truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        fields_.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ParseError(path, "missing whitespace after header")
    magic = fields_[0]
    try:
        dims = [int(f) for f in fields_[1:]]
    except ValueError:
        raise ParseError(path, "non-numeric header field") from None
    return magic, dims, pos + 1


def decode_pnm(data: bytes, path="<bytes>") -> np.ndarray:
    """Decode binary P5/P6 bytes into an H×W (P5) or H×W×3 (P6) float array in [0, 1]."""
    magic, (width, height, maxval), offset = _read_header(data, path)
    if magic not in (b"P5", b"P6"):
        raise ParseError(path, f"unsupported magic {magic!r} (binary P5/P6 only)")
    if width < 1 or height < 1:
        raise ParseError(path, f"invalid size {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise ParseError(path, f"invalid maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[offset:offset + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise ParseError(path, f"raster truncated: expected {count * dtype.itemsize} bytes, got {len(raster)}")
    values = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    if values.max(initial=0) > maxval:
        raise ParseError(path, "sample exceeds maxval")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape) / maxval


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as a 3×H×W array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    img = decode_pnm(data, path)
    if img.ndim != 3:
        raise ParseError(path, "expected a colour (P6) image")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def _to_bytes(values: np.ndarray) -> bytes:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    """3×H×W array in [0, 1] -> P6 bytes (maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"expected a 3×H×W image, got {img.shape}")
    _, h, w = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + _to_bytes(img.transpose(1, 2, 0))


def encode_pgm(image: np.ndarray) -> bytes:
    """H×W array in [0, 1] -> P5 bytes (maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractError(f"expected an H×W image, got {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + _to_bytes(img)


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def write_pgm(path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a C×H×W array (align-corners-false)."""
    c, h, w = image.shape
    H, W = size
    if (h, w) == (H, W):
        return image.copy()
    Ah = interpolation_matrix(h, H, np.float64)
    Aw = interpolation_matrix(w, W, np.float64)
    return np.einsum("Hh,chw,Ww->cHW", Ah, image, Aw)


# ---------------------------------------------------------------------------
# Directory trees
# ---------------------------------------------------------------------------

def _bytewise(names):
    return sorted(names, key=lambda s: s.encode("utf-8", "surrogateescape"))


def load_image_tree(root, size: int | tuple[int, int] | None = None) -> Dataset:
    """Load ``root/<class>/<name>.ppm``; classes are indexed in byte-wise sorted order."""
    if not os.path.isdir(root):
        raise DatasetError(f"{root}: not a directory")
    classes = _bytewise(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise DatasetError(f"{root}: no class directories")
    if isinstance(size, int):
        size = (size, size)
    images, labels = [], []
    for label, name in enumerate(classes):
        cdir = os.path.join(root, name)
        files = _bytewise(f for f in os.listdir(cdir) if f.lower().endswith(".ppm"))
        if not files:
            raise DatasetError(f"{cdir}: class directory contains no .ppm images")
        for fname in files:
            img = read_ppm(os.path.join(cdir, fname))
            if size is None:
                size = img.shape[1:]
            images.append(resize_bilinear(img, size))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), classes)


def write_image_tree(ds: Dataset, root) -> list[str]:
    """Write every sample as ``root/<class>/<index>.ppm`` (values clipped to [0, 1])."""
    paths = []
    for name in ds.class_names:
        os.makedirs(os.path.join(root, name), exist_ok=True)
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        path = os.path.join(root, ds.class_names[label], f"{i:05d}.ppm")
        write_ppm(path, img)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Z-score normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_kv(self) -> str:
        return (f"mean={','.join(repr(float(m)) for m in self.mean)}\n"
                f"std={','.join(repr(float(s)) for s in self.std)}\n")

    @classmethod
    def from_kv(cls, text: str) -> "NormStats":
        values = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                values[k.strip()] = tuple(float(x) for x in v.split(","))
        if "mean" not in values or "std" not in values:
            raise DatasetError("normalization stats need 'mean' and 'std' keys")
        return cls(values["mean"], values["std"])


def fit_zscore(train: Dataset) -> NormStats:
    """Per-channel mean and population std over every training pixel."""
    if len(train) == 0:
        raise DatasetError("cannot fit normalization on an empty training split")
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    if np.any(std < ZSCORE_EPS):
        logger.warning("channel(s) %s have ~zero variance; std floored to %g",
                       np.flatnonzero(std < ZSCORE_EPS).tolist(), ZSCORE_EPS)
        std = np.maximum(std, ZSCORE_EPS)
    return NormStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def apply_zscore(ds: Dataset, stats: NormStats) -> Dataset:
    m = np.asarray(stats.mean)[None, :, None, None]
    s = np.asarray(stats.std)[None, :, None, None]
    return replace(ds, images=(ds.images - m) / s)


def invert_zscore(ds: Dataset, stats: NormStats) -> Dataset:
    m = np.asarray(stats.mean)[None, :, None, None]
    s = np.asarray(stats.std)[None, :, None, None]
    return replace(ds, images=ds.images * s + m)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """3×H×W RGB in [0,1] -> HSV with hue in [0,1).

    V = max, S = (max - min) / max (0 when max = 0), and hue from the
    hexcone sector of the maximal channel.
    """
    r, g, b = img
    mx = img.max(axis=0)
    mn = img.min(axis=0)
    delta = mx - mn
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6.0, 0.0) % 1.0
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def flip_vertical(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def rotate90(img: np.ndarray, k: int = 1) -> np.ndarray:
    """Rotate counter-clockwise by k quarter turns (square images keep their shape)."""
    return np.rot90(img, k, axes=(1, 2)).copy()


def affine_warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse-map each output pixel through ``matrix`` (2×3, about the centre),
    bilinear sampling with edge replication."""
    c, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    pts = np.stack([xx.ravel() - cx, yy.ravel() - cy, np.ones(h * w)])
    src = matrix @ pts
    sx = np.clip(src[0] + cx, 0, w - 1)
    sy = np.clip(src[1] + cy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    out = (img[:, y0, x0] * (1 - fx) * (1 - fy) + img[:, y0, x1] * fx * (1 - fy)
           + img[:, y1, x0] * (1 - fx) * fy + img[:, y1, x1] * fx * fy)
    return out.reshape(c, h, w)


@dataclass(frozen=True)
class AugmentPolicy:
    """Probability and magnitude of each transform.

    Magnitudes are conservative defaults; every field is independent.
    Angles are in degrees, translation is a fraction of the image size,
    jitter amounts are maximum relative changes.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.0
    p_rotate: float = 0.3
    max_rotation: float = 15.0
    p_translate: float = 0.3
    max_translate: float = 0.1
    p_shear: float = 0.2
    max_shear: float = 10.0
    p_scale: float = 0.2
    scale_range: tuple[float, float] = (0.9, 1.1)
    p_hue: float = 0.2
    max_hue: float = 0.03
    p_saturation: float = 0.2
    max_saturation: float = 0.2
    p_contrast: float = 0.2
    max_contrast: float = 0.2
    p_brightness: float = 0.2
    max_brightness: float = 0.1
    p_noise: float = 0.2
    noise_std: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(**{f: 0.0 for f in cls.__dataclass_fields__ if f.startswith("p_")})


def augment(image: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Apply a random subset of transforms; output stays in [0, 1] with the input's shape."""
    img = np.asarray(image, dtype=np.float64)
    out = img.copy()
    if rng.random() < policy.p_hflip:
        out = flip_horizontal(out)
    if rng.random() < policy.p_vflip:
        out = flip_vertical(out)
    # geometric transforms compose into one inverse map
    inv = np.eye(2)
    shift = np.zeros(2)
    geometric = False
    if rng.random() < policy.p_rotate:
        a = math.radians(rng.uniform(-policy.max_rotation, policy.max_rotation))
        inv = inv @ np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
        geometric = True
    if rng.random() < policy.p_shear:
        sh = math.tan(math.radians(rng.uniform(-policy.max_shear, policy.max_shear)))
        inv = inv @ np.array([[1.0, -sh], [0.0, 1.0]])
        geometric = True
    if rng.random() < policy.p_scale:
        inv = inv / rng.uniform(*policy.scale_range)
        geometric = True
    if rng.random() < policy.p_translate:
        shift = -rng.uniform(-policy.max_translate, policy.max_translate, size=2) * np.array(out.shape[2:0:-1])
        geometric = True
    if geometric:
        out = affine_warp(out, np.hstack([inv, (inv @ shift)[:, None]]))
    do_hue = rng.random() < policy.p_hue
    do_sat = rng.random() < policy.p_saturation
    if do_hue or do_sat:
        hsv = rgb_to_hsv(np.clip(out, 0, 1))
        if do_hue:
            hsv[0] = (hsv[0] + rng.uniform(-policy.max_hue, policy.max_hue)) % 1.0
        if do_sat:
            hsv[1] = np.clip(hsv[1] * (1 + rng.uniform(-policy.max_saturation, policy.max_saturation)), 0, 1)
        out = hsv_to_rgb(hsv)
    if rng.random() < policy.p_contrast:
        m = out.mean()
        out = (out - m) * (1 + rng.uniform(-policy.max_contrast, policy.max_contrast)) + m
    if rng.random() < policy.p_brightness:
        out = out + rng.uniform(-policy.max_brightness, policy.max_brightness)
    if rng.random() < policy.p_noise:
        out = out + rng.normal(0.0, policy.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def sample_rng(seed: int, index: int, epoch: int = 0) -> np.random.Generator:
    """Per-sample stream: generator seeded with (seed XOR index, epoch)."""
    return np.random.default_rng([int(seed) ^ int(index), int(epoch)])


def augment_dataset(ds: Dataset, seed: int, policy: AugmentPolicy, epoch: int = 0) -> Dataset:
    """Runtime (per-epoch) augmentation of every sample."""
    images = np.stack([augment(img, sample_rng(seed, i, epoch), policy) for i, img in enumerate(ds.images)])
    return replace(ds, images=images)


def expand_dataset(ds: Dataset, copies: int, seed: int, policy: AugmentPolicy) -> Dataset:
    """Offline expansion: originals followed by ``copies`` augmented variants of each."""
    parts = [ds.images] + [augment_dataset(ds, seed, policy, epoch=c + 1).images for c in range(copies)]
    labels = np.concatenate([ds.labels] * (copies + 1))
    return Dataset(np.concatenate(parts), labels, list(ds.class_names), ds.split)


# ---------------------------------------------------------------------------
# Synthetic textures
# ---------------------------------------------------------------------------

def _class_tints(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes) / num_classes
    hsv = np.stack([hues, np.full(num_classes, TINT_SATURATION), np.full(num_classes, 0.9)])
    return hsv_to_rgb(hsv.reshape(3, num_classes, 1))[:, :, 0].T


def synth_dataset(num_classes: int = 4, per_class: int = 100, size: int = 32, seed: int = 82) -> Dataset:
    """Class-conditional textures: oriented stripes, blob density and a colour tint.

    Class c has stripe angle c*pi/num_classes (jittered), 1 + 2c Gaussian
    blobs on average and a hue at c/num_classes; phase, frequency, blob
    positions and pixel noise vary per sample. Each sample draws from its
    own stream (seed XOR index), so the dataset is a pure function of the
    arguments.
    """
    if not 2 <= num_classes <= 8:
        raise ContractError(f"num_classes must be in 2..8, got {num_classes}")
    if per_class < 1 or size < 4:
        raise ContractError("per_class must be >= 1 and size >= 4")
    tints = _class_tints(num_classes)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    images = np.empty((num_classes * per_class, 3, size, size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, c in enumerate(labels):
        rng = sample_rng(seed, i)
        angle = c * math.pi / num_classes + rng.normal(0, 0.12)
        freq = rng.uniform(2.5, 4.0)
        phase = rng.uniform(0, 2 * math.pi)
        stripes = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
        blobs = np.zeros((size, size))
        for _ in range(rng.poisson(1 + 2 * c)):
            cy, cx = rng.uniform(-0.8, 0.8, size=2)
            r = rng.uniform(0.1, 0.25)
            blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        luminance = 0.25 + 0.45 * stripes + 0.3 * np.minimum(blobs, 1.0)
        tint = tints[c] + rng.normal(0, TINT_JITTER, size=3)
        img = luminance[None] * tint[:, None, None] + rng.normal(0, 0.08, size=(3, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    names = [f"class{c}" for c in range(num_classes)]
    return Dataset(images, labels, names, "synthetic")


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a raw-pixel nearest-class-mean classifier (baseline oracle)."""
    flat = train.images.reshape(len(train), -1)
    centroids = np.stack([flat[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    t = test.images.reshape(len(test), -1)
    d = ((t[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))
