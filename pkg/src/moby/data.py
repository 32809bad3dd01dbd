"""Datasets, the raw dataset file format, and seeded two-view augmentation.

Every random draw comes from a generator seeded by ``(seed, epoch, index,
stream)``, so a view's content depends only on those four numbers: batch
order, worker count and the order in which views are generated cannot
change it.
"""
import math
import queue
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"MBDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIHBB")

STREAM_EVAL = 3
STREAM_SHUFFLE = 4
STREAM_PROBE = 5


def substream(seed, epoch, index, stream):
    return np.random.default_rng([int(seed), int(epoch), int(index), int(stream)])


def policy_stream(policy):
    """Substream id of an augmentation policy, derived from its name."""
    return zlib.crc32(policy.name.encode()) | 0x100000000


@dataclass
class ImageRecord:
    pixels: np.ndarray
    label: int = None


class Dataset:
    """Images ``[n, c, s, s]`` (float32 in [0, 1]) with optional labels."""

    def __init__(self, images, labels=None, name="custom"):
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ConfigError(f"images must be [n, c, s, s], got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ConfigError("pixel values must lie in [0, 1]")
        self.images = images
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.labels is not None and self.labels.shape != (len(images),):
            raise ConfigError("need exactly one label per image")
        self.name = name

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        label = None if self.labels is None else int(self.labels[i])
        return ImageRecord(self.images[i], label)

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def num_classes(self):
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, indices, name=None):
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.images[indices], labels, name or self.name)

    def split(self, test_fraction, seed=0):
        """Deterministic shuffled train/test split."""
        order = np.random.default_rng([seed, 0x5917]).permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


# --------------------------------------------------------------------------
# builtin datasets

SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar", "xcross", "frame")


def _shape_mask(kind, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    t = max(1.5, r / 3.0)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (ady <= r * 0.85) & (adx <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (adx <= (dy + r) * 0.6)
    if kind == "plus":
        return ((ady <= t) & (adx <= r)) | ((adx <= t) & (ady <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r - t) ** 2)
    if kind == "diamond":
        return ady + adx <= r
    if kind == "hbar":
        return (ady <= t) & (adx <= r)
    if kind == "vbar":
        return (adx <= t) & (ady <= r)
    if kind == "xcross":
        return ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (ady <= r * 0.8) & (adx <= r * 0.8)
    if kind == "frame":
        inner = r * 0.85 - t
        return (ady <= r * 0.85) & (adx <= r * 0.85) & ~((ady < inner) & (adx < inner))
    raise ConfigError(f"unknown shape {kind!r}")


# Fixed palette of muted colors: color stays a nuisance variable, but with
# few distinct values it cannot identify an individual image.
PALETTE = np.array([
    [0.129, 0.499, 0.601], [0.029, 0.148, 0.928], [0.070, 0.130, 0.948],
    [0.622, 0.369, 0.511], [0.663, 0.275, 0.138], [0.788, 0.670, 0.512],
])


def _contrasting_colors(rng, palette=None):
    while True:
        if palette is None:
            fg, bg = rng.random(3), rng.random(3)
        else:
            i, j = rng.integers(0, len(palette), 2)
            fg, bg = palette[i], palette[j]
        if np.abs(fg - bg).sum() > 0.6:
            return fg, bg


def synthetic_shapes(num_classes=8, count=512, size=32, seed=7, noise=0.03, radius=(0.18, 0.34),
                     palette=6):
    """Colored geometric shapes; the label is the shape.

    Position, scale (``radius`` as a fraction of the image size) and both
    colors are nuisance variables.  Colors come from the first ``palette``
    entries of ``PALETTE``; ``palette=None`` draws them uniformly instead.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ConfigError(f"synthetic_shapes supports 2..{len(SHAPES)} classes, got {num_classes}")
    if palette is not None and not 2 <= palette <= len(PALETTE):
        raise ConfigError(f"palette must be None or 2..{len(PALETTE)}, got {palette}")
    colors = None if palette is None else PALETTE[:palette]
    rng = np.random.default_rng([seed, 0x5A7E])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.arange(count) % num_classes
    labels = labels[rng.permutation(count)]
    for i, label in enumerate(labels):
        r = rng.uniform(*radius) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(SHAPES[label], yy, xx, cy, cx, r)
        fg, bg = _contrasting_colors(rng, colors)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, name="synthetic_shapes")


TEXTURES = ("grating0", "grating45", "grating90", "grating135", "checker", "blobs", "dots", "rings")


def tiny_natural(num_classes=8, count=512, size=32, seed=7):
    """Procedural texture classes (oriented gratings, checkers, blobs, dots, rings).

    Frequency, phase and colors are nuisance variables.
    """
    if not 2 <= num_classes <= len(TEXTURES):
        raise ConfigError(f"tiny_natural supports 2..{len(TEXTURES)} classes, got {num_classes}")
    rng = np.random.default_rng([seed, 0x7E47])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = (np.arange(count) % num_classes)[rng.permutation(count)]
    for i, label in enumerate(labels):
        kind = TEXTURES[label]
        freq = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        if kind.startswith("grating"):
            theta = np.deg2rad(float(kind[len("grating"):]))
            u = np.cos(theta) * xx + np.sin(theta) * yy
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + phase)
        elif kind == "checker":
            pattern = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy))
        elif kind == "blobs":
            coarse = rng.random((4, 4))
            pattern = np.kron(coarse, np.ones((size // 4, size // 4)))[:size, :size]
        elif kind == "dots":
            pattern = ((np.sin(2 * np.pi * freq * xx + phase) > 0.7)
                       & (np.sin(2 * np.pi * freq * yy + phase) > 0.7)).astype(np.float64)
        else:
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            pattern = 0.5 + 0.5 * np.sin(2 * np.pi * freq * np.hypot(yy - cy, xx - cx) + phase)
        fg, bg = _contrasting_colors(rng)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * pattern[None]
        img = img + 0.03 * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, name="tiny_natural")


BUILTIN = {"synthetic_shapes": synthetic_shapes, "tiny_natural": tiny_natural}


def load_dataset(source, **kwargs):
    """A builtin id (``synthetic_shapes``/``tiny_natural``) or a dataset file path."""
    if isinstance(source, str) and source in BUILTIN:
        return BUILTIN[source](**kwargs)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"dataset {source!r} is neither a builtin id nor an existing file")
    return read_dataset(path)


# --------------------------------------------------------------------------
# raw file format

def write_dataset(path, dataset):
    """Little-endian: header then ``count`` records of float32 pixels (+ u16 label)."""
    n, c, s, s2 = dataset.images.shape
    if s != s2:
        raise ConfigError("dataset images must be square")
    has_labels = dataset.labels is not None
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, s, c, int(has_labels))
    rec = _record_dtype(c, s, has_labels)
    records = np.empty(n, dtype=rec)
    records["pixels"] = dataset.images.reshape(n, -1)
    if has_labels:
        records["label"] = dataset.labels
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def _record_dtype(channels, size, has_labels):
    fields = [("pixels", "<f4", (channels * size * size,))]
    if has_labels:
        fields.append(("label", "<u2"))
    return np.dtype(fields)


def read_dataset(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header ({len(blob)} of {_HEADER.size} bytes)", offset=len(blob))
    magic, version, count, size, channels, label_flag = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if label_flag not in (0, 1):
        raise FormatError(f"label flag must be 0 or 1, got {label_flag}", offset=15)
    rec = _record_dtype(channels, size, bool(label_flag))
    body = len(blob) - _HEADER.size
    complete = body // rec.itemsize
    if complete < count:
        offset = _HEADER.size + complete * rec.itemsize
        raise FormatError(f"header declares {count} records but only {complete} are complete", offset=offset)
    if body > count * rec.itemsize:
        raise FormatError("trailing bytes after the declared records", offset=_HEADER.size + count * rec.itemsize)
    records = np.frombuffer(blob, dtype=rec, count=count, offset=_HEADER.size)
    images = records["pixels"].reshape(count, channels, size, size).astype(np.float32)
    labels = records["label"].astype(np.int64) if label_flag else None
    return Dataset(images, labels, name=Path(path).stem)


# --------------------------------------------------------------------------
# augmentation primitives (single image, [c, h, w])

def resize_bilinear(img, out_h, out_w):
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    rows = img[:, y0] * (1 - fy)[None, :, None] + img[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def sample_crop(h, w, scale, ratio, rng, attempts=10):
    """Crop box ``(top, left, height, width)`` with area fraction in ``scale``."""
    area = h * w
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(img, scale=(0.08, 1.0), out_size=None, rng=None, ratio=(3 / 4, 4 / 3)):
    if not (0 < scale[0] <= scale[1] <= 1):
        raise ConfigError(f"crop scale range must lie within (0, 1], got {scale}")
    _, h, w = img.shape
    out_size = out_size or h
    top, left, ch, cw = sample_crop(h, w, scale, ratio, rng)
    return resize_bilinear(img[:, top:top + ch, left:left + cw], out_size, out_size)


def center_crop(img, out_size, resize_ratio=1.14):
    """Resize to ``resize_ratio * out_size`` and take the central square."""
    big = int(round(out_size * resize_ratio))
    img = resize_bilinear(img, big, big)
    off = (big - out_size) // 2
    return img[:, off:off + out_size, off:off + out_size]


_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def grayscale(img):
    g = np.tensordot(_LUMA, img, axes=1)
    return np.broadcast_to(g, img.shape).copy()


def _rotate_hue(img, shift):
    """Rotate chroma in YIQ space by ``shift`` turns."""
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    angle = 2 * np.pi * shift
    cos, sin = math.cos(angle), math.sin(angle)
    rot = np.array([[1, 0, 0], [0, cos, -sin], [0, sin, cos]])
    mat = (np.linalg.inv(to_yiq) @ rot @ to_yiq).astype(img.dtype)
    return np.tensordot(mat, img, axes=1)


def color_jitter(img, rng, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1):
    b = rng.uniform(1 - brightness, 1 + brightness)
    c = rng.uniform(1 - contrast, 1 + contrast)
    s = rng.uniform(1 - saturation, 1 + saturation)
    h = rng.uniform(-hue, hue)
    img = np.clip(img * b, 0, 1)
    mean = grayscale(img).mean()
    img = np.clip((img - mean) * c + mean, 0, 1)
    gray = grayscale(img)
    img = np.clip(gray + (img - gray) * s, 0, 1)
    return np.clip(_rotate_hue(img, h), 0, 1)


def gaussian_blur(img, sigma, kernel=3):
    half = kernel // 2
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    taps = (taps / taps.sum()).astype(img.dtype)
    pad = np.pad(img, ((0, 0), (half, half), (0, 0)), mode="reflect")
    img = sum(taps[i] * pad[:, i:i + img.shape[1]] for i in range(kernel))
    pad = np.pad(img, ((0, 0), (0, 0), (half, half)), mode="reflect")
    return sum(taps[i] * pad[:, :, i:i + img.shape[2]] for i in range(kernel))


def solarize(img, threshold=0.5):
    return np.where(img < threshold, img, 1.0 - img)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Stochastic pipeline: crop, flip, jitter, grayscale, blur, solarize."""

    name: str = "view1"
    scale: tuple = (0.08, 1.0)
    ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 1.0
    blur_kernel: int = 3
    solarize_p: float = 0.0

    def validate(self):
        if not (0 < self.scale[0] <= self.scale[1] <= 1):
            raise ConfigError(f"{self.name}: crop scale must lie within (0, 1], got {self.scale}")
        for field_name in ("flip_p", "jitter_p", "grayscale_p", "blur_p", "solarize_p"):
            p = getattr(self, field_name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{self.name}: {field_name} must be a probability, got {p}")
        return self

    def apply(self, img, rng, out_size=None):
        img = random_resized_crop(img, self.scale, out_size, rng, self.ratio)
        u = rng.random(5)
        if u[0] < self.flip_p:
            img = img[:, :, ::-1]
        if u[1] < self.jitter_p:
            img = color_jitter(img, rng, self.brightness, self.contrast, self.saturation, self.hue)
        if u[2] < self.grayscale_p:
            img = grayscale(img)
        if u[3] < self.blur_p:
            img = gaussian_blur(img, rng.uniform(0.1, 2.0), self.blur_kernel)
        if u[4] < self.solarize_p:
            img = solarize(img)
        return np.ascontiguousarray(img, dtype=np.float32)


def default_policies(solarize=True):
    """BYOL-style asymmetric pair: view 1 always blurred, view 2 rarely blurred and solarized."""
    return (AugmentationPolicy("view1", blur_p=1.0, solarize_p=0.0),
            AugmentationPolicy("view2", blur_p=0.1, solarize_p=0.2 if solarize else 0.0))


def probe_policy():
    """Train-time augmentation for the linear probe: crop and flip only."""
    return AugmentationPolicy("probe", jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, solarize_p=0.0)


@dataclass(frozen=True)
class NormStats:
    mean: tuple
    std: tuple

    def apply(self, img):
        mean = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return (img - mean) / std


def channel_stats(dataset):
    """Per-channel mean and standard deviation of the raw pixels."""
    imgs = dataset.images.astype(np.float64)
    mean = imgs.mean(axis=(0, 2, 3))
    std = imgs.std(axis=(0, 2, 3))
    return NormStats(tuple(float(m) for m in mean), tuple(float(max(s, 1e-6)) for s in std))


@dataclass
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray
    index: int


def two_view_augment(image, policies, stats, seed, epoch, index):
    """Two independently augmented, normalised views of one image.

    Each view draws from the substream of its policy name, so swapping the
    policies swaps the views and nothing else.
    """
    p1, p2 = policies
    if p1.name == p2.name:
        raise ConfigError(f"the two view policies need distinct names, both are {p1.name!r}")
    v1 = stats.apply(p1.apply(image, substream(seed, epoch, index, policy_stream(p1))))
    v2 = stats.apply(p2.apply(image, substream(seed, epoch, index, policy_stream(p2))))
    return ViewPair(v1, v2, index)


def epoch_order(n, seed, epoch):
    return substream(seed, epoch, 0, STREAM_SHUFFLE).permutation(n)


def iterate_view_batches(dataset, batch_size, seed, epoch, policies, stats, start_batch=0):
    """Yield ``(v1, v2, indices)`` batches for one epoch; the last partial batch is dropped."""
    order = epoch_order(len(dataset), seed, epoch)
    for b in range(start_batch, len(dataset) // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        pairs = [two_view_augment(dataset.images[i], policies, stats, seed, epoch, i) for i in idx]
        yield np.stack([p.v1 for p in pairs]), np.stack([p.v2 for p in pairs]), idx


def prefetch(iterable, depth=2):
    """Run ``iterable`` on a worker thread, delivering items through a bounded queue."""
    channel = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in iterable:
                channel.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            channel.put(exc)
        channel.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = channel.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
