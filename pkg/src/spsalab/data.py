"""Data preparation and evaluation: PNG / segmentation-map I/O, synthetic
fixtures, aligned cropping with bicubic LR synthesis, ratio-mixed batch
sampling, and PSNR/SSIM on the BT.601 Y channel."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .attention import CATEGORIES, N_CATEGORIES, SegProbMap
from .autodiff import ShapeError, bicubic_resize

SEGMAP_MAGIC = b"SPM1"
SCALE = 4


class FormatError(ValueError):
    """A file does not match its declared on-disk format."""


# ---------------------------------------------------------------------------
# Images

class ImageBuffer:
    """8-bit RGB raster with an exact float companion in [0, 1]."""

    def __init__(self, u8: np.ndarray):
        arr = np.asarray(u8)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ShapeError(f"image must be uint8 (H, W, 3), got {arr.dtype} "
                             f"{arr.shape}")
        self.u8 = arr

    @classmethod
    def from_float(cls, img: np.ndarray):
        img = np.asarray(img, dtype=np.float64)
        return cls(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8))

    @classmethod
    def load(cls, path):
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")))

    @property
    def float(self) -> np.ndarray:
        return self.u8.astype(np.float32) / np.float32(255.0)

    def save(self, path) -> None:
        Image.fromarray(self.u8, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """Float (H, W, 3) image in [0, 1]."""
    return ImageBuffer.load(path).float


def write_png(path, img: np.ndarray) -> None:
    ImageBuffer.from_float(img).save(path)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 limited-range luma of an (H, W, 3) image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_y: need (H, W, 3), got {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# ---------------------------------------------------------------------------
# Metrics (single-channel inputs)

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against a unit peak; identical
    inputs return the +inf sentinel."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"psnr: need matching 2-D rasters, got {a.shape}, {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    view = sliding_window_view(img, window.shape)
    return np.einsum("ijkl,kl->ij", view, window)


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over Gaussian-weighted valid windows."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim: need matching 2-D rasters, got {a.shape}, {b.shape}")
    if min(a.shape) < window_size:
        raise ShapeError(f"ssim: raster {a.shape} smaller than the "
                         f"{window_size}x{window_size} window")
    win = gaussian_window(window_size, sigma)
    c1, c2 = k1 * k1, k2 * k2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Segmentation-map file format and synthesis

def write_segmap(path, seg: SegProbMap) -> None:
    arr = np.ascontiguousarray(seg.data, dtype="<f4")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(SEGMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes())


def read_segmap(path) -> SegProbMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SEGMAP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"{path}: truncated header")
        h, w, c = struct.unpack("<III", header)
        if c != N_CATEGORIES:
            raise FormatError(f"{path}: {c} channels, expected {N_CATEGORIES}")
        payload = fh.read(4 * h * w * c)
        if len(payload) != 4 * h * w * c:
            raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    sums = arr.sum(axis=0)
    bad = np.abs(sums - 1.0) > 1e-3
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise FormatError(f"{path}: pixel ({y}, {x}) sums to {sums[y, x]:.6f}")
    return SegProbMap(arr)


@dataclass
class Region:
    """Declarative region: an axis-aligned rectangle or a half-plane.

    Rectangles use [y0, y1) x [x0, x1); half-planes keep axis >= at
    (side=+1) or axis < at (side=-1). soft_edge > 0 ramps the blend over
    that many pixels around the boundary.
    """

    category: str
    kind: str
    y0: int = 0
    x0: int = 0
    y1: int = 0
    x1: int = 0
    axis: str = "x"
    at: int = 0
    side: int = 1

    def mask(self, height: int, width: int, soft_edge: float = 0.0) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        if self.kind == "halfplane":
            coord = xx if self.axis == "x" else yy
            dist = (coord - self.at + 0.5) * (1 if self.side >= 0 else -1)
        elif self.kind == "rect":
            inside_y = np.minimum(yy - self.y0 + 0.5, self.y1 - 0.5 - yy)
            inside_x = np.minimum(xx - self.x0 + 0.5, self.x1 - 0.5 - xx)
            dist = np.minimum(inside_y, inside_x)
        else:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if soft_edge > 0:
            return np.clip(dist / soft_edge + 0.5, 0.0, 1.0)
        return (dist > 0).astype(np.float64)


def synth_segmap(height: int, width: int, regions=(), base: str = "background",
                 soft_edge: float = 0.0) -> SegProbMap:
    """Rasterize regions onto a base category; later regions composite over
    earlier ones, and per-pixel sums stay 1 by construction."""
    if base not in CATEGORIES:
        raise ValueError(f"unknown category {base!r}")
    weights = np.zeros((N_CATEGORIES, height, width), dtype=np.float64)
    weights[CATEGORIES.index(base)] = 1.0
    for region in regions:
        if region.category not in CATEGORIES:
            raise ValueError(f"unknown category {region.category!r}")
        m = region.mask(height, width, soft_edge)
        weights *= (1.0 - m)
        weights[CATEGORIES.index(region.category)] += m
    return SegProbMap(weights.astype(np.float32))


def _blocky_noise(rng, height, width, cell, amplitude):
    gh, gw = -(-height // cell), -(-width // cell)
    coarse = rng.uniform(-amplitude, amplitude, size=(gh, gw))
    return coarse.repeat(cell, axis=0)[:height].repeat(cell, axis=1)[:, :width]


def category_texture(category: str, height: int, width: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Deterministic (H, W, 3) texture keyed to one category."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = {
        "sky": (0.55, 0.70, 0.92), "mountain": (0.42, 0.38, 0.33),
        "plant": (0.13, 0.40, 0.17), "grass": (0.30, 0.55, 0.20),
        "water": (0.15, 0.35, 0.60), "animal": (0.55, 0.45, 0.30),
        "building": (0.55, 0.53, 0.50), "background": (0.45, 0.45, 0.45),
    }[category]
    if category == "sky":
        lum = 0.12 * (1.0 - yy / max(height - 1, 1)) + \
            0.01 * rng.standard_normal((height, width))
    elif category == "mountain":
        lum = 0.10 * np.sin(2 * np.pi * (yy + xx) / 16.0) + \
            _blocky_noise(rng, height, width, 4, 0.05)
    elif category == "plant":
        lum = _blocky_noise(rng, height, width, 3, 0.10)
    elif category == "grass":
        lum = 0.12 * rng.standard_normal((height, width))
    elif category == "water":
        lum = 0.08 * np.sin(2 * np.pi * yy / 8.0) + \
            0.02 * rng.standard_normal((height, width))
    elif category == "animal":
        lum = np.where(_blocky_noise(rng, height, width, 5, 1.0) > 0.45, -0.18, 0.06)
    elif category == "building":
        lum = np.where((yy % 8 < 1) | (xx % 16 < 1), -0.20, 0.04) + \
            0.01 * rng.standard_normal((height, width))
    else:
        lum = 0.05 * rng.standard_normal((height, width))
    img = np.asarray(base)[None, None, :] + lum[:, :, None]
    return np.clip(img, 0.0, 1.0)


def make_textured_image(seg: SegProbMap, rng: np.random.Generator) -> np.ndarray:
    """Blend category textures by the seg map's per-pixel probabilities."""
    h, w = seg.height, seg.width
    img = np.zeros((h, w, 3), dtype=np.float64)
    for c, name in enumerate(CATEGORIES):
        prob = seg.data[c]
        if prob.max() == 0:
            continue
        img += prob[:, :, None] * category_texture(name, h, w, rng)
    return np.clip(img, 0.0, 1.0)


def random_layout(height: int, width: int, rng: np.random.Generator):
    """A simple two-category region layout with 4-aligned boundaries."""
    cats = list(rng.choice(len(CATEGORIES) - 1, size=2, replace=False))
    a, b = CATEGORIES[cats[0]], CATEGORIES[cats[1]]
    kind = int(rng.integers(3))
    if kind == 0:
        at = 4 * int(rng.integers(2, width // 4 - 1))
        return a, [Region(category=b, kind="halfplane", axis="x", at=at)]
    if kind == 1:
        at = 4 * int(rng.integers(2, height // 4 - 1))
        return a, [Region(category=b, kind="halfplane", axis="y", at=at)]
    y0 = 4 * int(rng.integers(1, height // 8))
    x0 = 4 * int(rng.integers(1, width // 8))
    y1 = 4 * int(rng.integers(height // 8 + 1, height // 4))
    x1 = 4 * int(rng.integers(width // 8 + 1, width // 4))
    return a, [Region(category=b, kind="rect", y0=y0, x0=x0, y1=y1, x1=x1)]


def synthesize_dataset(directory, count: int, size: int = 96, seed: int = 0):
    """Write `count` textured PNG + seg-map pairs; returns (hr, seg) paths."""
    import os

    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        base, regions = random_layout(size, size, rng)
        seg = synth_segmap(size, size, regions, base=base)
        img = make_textured_image(seg, rng)
        hr_path = os.path.join(directory, f"img_{i:03d}.png")
        seg_path = os.path.join(directory, f"img_{i:03d}.spm")
        write_png(hr_path, img)
        write_segmap(seg_path, seg)
        pairs.append((hr_path, seg_path))
    return pairs


# ---------------------------------------------------------------------------
# Manifest and sampling

PRIMARY, AUX = "primary_set", "aux_set"


@dataclass
class ManifestEntry:
    hr_path: str
    seg_path: str
    tag: str


class DatasetManifest:
    """Image/seg-map pairs with a source tag and the sampling policy."""

    def __init__(self, entries, ratio=(10, 1), crop: int = 96, seed: int = 0):
        for e in entries:
            if e.tag not in (PRIMARY, AUX):
                raise ValueError(f"unknown source tag {e.tag!r}")
        if len(ratio) != 2 or ratio[0] <= 0 or ratio[1] < 0:
            raise ValueError(f"bad mixing ratio {ratio}")
        if crop % SCALE:
            raise ValueError(f"crop size {crop} must be divisible by {SCALE}")
        self.entries = list(entries)
        self.ratio = (int(ratio[0]), int(ratio[1]))
        self.crop = int(crop)
        self.seed = int(seed)

    def by_tag(self, tag: str):
        return [e for e in self.entries if e.tag == tag]

    def save(self, path) -> None:
        lines = [
            f"ratio={self.ratio[0]}:{self.ratio[1]}",
            f"crop={self.crop}",
            f"scale={SCALE}",
            f"seed={self.seed}",
        ]
        lines += [f"entry={e.tag}\t{e.hr_path}\t{e.seg_path}" for e in self.entries]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        fields = {}
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                if key == "entry":
                    parts = value.split("\t")
                    if len(parts) != 3:
                        raise FormatError(f"{path}:{lineno}: entry needs 3 fields")
                    entries.append(ManifestEntry(tag=parts[0], hr_path=parts[1],
                                                 seg_path=parts[2]))
                else:
                    fields[key] = value
        try:
            a, b = fields.get("ratio", "10:1").split(":")
            ratio = (int(a), int(b))
            crop = int(fields.get("crop", "96"))
            seed = int(fields.get("seed", "0"))
            scale = int(fields.get("scale", str(SCALE)))
        except ValueError as exc:
            raise FormatError(f"{path}: bad header field: {exc}") from None
        if scale != SCALE:
            raise FormatError(f"{path}: scale {scale} unsupported, expected {SCALE}")
        return cls(entries, ratio=ratio, crop=crop, seed=seed)

    def validate_files(self) -> None:
        for e in self.entries:
            img = read_png(e.hr_path)
            seg = read_segmap(e.seg_path)
            if img.shape[:2] != (seg.height, seg.width):
                raise FormatError(f"{e.hr_path}: image {img.shape[:2]} vs seg map "
                                  f"({seg.height}, {seg.width})")
            if min(img.shape[:2]) < self.crop:
                raise FormatError(f"{e.hr_path}: smaller than crop {self.crop}")


def _crop_aligned(hr: np.ndarray, seg: SegProbMap, crop: int,
                  rng: np.random.Generator):
    h, w = hr.shape[:2]
    if h < crop or w < crop:
        raise ShapeError(f"image {h}x{w} smaller than crop {crop}")
    oy = SCALE * int(rng.integers((h - crop) // SCALE + 1))
    ox = SCALE * int(rng.integers((w - crop) // SCALE + 1))
    hr_crop = hr[oy:oy + crop, ox:ox + crop]
    seg_crop = seg.data[:, oy:oy + crop, ox:ox + crop]
    hr_chw = np.ascontiguousarray(hr_crop.transpose(2, 0, 1), dtype=np.float32)
    lr = bicubic_resize(hr_chw, 1.0 / SCALE)
    return lr, hr_chw, np.ascontiguousarray(seg_crop)


def prepare_sample(hr: np.ndarray, seg: SegProbMap, crop: int, seed):
    """Aligned random crop (offsets multiples of 4) plus a bicubic /4 LR.

    Returns channels-first float32 arrays (lr, hr_crop, seg_crop).
    """
    if hr.shape[:2] != (seg.height, seg.width):
        raise ShapeError(f"image {hr.shape[:2]} vs seg map "
                         f"({seg.height}, {seg.width})")
    return _crop_aligned(hr, seg, crop, np.random.default_rng(seed))


class _Cache:
    def __init__(self):
        self.images = {}
        self.segs = {}

    def image(self, path):
        if path not in self.images:
            self.images[path] = read_png(path)
        return self.images[path]

    def seg(self, path):
        if path not in self.segs:
            self.segs[path] = read_segmap(path)
        return self.segs[path]


def sample_batch(manifest: DatasetManifest, batch_size: int,
                 rng: np.random.Generator, cache: _Cache | None = None):
    """Stacked (lr, hr, seg) batch; each sample's source is drawn with
    probability ratio[0]/(ratio[0]+ratio[1]) from the primary set."""
    cache = cache if cache is not None else _Cache()
    a, b = manifest.ratio
    p_primary = a / (a + b)
    primary = manifest.by_tag(PRIMARY)
    aux = manifest.by_tag(AUX)
    if not primary:
        raise ValueError("manifest has no primary_set entries")
    if b > 0 and not aux:
        raise ValueError(f"mixing ratio {a}:{b} demands aux_set entries")
    lrs, hrs, segs = [], [], []
    for _ in range(batch_size):
        pool = primary if (b == 0 or rng.random() < p_primary) else aux
        entry = pool[int(rng.integers(len(pool)))]
        lr, hr, seg = _crop_aligned(cache.image(entry.hr_path),
                                    cache.seg(entry.seg_path),
                                    manifest.crop, rng)
        lrs.append(lr)
        hrs.append(hr)
        segs.append(seg)
    return np.stack(lrs), np.stack(hrs), np.stack(segs)


def batch_cache() -> _Cache:
    return _Cache()
