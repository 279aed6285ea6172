"""Synthetic fine-grained images with planted glyphs, their binary container and multi-crop views."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import RunConfig, SyntheticSpec
from .encoder import CropView, check_divisible, patchify_array
from .errors import FormatError

log = logging.getLogger(__name__)

DATA_MAGIC = b"CMDD"
DATA_VERSION = 1
DATA_FILE = "dataset.bin"
MANIFEST_FILE = "manifest.txt"


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x 3
    fine: np.ndarray
    coarse: np.ndarray
    boxes: np.ndarray  # N x 4 (x, y, w, h) of the glyph

    def __len__(self) -> int:
        return len(self.fine)

    def glyph_mask(self, i: int) -> np.ndarray:
        h, w = self.images.shape[1:3]
        m = np.zeros((h, w))
        x, y, gw, gh = self.boxes[i]
        m[y : y + gh, x : x + gw] = 1.0
        return m

    def split(self) -> np.ndarray:
        """Deterministic stratified split: alternate samples of each class go to test."""
        tags = np.empty(len(self), dtype=object)
        for c in np.unique(self.fine):
            idx = np.flatnonzero(self.fine == c)
            tags[idx] = np.where(np.arange(len(idx)) % 2 == 0, "train", "test")
        return tags

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.images[mask], self.fine[mask], self.coarse[mask], self.boxes[mask])


# generation ----------------------------------------------------------------


def glyph_patterns(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct binary ``size x size`` patterns, each roughly half on."""
    out: list[np.ndarray] = []
    seen: set[bytes] = set()
    while len(out) < n:
        g = (rng.random((size, size)) < 0.5).astype(np.float64)
        key = g.tobytes()
        if key in seen or g.sum() in (0, size * size):
            continue
        seen.add(key)
        out.append(g)
    return np.stack(out)


def background(coarse: int, px: int) -> np.ndarray:
    """Deterministic striped texture; orientation and palette depend on the coarse label."""
    yy, xx = np.mgrid[0:px, 0:px].astype(np.float64)
    angle = np.pi * (0.15 + 0.55 * coarse)
    period = 11.0 + 3.0 * coarse
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period)
    palettes = np.array([[0.55, 0.35, 0.25], [0.25, 0.45, 0.55], [0.4, 0.5, 0.3], [0.5, 0.3, 0.5]])
    base = palettes[coarse % len(palettes)]
    return np.clip(base[None, None, :] * (0.6 + 0.6 * wave[..., None]), 0.0, 1.0)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Fine class ``c`` sits on coarse background ``c % n_coarse``; classes sharing a
    background differ only by the glyph pattern. The glyph is drawn black/white at a
    uniformly random position."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    px, g = spec.image_px, spec.glyph_px
    patterns = glyph_patterns(spec.n_fine_classes, g, rng)
    backgrounds = [background(c, px) for c in range(spec.n_coarse_backgrounds)]
    n = spec.n_fine_classes * spec.samples_per_class
    images = np.empty((n, px, px, 3), dtype=np.float32)
    fine = np.empty(n, dtype=np.int64)
    coarse = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    i = 0
    for k in range(spec.samples_per_class):
        for c in range(spec.n_fine_classes):
            cc = c % spec.n_coarse_backgrounds
            x, y = rng.integers(0, px - g + 1, size=2)
            img = backgrounds[cc].copy()
            img[y : y + g, x : x + g, :] = patterns[c][..., None]
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            fine[i], coarse[i] = c, cc
            boxes[i] = (x, y, g, g)
            i += 1
    return Dataset(images.astype(np.float64), fine, coarse, boxes)


# container -----------------------------------------------------------------


def dataset_bytes(ds: Dataset) -> bytes:
    parts = [DATA_MAGIC, struct.pack("<II", DATA_VERSION, len(ds))]
    h, w = ds.images.shape[1:3]
    for i in range(len(ds)):
        x, y, gw, gh = (int(v) for v in ds.boxes[i])
        parts.append(struct.pack("<IIHHHHHH", int(ds.fine[i]), int(ds.coarse[i]), x, y, gw, gh, h, w))
        parts.append(ds.images[i].astype("<f4").tobytes())
    return b"".join(parts)


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 12:
        raise FormatError(f"dataset truncated: {len(buf)} bytes, header needs 12")
    if buf[:4] != DATA_MAGIC:
        raise FormatError(f"bad dataset magic {buf[:4]!r} at offset 0, expected {DATA_MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version} (this build reads {DATA_VERSION})")
    off = 12
    images, fine, coarse, boxes = [], [], [], []
    rec = struct.Struct("<IIHHHHHH")
    for i in range(count):
        if off + rec.size > len(buf):
            raise FormatError(f"record {i} header truncated at offset {off}")
        f, c, x, y, gw, gh, h, w = rec.unpack_from(buf, off)
        off += rec.size
        nbytes = h * w * 3 * 4
        if off + nbytes > len(buf):
            raise FormatError(f"record {i} pixels truncated at offset {off}: need {nbytes} bytes")
        images.append(np.frombuffer(buf, dtype="<f4", count=h * w * 3, offset=off).reshape(h, w, 3))
        off += nbytes
        fine.append(f)
        coarse.append(c)
        boxes.append((x, y, gw, gh))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after record {count - 1} at offset {off}")
    return Dataset(
        np.stack(images).astype(np.float64) if images else np.zeros((0, 0, 0, 3)),
        np.array(fine, dtype=np.int64),
        np.array(coarse, dtype=np.int64),
        np.array(boxes, dtype=np.int64).reshape(-1, 4),
    )


def write_dataset(ds: Dataset, spec: SyntheticSpec, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / DATA_FILE).write_bytes(dataset_bytes(ds))
    lines = [f"{f.name}={getattr(spec, f.name)}" for f in fields(spec)]
    lines.append(f"records={len(ds)}")
    (out / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return out / DATA_FILE


def read_dataset(path: str | Path) -> Dataset:
    p = Path(path)
    if p.is_dir():
        p = p / DATA_FILE
    if not p.is_file():
        raise FileNotFoundError(f"dataset file not found: {p} (run `cmdistill gen-data` first)")
    return parse_dataset(p.read_bytes())


# resampling ----------------------------------------------------------------


def _axis_taps(start: np.ndarray, extent: np.ndarray, out: int, size: int):
    """Bilinear taps with half-pixel centres for each output index along one axis."""
    i = np.arange(out, dtype=np.float64)
    pos = start[..., None] + (i + 0.5) * (extent[..., None] / out) - 0.5
    pos = np.clip(pos, 0.0, size - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, pos - lo


def resample_matrix(start: float, extent: float, out: int, size: int, flip: bool = False) -> np.ndarray:
    """Dense ``out x size`` interpolation matrix (one axis of :func:`resample_batch`)."""
    lo, hi, w = _axis_taps(np.array(start, float), np.array(extent, float), out, size)
    m = np.zeros((out, size))
    rows = np.arange(out)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    return m[::-1] if flip else m


def resample_batch(images: np.ndarray, boxes: np.ndarray, flips: np.ndarray, out: int,
                   source: np.ndarray | None = None) -> np.ndarray:
    """Crop ``boxes`` (x, y, w, h in source pixels, may be fractional) and resize each to
    ``out x out``; ``flips`` mirrors horizontally. Crop ``i`` reads ``images[source[i]]``
    (default: ``images[i]``)."""
    n = len(boxes)
    h, w = images.shape[1:3]
    b = (np.arange(n) if source is None else np.asarray(source))[:, None]
    ylo, yhi, wy = _axis_taps(boxes[:, 1], boxes[:, 3], out, h)
    xlo, xhi, wx = _axis_taps(boxes[:, 0], boxes[:, 2], out, w)
    flips = np.asarray(flips, dtype=bool)
    xlo[flips], xhi[flips], wx[flips] = xlo[flips, ::-1], xhi[flips, ::-1], wx[flips, ::-1]
    c = images.shape[3]
    flat = images.reshape(-1, w * c)
    wy, wx = wy.astype(images.dtype), wx.astype(images.dtype)
    rows = np.take(flat, b * h + ylo, axis=0)  # n x out x (w*c)
    rows += (np.take(flat, b * h + yhi, axis=0) - rows) * wy[..., None]
    rows = rows.reshape(-1, c)
    base = (np.arange(n)[:, None, None] * out + np.arange(out)[None, :, None]) * w
    left = np.take(rows, base + xlo[:, None, :], axis=0)  # n x out x out x c
    left += (np.take(rows, base + xhi[:, None, :], axis=0) - left) * wx[:, None, :, None]
    return left


# multi-crop ----------------------------------------------------------------


@dataclass
class CropPlan:
    """Sampled augmentation parameters for a batch; arrays are ``(B, n_crops, ...)``."""

    image_boxes: np.ndarray
    region_boxes: np.ndarray
    flips: np.ndarray  # (B, 2), per augmentation
    contrast: np.ndarray  # (B, 2)
    brightness: np.ndarray  # (B, 2)


@dataclass
class ViewSet:
    teacher: list[CropView]
    student: list[CropView]


def _sample_boxes(rng, shape, h, w, lo, hi):
    area = rng.uniform(lo, hi, size=shape) * h * w
    ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3), size=shape))
    bw = np.minimum(np.sqrt(area * ratio), w)
    bh = np.minimum(np.sqrt(area / ratio), h)
    x0 = rng.uniform(0, 1, size=shape) * (w - bw)
    y0 = rng.uniform(0, 1, size=shape) * (h - bh)
    return np.stack([x0, y0, bw, bh], axis=-1)


def check_geometry(cfg: RunConfig) -> None:
    check_divisible(cfg.image_crop_px, cfg.image_crop_px, cfg.instance_px)
    check_divisible(cfg.region_crop_px, cfg.region_crop_px, cfg.instance_px)


def plan_crops(batch: int, h: int, w: int, cfg: RunConfig, rng: np.random.Generator) -> CropPlan:
    n_img, n_reg = cfg.n_image_crops, cfg.effective_region_crops
    if not cfg.augment:
        full = np.array([0.0, 0.0, w, h])
        return CropPlan(
            np.broadcast_to(full, (batch, n_img, 4)).copy(),
            np.broadcast_to(full, (batch, n_reg, 4)).copy(),
            np.zeros((batch, 2), dtype=bool),
            np.ones((batch, 2)),
            np.zeros((batch, 2)),
        )
    image_boxes = _sample_boxes(rng, (batch, n_img), h, w, cfg.image_crop_scale_min, 1.0)
    region_boxes = _sample_boxes(rng, (batch, n_reg), h, w, cfg.region_crop_scale_min, cfg.region_crop_scale_max)
    flips = rng.random((batch, 2)) < 0.5
    contrast = rng.uniform(0.8, 1.2, size=(batch, 2))
    brightness = rng.uniform(-0.1, 0.1, size=(batch, 2))
    return CropPlan(image_boxes, region_boxes, flips, contrast, brightness)


def jitter(x: np.ndarray, contrast, brightness) -> np.ndarray:
    return np.clip((x - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)


def render_crops(images: np.ndarray, boxes: np.ndarray, plan: CropPlan, out: int) -> np.ndarray:
    """Apply one level's boxes (B, n, 4) plus the per-augmentation flip/jitter."""
    bsz, n = boxes.shape[:2]
    if n == 0:
        return np.zeros((bsz, 0, out, out, 3))
    aug = np.arange(n) % 2
    src = np.repeat(np.arange(bsz), n)
    flips = plan.flips[:, aug].reshape(-1)
    crops = resample_batch(images, boxes.reshape(-1, 4), flips, out, src).reshape(bsz, n, out, out, 3)
    c = plan.contrast[:, aug][..., None, None, None].astype(crops.dtype)
    b = plan.brightness[:, aug][..., None, None, None].astype(crops.dtype)
    return jitter(crops, c, b)


def multicrop_batch(images: np.ndarray, cfg: RunConfig, rng: np.random.Generator):
    """Crops shared by teacher and student: ``(image_crops, region_crops, plan)``."""
    check_geometry(cfg)
    bsz, h, w, _ = images.shape
    plan = plan_crops(bsz, h, w, cfg, rng)
    return (
        render_crops(images, plan.image_boxes, plan, cfg.image_crop_px),
        render_crops(images, plan.region_boxes, plan, cfg.region_crop_px),
        plan,
    )


def multicrop(image: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> ViewSet:
    """Single-image view set; both nets receive the same crops."""
    img, reg, _ = multicrop_batch(image[None], cfg, rng)
    views = [CropView(img[0, i], "image", i % 2, cfg.instance_px) for i in range(img.shape[1])]
    views += [CropView(reg[0, i], "region", i % 2, cfg.instance_px) for i in range(reg.shape[1])]
    return ViewSet(teacher=list(views), student=list(views))


def center_view(images: np.ndarray, out: int) -> np.ndarray:
    """Deterministic evaluation view: the whole image resized to ``out``."""
    n, h, w, _ = images.shape
    boxes = np.broadcast_to(np.array([0.0, 0.0, w, h]), (n, 4))
    return resample_batch(images, boxes, np.zeros(n, dtype=bool), out)


def mask_to_instances(mask: np.ndarray, box, flip: bool, out: int, s: int) -> np.ndarray:
    """Fraction of each instance of a crop covered by a source-pixel mask."""
    m = resample_batch(np.repeat(mask[None, :, :, None], 3, axis=3), np.asarray(box, float)[None], np.array([flip]), out)
    return patchify_array(m[0, :, :, :1], s).mean(axis=(1, 2, 3))
