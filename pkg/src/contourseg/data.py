"""Synthetic shape dataset, netpbm image I/O and the augmentation pipeline.

Images travel as float arrays in [0, 1] with channels first (3, H, W);
masks as {0, 1} uint8 arrays (H, W). The only file formats are binary
PGM (P5) for masks/saliency and binary PPM (P6) for images, both 8-bit.

Sample generation is deterministic: sample `i` of a split draws from a
generator seeded by (seed, split tag, i), so splits are disjoint by
construction and per-sample generation can be parallelized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import bilinear_matrix

_SPLIT_TAGS = {"train": 101, "test": 102}
_SUPERSAMPLE = 4


class FormatError(ValueError):
    """Raised for malformed netpbm files."""


@dataclass
class Sample:
    """One image/mask pair; spatial dims must agree and the mask is binary."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image {self.image.shape[1:]}"
            )


@dataclass
class DatasetSpec:
    """Recipe for one split of the synthetic shape dataset."""

    count: int
    base_size: int = 72
    crop_size: int = 64
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.crop_size > self.base_size:
            raise ValueError(
                f"crop size {self.crop_size} exceeds base size {self.base_size}"
            )
        if self.split not in _SPLIT_TAGS:
            raise ValueError(f"split must be one of {sorted(_SPLIT_TAGS)}, got {self.split!r}")


# ---------------------------------------------------------------------------
# netpbm I/O


def quantize_saliency(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes: floor(255 v + 0.5), the rule shared with metrics."""
    return np.floor(np.clip(np.asarray(values), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _parse_netpbm(blob: bytes, magic: bytes, path) -> tuple[int, int, bytes]:
    if not blob.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} magic, got {blob[:2]!r}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated header")
        ch = blob[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"{path}: unterminated comment")
            pos = nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end : end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise FormatError(f"{path}: unexpected byte {ch!r} in header")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    channels = 3 if magic == b"P6" else 1
    payload = blob[pos:]
    expected = width * height * channels
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    return width, height, payload


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale bytes as a (H, W) uint8 array."""
    blob = Path(path).read_bytes()
    width, height, payload = _parse_netpbm(blob, b"P5", path)
    return np.frombuffer(payload, np.uint8).reshape(height, width).copy()


def write_pgm(path, values: np.ndarray) -> None:
    values = np.asarray(values, np.uint8)
    if values.ndim != 2:
        raise ValueError(f"PGM payload must be 2-d, got shape {values.shape}")
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode())
        fh.write(values.tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit RGB as a float (3, H, W) array in [0, 1]."""
    blob = Path(path).read_bytes()
    width, height, payload = _parse_netpbm(blob, b"P6", path)
    raw = np.frombuffer(payload, np.uint8).reshape(height, width, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got shape {image.shape}")
    raw = quantize_saliency(image).transpose(1, 2, 0)
    height, width = raw.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(np.ascontiguousarray(raw).tobytes())


def read_mask(path) -> np.ndarray:
    """Mask from a PGM file, binarized at byte value >= 128."""
    return (read_pgm(path) >= 128).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, np.uint8) * 255)


def read_saliency(path) -> np.ndarray:
    """Saliency map from a PGM file as floats in [0, 1]."""
    return read_pgm(path).astype(np.float64) / 255.0


def write_saliency(path, values: np.ndarray) -> None:
    write_pgm(path, quantize_saliency(values))


# ---------------------------------------------------------------------------
# resampling


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (H, W) or (C, H, W) float arrays."""
    arr = np.asarray(arr, np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    r = bilinear_matrix(arr.shape[1], out_h)
    c = bilinear_matrix(arr.shape[2], out_w)
    out = np.einsum("ri,cij,sj->crs", r, arr, c, optimize=True)
    return out[0] if squeeze else out


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; preserves the value set (so masks stay binary)."""
    arr = np.asarray(arr)
    in_h, in_w = arr.shape[-2:]
    rows = np.clip(np.floor((np.arange(out_h) + 0.5) * in_h / out_h), 0, in_h - 1).astype(int)
    cols = np.clip(np.floor((np.arange(out_w) + 0.5) * in_w / out_w), 0, in_w - 1).astype(int)
    return arr[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# synthetic generation


def _value_noise(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, (cells, cells))
    return resize_bilinear(grid, size, size)


def _ellipse_field(xx, yy, cx, cy, a, b, theta):
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    return u * u + v * v <= 1.0


def _convex_polygon(rng, cx, cy, area):
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    aspect = rng.uniform(0.5, 1.0)
    px = np.cos(angles)
    py = np.sin(angles) * aspect
    # points on an ellipse in angular order are convex; rescale to the target area
    shoelace = 0.5 * abs(np.dot(px, np.roll(py, -1)) - np.dot(py, np.roll(px, -1)))
    scale = np.sqrt(area / max(shoelace, 1e-9))
    theta = rng.uniform(0.0, np.pi)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    pts = rot @ np.stack([px, py]) * scale
    return pts[0] + cx, pts[1] + cy


def _polygon_field(xx, yy, vx, vy):
    inside = np.ones_like(xx, dtype=bool)
    n = len(vx)
    for k in range(n):
        x0, y0 = vx[k], vy[k]
        x1, y1 = vx[(k + 1) % n], vy[(k + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    return inside


def _draw_shapes(rng: np.random.Generator, size: int):
    ss = _SUPERSAMPLE
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    covered = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        area = rng.uniform(0.02, 0.40) * size * size
        near_edge = rng.random() < 0.25
        lo, hi = (-0.05, 1.05) if near_edge else (0.15, 0.85)
        cx, cy = rng.uniform(lo, hi) * size, rng.uniform(lo, hi) * size
        kind = int(rng.integers(0, 3))
        if kind == 0:
            q = rng.uniform(0.4, 1.0)
            a = np.sqrt(area / (np.pi * q))
            covered |= _ellipse_field(xx, yy, cx, cy, a, a * q, rng.uniform(0, np.pi))
        elif kind == 1:
            vx, vy = _convex_polygon(rng, cx, cy, area)
            covered |= _polygon_field(xx, yy, vx, vy)
        else:
            hole = rng.uniform(0.4, 0.7)
            q = rng.uniform(0.5, 1.0)
            a = np.sqrt(area / (np.pi * q * (1.0 - hole * hole)))
            theta = rng.uniform(0, np.pi)
            outer = _ellipse_field(xx, yy, cx, cy, a, a * q, theta)
            inner = _ellipse_field(xx, yy, cx, cy, a * hole, a * q * hole, theta)
            covered |= outer & ~inner
    alpha = covered.reshape(size, ss, size, ss).mean(axis=(1, 3))
    return alpha


def _generate_sample(rng: np.random.Generator, size: int) -> Sample:
    for _ in range(64):
        alpha = _draw_shapes(rng, size)
        mask = (alpha >= 0.5).astype(np.uint8)
        frac = mask.mean()
        if 0.02 <= frac <= 0.8:
            break
    else:
        raise RuntimeError("could not draw a mask with admissible foreground fraction")

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = rng.uniform(0.0, 2.0 * np.pi)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)

    bg_lum = rng.uniform(0.15, 0.85)
    grad_amp = rng.uniform(0.05, 0.30)
    contrast = rng.uniform(0.2, 0.8)
    ways = [s for s in (+1, -1) if 0.02 <= bg_lum + s * contrast <= 0.98]
    sign = ways[int(rng.integers(0, len(ways)))] if ways else (1 if bg_lum < 0.5 else -1)
    fg_lum = np.clip(bg_lum + sign * contrast, 0.02, 0.98)

    noise = _value_noise(rng, size) * rng.uniform(0.02, 0.10)
    background = bg_lum + (proj - 0.5) * grad_amp
    channels = []
    for _c in range(3):
        bg_c = background + rng.uniform(-0.06, 0.06)
        fg_c = fg_lum + rng.uniform(-0.06, 0.06)
        channels.append(bg_c * (1.0 - alpha) + fg_c * alpha + noise)
    image = np.clip(np.stack(channels), 0.0, 1.0)
    return Sample(image=image, mask=mask)


def generate(spec: DatasetSpec) -> list[Sample]:
    """Deterministic synthetic samples for one split of a dataset."""
    tag = _SPLIT_TAGS[spec.split]
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFFFFFFFFFF, tag, i])
        out.append(_generate_sample(rng, spec.base_size))
    return out


# ---------------------------------------------------------------------------
# augmentation


def augment(
    sample: Sample,
    train: bool,
    rng: np.random.Generator | None = None,
    base_size: int = 72,
    crop_size: int = 64,
) -> Sample:
    """Resize, then (in training) flip with probability 0.5 and random-crop.

    Training draws from `rng` in a fixed order: the flip decision, then
    the row offset, then the column offset. Evaluation deterministically
    resizes straight to crop_size.
    """
    if not train:
        image = resize_bilinear(sample.image, crop_size, crop_size)
        mask = resize_nearest(sample.mask, crop_size, crop_size)
        return Sample(image=image, mask=mask)
    if rng is None:
        raise ValueError("training augmentation requires a random generator")
    image, mask = sample.image, sample.mask
    if image.shape[1:] != (base_size, base_size):
        image = resize_bilinear(image, base_size, base_size)
        mask = resize_nearest(mask, base_size, base_size)
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        mask = mask[:, ::-1]
    span = base_size - crop_size
    oy = int(rng.integers(0, span + 1))
    ox = int(rng.integers(0, span + 1))
    return Sample(
        image=np.ascontiguousarray(image[:, oy : oy + crop_size, ox : ox + crop_size]),
        mask=np.ascontiguousarray(mask[oy : oy + crop_size, ox : ox + crop_size]),
    )


# ---------------------------------------------------------------------------
# dataset directory layout


def write_dataset(root, train: list[Sample], test: list[Sample], force: bool = False) -> None:
    """Write images/NNNNNN.ppm, masks/NNNNNN.pgm and manifest.csv."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if manifest.exists() and not force:
        raise FileExistsError(f"{manifest} already exists (use force to overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    idx = 0
    for split, samples in (("train", train), ("test", test)):
        for sample in samples:
            name = f"{idx:06d}"
            write_ppm(root / "images" / f"{name}.ppm", sample.image)
            write_mask(root / "masks" / f"{name}.pgm", sample.mask)
            rows.append((name, split, f"{sample.mask.mean():.6f}"))
            idx += 1
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "foreground_fraction"])
        writer.writerows(rows)


def load_dataset(root, split: str | None = None) -> tuple[list[str], list[Sample]]:
    """Samples (and their ids) from a dataset directory, optionally one split."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    ids, samples = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if split is not None and row["split"] != split:
                continue
            name = row["id"]
            image = read_ppm(root / "images" / f"{name}.ppm")
            mask = read_mask(root / "masks" / f"{name}.pgm")
            ids.append(name)
            samples.append(Sample(image=image, mask=mask))
    return ids, samples
