"""Image I/O, multi-crop view generation and the synthetic lesion dataset."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, FormatError, InvalidArgumentError, ShapeError

# ---------------------------------------------------------------------------
# validation


def check_image(img, name: str = "image") -> np.ndarray:
    """Return ``img`` as a float64 ``[H, W, 3]`` array with values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"{name} must have shape [H, W, 3], got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} has an empty spatial extent")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidArgumentError(f"{name} pixel values must lie in [0, 1]")
    return arr


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token as ``(token, start, end)``."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header", offset=start)
    return buf[start:pos], start, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P6'", offset=0)
    pos = 2
    values, starts = [], []
    for what in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"non-numeric {what} {tok!r}", offset=start)
        values.append(int(tok))
        starts.append(start)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=starts[0 if width < 1 else 1])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255", offset=starts[2])
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", offset=pos)
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(payload)}",
                          offset=pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def load_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary 8-bit PPM into ``[H, W, 3]`` floats in [0, 1]."""
    return decode_ppm(Path(path).read_bytes())


def encode_ppm(img: np.ndarray) -> bytes:
    arr = check_image(img)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def save_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


# ---------------------------------------------------------------------------
# geometry

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[H, W, C]``."""
    out_w = out_h if out_w is None else out_w
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    # separable: blend rows first, then columns
    rows = img[y0] * (1 - wy) + img[y1] * wy
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def sample_crop_box(h: int, w: int, area_range: tuple[float, float], rng: np.random.Generator,
                    aspect_range: tuple[float, float] = (3 / 4, 4 / 3),
                    attempts: int = 10) -> tuple[int, int, int, int]:
    """Pick ``(top, left, height, width)`` fully inside an ``h x w`` image."""
    lo, hi = area_range
    area = h * w
    for _ in range(attempts):
        frac = rng.uniform(lo, hi)
        aspect = rng.uniform(*aspect_range)
        cw = int(round(math.sqrt(frac * area * aspect)))
        ch = int(round(math.sqrt(frac * area / aspect)))
        if 1 <= cw <= w and 1 <= ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to the largest centred square-ish box that fits the area bound
    side = int(round(math.sqrt(hi * area)))
    ch, cw = min(side, h), min(side, w)
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img: np.ndarray, out_size: int, area_range: tuple[float, float],
                        rng: np.random.Generator,
                        aspect_range: tuple[float, float] = (3 / 4, 4 / 3)) -> np.ndarray:
    lo, hi = area_range
    if not 0 < lo <= hi <= 1:
        raise InvalidArgumentError(f"area range must satisfy 0 < lo <= hi <= 1, got {area_range}")
    if out_size < 2:
        raise InvalidArgumentError("out_size must be >= 2")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise InvalidArgumentError(f"image too small to crop: {img.shape[:2]}")
    top, left, ch, cw = sample_crop_box(img.shape[0], img.shape[1], area_range, rng, aspect_range)
    return resize_bilinear(img[top:top + ch, left:left + cw], out_size)


# ---------------------------------------------------------------------------
# multi-crop

@dataclass(frozen=True)
class ViewConfig:
    global_size: int = 224
    local_size: int = 96
    n_global: int = 2
    n_local: int = 6
    global_area: tuple[float, float] = (0.4, 1.0)
    local_area: tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter: float = 0.2


@dataclass
class ViewBatch:
    globals: list[np.ndarray]
    locals: list[np.ndarray]
    source_id: int | str = 0


def photometric(img: np.ndarray, rng: np.random.Generator, flip_prob: float, jitter: float) -> np.ndarray:
    if rng.uniform() < flip_prob:
        img = img[:, ::-1]
    brightness = rng.uniform(1 - jitter, 1 + jitter)
    contrast = rng.uniform(1 - jitter, 1 + jitter)
    img = img * brightness
    mu = img.mean()
    img = (img - mu) * contrast + mu
    return np.clip(img, 0.0, 1.0)


def make_views(img: np.ndarray, rng: np.random.Generator, cfg: ViewConfig = ViewConfig(),
               source_id: int | str = 0) -> ViewBatch:
    """Global and local augmented crops of one image (2 + 6 under defaults)."""
    img = check_image(img)

    def view(size, area):
        crop = random_resized_crop(img, size, area, rng)
        return photometric(crop, rng, cfg.flip_prob, cfg.jitter)

    globals_ = [view(cfg.global_size, cfg.global_area) for _ in range(cfg.n_global)]
    locals_ = [view(cfg.local_size, cfg.local_area) for _ in range(cfg.n_local)]
    return ViewBatch(globals_, locals_, source_id)


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, item) so worker scheduling cannot change results."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


# ---------------------------------------------------------------------------
# datasets

@dataclass
class LabeledDataset:
    items: list[tuple[Path, int]]
    class_names: list[str]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.items], dtype=int)

    def load_images(self) -> np.ndarray:
        return np.stack([load_ppm(p) for p, _ in self.items])


def load_dataset(root: str | os.PathLike) -> LabeledDataset:
    """Read a ``root/<class>/<file>.ppm`` tree; classes in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no class directories under {root}")
    items = []
    for idx, name in enumerate(classes):
        files = sorted((root / name).glob("*.ppm"))
        if not files:
            raise DatasetError(f"class {name!r} has zero samples")
        items.extend((f, idx) for f in files)
    return LabeledDataset(items, classes, root)


LEAF_GREEN = np.array([0.22, 0.55, 0.18])
LESION_DARK = np.array([0.45, 0.27, 0.10])
LESION_LIGHT = np.array([0.85, 0.75, 0.20])


@dataclass(frozen=True)
class LesionSpec:
    """Class-dependent lesion recipe."""

    blobs: int
    radius: float
    hue_drift: float


def lesion_spec(c: int, n_classes: int, image_size: int) -> LesionSpec:
    # more blobs, each smaller, with stronger yellowing as the class index grows
    base = image_size / 8.0
    return LesionSpec(blobs=c + 1, radius=base * (1.0 - 0.1 * c / max(n_classes - 1, 1)),
                      hue_drift=c / max(n_classes - 1, 1))


def _leaf_background(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5))[..., None]
    tone = LEAF_GREEN * rng.uniform(0.96, 1.04, size=3)
    img = tone + 0.08 * ramp + rng.normal(0.0, 0.015, (size, size, 3))
    return img


def draw_lesion(img: np.ndarray, cy: float, cx: float, radius: float, drift: float,
                rng: np.random.Generator) -> None:
    """Paint a soft-edged lesion whose colour drifts along a random axis."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    mask = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
    theta = rng.uniform(0, 2 * np.pi)
    along = ((np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) / max(radius, 1e-6))[..., None]
    t = np.clip(0.5 * drift * (1.0 + along) + 0.15 * (1.0 - drift), 0.0, 1.0)
    color = LESION_DARK * (1 - t) + LESION_LIGHT * t
    img[:] = img * (1 - mask) + color * mask


def place_blobs(size: int, spec: LesionSpec, rng: np.random.Generator, max_tries: int = 2000):
    centers: list[tuple[float, float]] = []
    margin = spec.radius + 1.0
    tries = 0
    while len(centers) < spec.blobs:
        tries += 1
        if tries > max_tries:
            raise InvalidArgumentError(f"cannot place {spec.blobs} lesions in a {size}px image")
        cy, cx = rng.uniform(margin, size - margin, size=2)
        if all(math.hypot(cy - y, cx - x) > 2 * spec.radius + 3.0 for y, x in centers):
            centers.append((cy, cx))
    return centers


def synth_image(c: int, n_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    spec = lesion_spec(c, n_classes, size)
    img = _leaf_background(size, rng)
    for cy, cx in place_blobs(size, spec, rng):
        draw_lesion(img, cy, cx, spec.radius, spec.hue_drift, rng)
    return np.clip(img, 0.0, 1.0)


def single_blob_image(size: int, center: tuple[float, float], radius: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Leaf background with exactly one high-contrast lesion at ``center`` (row, col)."""
    img = _leaf_background(size, rng)
    draw_lesion(img, center[0], center[1], radius, 0.5, rng)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(out_dir: str | os.PathLike, classes: int, per_class: int, image_size: int = 64,
                  seed: int = 0) -> LabeledDataset:
    """Write ``classes * per_class`` PPM lesion images in class-per-directory layout."""
    if classes < 2:
        raise InvalidArgumentError("need at least 2 classes")
    if per_class < 1:
        raise InvalidArgumentError("need at least 1 image per class")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out}: {exc}") from exc
    names = [f"class_{c:02d}" for c in range(classes)]
    items = []
    for c, name in enumerate(names):
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), c, i]))
            path = cdir / f"{i:04d}.ppm"
            save_ppm(path, synth_image(c, classes, image_size, rng))
            items.append((path, c))
    return LabeledDataset(items, names, out)


# ---------------------------------------------------------------------------
# oracle features

def lesion_mask(img: np.ndarray) -> np.ndarray:
    """Lesion pixels are the ones where red clearly exceeds green."""
    return img[..., 0] > img[..., 1] - 0.05


def blob_count(img: np.ndarray) -> int:
    from scipy import ndimage

    labelled, n = ndimage.label(lesion_mask(img))
    return int(n)


def color_moments(img: np.ndarray) -> np.ndarray:
    """Per-channel mean and standard deviation."""
    flat = img.reshape(-1, 3)
    return np.concatenate([flat.mean(axis=0), flat.std(axis=0)])
