"""Datasets: IDX digit files, PNG folders, synthetic domains and batching."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, FormatError
from .model import ImageBatch

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images of one domain, (N, C, H, W) float32 in [-1, 1]. Carries no labels."""

    images: np.ndarray
    domain: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigError(f"dataset images must be (N, C, H, W), got {self.images.shape}")
        h, w = self.images.shape[2:]
        if h % 8 or w % 8:
            raise ConfigError(f"image sides must be multiples of 8, got {h}x{w}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def batch(self, indices) -> ImageBatch:
        return ImageBatch(Tensor(self.images[indices]), self.domain)


@dataclass(kw_only=True)
class LabeledDataset(Dataset):
    labels: np.ndarray

    def __post_init__(self):
        super().__post_init__()
        if len(self.labels) != len(self.images):
            raise FormatError(
                f"{len(self.labels)} labels for {len(self.images)} images")

    def unlabeled(self) -> Dataset:
        return Dataset(self.images, self.domain, self.name)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(pixels: np.ndarray) -> np.ndarray:
    """Map bytes {0..255} onto 256 evenly spaced points of [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0))


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def load_idx(path) -> np.ndarray:
    """Parse an IDX image (N, H, W) or label (N,) file into a uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file is {len(raw)} bytes, header needs at least 8 (offset 0)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndims = 3
    elif magic == IDX_LABELS_MAGIC:
        ndims = 1
    else:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise FormatError(f"{path}: header truncated at offset {len(raw)}, expected {header} bytes")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(
            f"{path}: payload at offset {header} should hold {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError("expected an image file and a label file")
    if len(images) != len(labels):
        raise FormatError(
            f"consistency error: {len(images)} images in {images_path} "
            f"but {len(labels)} labels in {labels_path}")
    return images, labels


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(arr.ndim)
    if magic is None:
        raise ValueError("IDX writer supports (N, H, W) images or (N,) labels")
    Path(path).write_bytes(struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes())


def idx_dataset(images_path, domain: int, target_size: int | None = None,
                labels_path=None, name: str = "") -> Dataset:
    raw = load_idx(images_path)
    labels = None
    if labels_path is not None:
        raw, labels = load_idx_pair(images_path, labels_path)
    if raw.ndim != 3:
        raise FormatError(f"{images_path}: not an image file")
    if target_size is not None and raw.shape[1:] != (target_size, target_size):
        raw = np.stack([_resize_gray(im, target_size) for im in raw])
    images = normalize(raw)[:, None]
    if labels is None:
        return Dataset(images, domain, name)
    return LabeledDataset(images, domain, name, labels=labels.astype(np.int64))


def _resize_gray(im: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.fromarray(im).resize((size, size), Image.BILINEAR))


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def _load_png(path: Path, target_size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        mode = "L" if im.mode in ("L", "1", "I;16", "I", "LA") else "RGB"
        im = im.convert(mode)
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != target_size:
            im = im.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_png_dir(path, target_size: int, domain: int = 0, name: str = "") -> Dataset:
    """Decode every PNG in ``path`` (sorted by filename), center-crop, resize, normalize."""
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"{path} is not a directory")
    if target_size % 8:
        raise ConfigError(f"target size must be a multiple of 8, got {target_size}")
    images = []
    for f in sorted(path.glob("*.png")):
        try:
            images.append(_load_png(f, target_size))
        except Exception as exc:  # undecodable files are skipped
            logger.warning("skipping %s: %s", f, exc)
    if not images:
        raise ConfigError(f"no decodable PNG files in {path}")
    channels = {im.shape[0] for im in images}
    if len(channels) > 1:
        raise ConfigError(f"{path} mixes grayscale and colour images")
    return Dataset(normalize(np.stack(images)), domain, name or path.name)


def load_labeled_png_dirs(path, target_size: int, domain: int = 0) -> LabeledDataset:
    """Class-per-subdirectory layout: ``path/<label>/*.png`` with integer labels."""
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"{path} is not a directory")
    images, labels = [], []
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        try:
            label = int(sub.name)
        except ValueError:
            raise ConfigError(f"class directory {sub.name!r} is not an integer label") from None
        for f in sorted(sub.glob("*.png")):
            try:
                images.append(_load_png(f, target_size))
                labels.append(label)
            except Exception as exc:
                logger.warning("skipping %s: %s", f, exc)
    if not images:
        raise ConfigError(f"no labelled PNG files under {path}")
    return LabeledDataset(normalize(np.stack(images)), domain, path.name,
                          labels=np.asarray(labels, dtype=np.int64))


def save_png(path, image: np.ndarray) -> None:
    """Write a (C, H, W) array in [-1, 1] as an 8-bit PNG."""
    from PIL import Image

    arr = denormalize(image)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    else:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, format="PNG")


def image_grid(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile equally sized (C, H, W) images into one (C, rows*H, cols*W) array."""
    return np.concatenate([np.concatenate(r, axis=2) for r in rows], axis=1)


# ---------------------------------------------------------------------------
# synthetic domains
# ---------------------------------------------------------------------------

def _square_params(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    side = rng.integers(size // 4, size // 2 + 1, count)
    top = np.array([rng.integers(1, size - s) for s in side])
    left = np.array([rng.integers(1, size - s) for s in side])
    return np.stack([top, left, side], axis=1)


def _render_squares(params: np.ndarray, size: int, filled: bool) -> np.ndarray:
    out = np.full((len(params), 1, size, size), -1.0, dtype=np.float32)
    for k, (t, l, s) in enumerate(params):
        if filled:
            out[k, 0, t : t + s, l : l + s] = 1.0
        else:
            out[k, 0, t : t + s, l : l + s] = 1.0
            out[k, 0, t + 2 : t + s - 2, l + 2 : l + s - 2] = -1.0
    return out


SHAPES_RENDERINGS = ("outline", "filled", "inverted", "inverted_outline")


def _shapes(n_domains: int, n_per_domain: int, size: int, seed: int) -> list[Dataset]:
    if n_domains > len(SHAPES_RENDERINGS):
        raise ConfigError(f"shapes supports at most {len(SHAPES_RENDERINGS)} domains")
    params = _square_params(np.random.default_rng([seed, 101]), n_per_domain, size)
    outline = _render_squares(params, size, filled=False)
    filled = _render_squares(params, size, filled=True)
    renders = {"outline": outline, "filled": filled, "inverted": -filled,
               "inverted_outline": -outline}
    return [Dataset(renders[r], i, r) for i, r in enumerate(SHAPES_RENDERINGS[:n_domains])]


GLYPH_CLASSES = ("ring", "bar", "cross")


def _render_glyphs(labels: np.ndarray, size: int, rng: np.random.Generator,
                   noise: float) -> np.ndarray:
    out = np.full((len(labels), 1, size, size), -1.0, dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for k, label in enumerate(labels):
        cy, cx = size / 2 - 0.5 + rng.uniform(-size / 8, size / 8, 2)
        r = size * rng.uniform(0.25, 0.35)
        th = max(1.0, size / 12)
        if label == 0:
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = np.abs(d - r) <= th
        elif label == 1:
            mask = (np.abs(xx - cx) <= th) & (np.abs(yy - cy) <= r)
        else:
            mask = (((np.abs(xx - cx) <= th) & (np.abs(yy - cy) <= r))
                    | ((np.abs(yy - cy) <= th) & (np.abs(xx - cx) <= r)))
        out[k, 0][mask] = 1.0
    if noise > 0:
        out += rng.normal(0, noise, out.shape).astype(np.float32)
        np.clip(out, -1, 1, out=out)
    return out


def _glyphs(n_domains: int, n_per_domain: int, size: int, seed: int) -> list[LabeledDataset]:
    if n_domains > 2:
        raise ConfigError("glyphs has two domains: plain and intensity-inverted")
    out = []
    for d in range(n_domains):
        rng = np.random.default_rng([seed, 202, d])
        labels = np.arange(n_per_domain) % len(GLYPH_CLASSES)
        rng.shuffle(labels)
        imgs = _render_glyphs(labels, size, rng, noise=0.05)
        if d == 1:
            imgs = -imgs
        out.append(LabeledDataset(imgs, d, ("plain", "inverted")[d], labels=labels))
    return out


def synthetic_domains(kind: str, n_domains: int, n_per_domain: int, size: int,
                      seed: int = 0) -> list[Dataset]:
    """Procedural domains sharing a latent factor with per-domain rendering.

    ``shapes``: random squares drawn as outline / filled / inverted-filled /
    inverted-outline; sample i is the same square in every domain.
    ``glyphs``: three glyph classes (ring, bar, cross) on a dark background and
    their intensity-inverted counterparts, independently sampled per domain.
    """
    if size % 8 or size < 8:
        raise ConfigError(f"size must be a positive multiple of 8, got {size}")
    if kind == "shapes":
        return _shapes(n_domains, n_per_domain, size, seed)
    if kind == "glyphs":
        return _glyphs(n_domains, n_per_domain, size, seed)
    raise ConfigError(f"unknown synthetic kind {kind!r} (expected 'shapes' or 'glyphs')")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, seed, k: int) -> np.ndarray:
    """Indices of the k-th batch of a per-epoch shuffled stream (last partial batch dropped)."""
    if n == 0:
        raise ConfigError("cannot batch an empty dataset")
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch size {batch_size} must lie in [1, {n}]")
    per_epoch = n // batch_size
    epoch, pos = divmod(k, per_epoch)
    seq = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    perm = np.random.default_rng(seq + [epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def batch_iter(dataset: Dataset, batch_size: int, seed=0) -> Iterator[ImageBatch]:
    """Endless stream of shuffled batches; same seed, same sequence."""
    k = 0
    while True:
        yield dataset.batch(batch_indices(len(dataset), batch_size, seed, k))
        k += 1
