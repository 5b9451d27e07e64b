"""EMNIST letters ingestion and the synthetic stand-in dataset."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# EMNIST "letters" labels are 1..26 for a..z (upper and lower case merged)
EMNIST_LETTERS = {chr(ord("a") + i): i + 1 for i in range(26)}
CLASS_LETTERS = ("m", "a", "n", "c")

SOURCE_SIZE = 28
TARGET_SIZE = 8


@dataclass(frozen=True)
class LabeledImages:
    images: np.ndarray   # N x 8 x 8 in [0, 1]
    labels: np.ndarray   # N, values 0..3 for (m, a, n, c)
    split: str = "train"

    def __len__(self):
        return int(self.labels.shape[0])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(CLASS_LETTERS))


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise ParseError("image file shorter than its 16-byte header", offset=len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}", offset=0)
    if rows == 0 or cols == 0:
        raise ParseError(f"degenerate image dimensions {rows}x{cols}", offset=8)
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise ParseError(f"image payload length {len(raw)} != expected {expected}",
                         offset=min(len(raw), expected))
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    return pixels.astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise ParseError("label file shorter than its 8-byte header", offset=len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ParseError(f"bad label magic 0x{magic:08x}", offset=0)
    expected = 8 + count
    if len(raw) != expected:
        raise ParseError(f"label payload length {len(raw)} != expected {expected}",
                         offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, *, transpose: bool = True):
    """Read an IDX image/label pair (optionally gzipped).

    EMNIST stores images transposed relative to MNIST; ``transpose`` undoes it.
    """
    images = parse_idx_images(_read_bytes(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    if transpose:
        images = images.transpose(0, 2, 1)
    return images, labels


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 IDX files (used for fixtures); gzip when the name ends in .gz."""
    imgs = np.clip(np.round(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)
    labs = np.asarray(labels).astype(np.uint8)
    n, rows, cols = imgs.shape
    img_raw = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + imgs.tobytes()
    lab_raw = struct.pack(">II", IDX_LABELS_MAGIC, labs.shape[0]) + labs.tobytes()
    for path, raw in ((images_path, img_raw), (labels_path, lab_raw)):
        path = Path(path)
        path.write_bytes(gzip.compress(raw) if path.suffix == ".gz" else raw)


def area_weights(src: int = SOURCE_SIZE, dst: int = TARGET_SIZE) -> np.ndarray:
    """``dst x src`` matrix averaging source pixels by fractional overlap."""
    ratio = src / dst
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * ratio, (i + 1) * ratio
        for k in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            w[i, k] = max(0.0, min(hi, k + 1) - max(lo, k))
    return w / ratio


_AREA = area_weights()


def downsample(image) -> np.ndarray:
    """Area-weighted 28x28 -> 8x8 resampling (works on a single image or a stack)."""
    x = np.asarray(image, dtype=np.float64)
    return _AREA @ x @ _AREA.T if x.ndim == 2 else np.einsum("ik,nkl,jl->nij", _AREA, x, _AREA)


def build_split(images, labels, letters=CLASS_LETTERS, per_class_train: int = 50,
                per_class_test: int = 100, seed: int = 0):
    """Draw disjoint, exactly balanced train/test splits for ``letters``.

    ``images`` are raw 28x28 (or already 8x8) pixels in [0, 1]; ``labels`` are
    EMNIST letter indices. Output labels are positions in ``letters``.
    """
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train_idx, test_idx, train_lab, test_lab = [], [], [], []
    for cls, letter in enumerate(letters):
        pool_idx = np.flatnonzero(labels == EMNIST_LETTERS[letter])
        need = per_class_train + per_class_test
        if pool_idx.size < need:
            raise DatasetError(f"class {letter!r} has {pool_idx.size} instances, need {need}")
        chosen = rng.choice(pool_idx, size=need, replace=False)
        train_idx.extend(chosen[:per_class_train])
        test_idx.extend(chosen[per_class_train:])
        train_lab += [cls] * per_class_train
        test_lab += [cls] * per_class_test

    def _take(idx):
        imgs = np.asarray(images)[np.asarray(idx)]
        return downsample(imgs) if imgs.shape[-1] != TARGET_SIZE else imgs.astype(np.float64)

    train = LabeledImages(_take(train_idx), np.asarray(train_lab), "train")
    test = LabeledImages(_take(test_idx), np.asarray(test_lab), "test")
    return train, test


# blob centres (row, col) and widths for the four synthetic classes
_BLOB_CENTRES = ((2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0))
_BLOB_WIDTH = 1.2


def blob_templates(width: float = _BLOB_WIDTH) -> np.ndarray:
    yy, xx = np.mgrid[0:TARGET_SIZE, 0:TARGET_SIZE]
    return np.stack([np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * width ** 2))
                     for r, c in _BLOB_CENTRES])


def synthetic_blobs(n_per_class: int, seed: int = 0, noise: float = 0.05, jitter: float = 0.0,
                    split: str = "train") -> LabeledImages:
    """Four classes of Gaussian blobs at distinct positions plus pixel noise.

    ``jitter`` shifts each blob centre by N(0, jitter^2) pixels per sample,
    which makes the classes harder to separate.
    """
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:TARGET_SIZE, 0:TARGET_SIZE]
    images, labels = [], []
    for cls, (r, c) in enumerate(_BLOB_CENTRES):
        for _ in range(n_per_class):
            dr, dc = rng.normal(0.0, jitter, 2) if jitter > 0 else (0.0, 0.0)
            img = np.exp(-((yy - r - dr) ** 2 + (xx - c - dc) ** 2) / (2 * _BLOB_WIDTH ** 2))
            if noise > 0:
                img = img + rng.normal(0.0, noise, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return LabeledImages(np.asarray(images), np.asarray(labels), split)


def synthetic_split(per_class_train: int = 50, per_class_test: int = 100, seed: int = 0,
                    noise: float = 0.05, jitter: float = 0.0):
    """Train/test pair from independent generator streams."""
    seq = np.random.SeedSequence(seed).spawn(2)
    train = synthetic_blobs(per_class_train, int(seq[0].generate_state(1)[0]), noise, jitter, "train")
    test = synthetic_blobs(per_class_test, int(seq[1].generate_state(1)[0]), noise, jitter, "test")
    return train, test


def _arc(cx, cy, rx, ry, start_deg, end_deg, n=24):
    t = np.radians(np.linspace(start_deg, end_deg, n))
    return np.stack([cx + rx * np.cos(t), cy - ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1, n=12):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.array([x0, y0]) + t * np.array([x1, y1])


def _glyph_strokes():
    """Pen trajectories for m, a, n, c on a 28x28 canvas (x right, y down)."""
    m = [_line(5, 10, 5, 22), _arc(9.5, 14, 4.5, 4, 180, 0), _line(14, 14, 14, 22),
         _arc(18.5, 14, 4.5, 4, 180, 0), _line(23, 14, 23, 22)]
    a = [_arc(13, 17, 5, 5, 0, 360, 32), _line(18, 11, 18, 22), _arc(14, 11, 4, 2.5, 160, 0, 10)]
    n = [_line(8, 10, 8, 22), _arc(14, 14.5, 6, 4.5, 180, 0), _line(20, 14.5, 20, 22)]
    c = [_arc(14.5, 16, 6, 6, 50, 310, 32)]
    return [np.vstack(s) for s in (m, a, n, c)]


_GLYPHS = _glyph_strokes()


def render_glyph(points, pen: float = 1.4, size: int = SOURCE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    d2 = ((grid[:, None, :] - points[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    return np.exp(-d2 / (2 * pen ** 2)).reshape(size, size)


def synthetic_letters(n_per_class: int, seed: int = 0, noise: float = 0.05, distortion: float = 1.0,
                      split: str = "train") -> LabeledImages:
    """Handwriting-like m/a/n/c glyphs, rendered at 28x28 and area-downsampled.

    Each sample gets a random affine warp (rotation, scale, shear, shift) whose
    spread grows with ``distortion``, a random pen width and pixel noise. The
    m/n and a/c pairs overlap strongly at 8x8, so unlike the blob set this is
    not separable in one or two epochs.
    """
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centre = np.array([14.0, 16.0])
    images, labels = [], []
    for cls, pts in enumerate(_GLYPHS):
        for _ in range(n_per_class):
            rot = np.radians(rng.normal(0.0, 8.0 * distortion))
            scale = 1.0 + rng.normal(0.0, 0.08 * distortion, 2)
            shear = rng.normal(0.0, 0.15 * distortion)
            shift = rng.normal(0.0, 1.5 * distortion, 2)
            c, s = np.cos(rot), np.sin(rot)
            warp = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag(scale)
            wobble = rng.normal(0.0, 0.4 * distortion, pts.shape)
            warped = (pts - centre) @ warp.T + centre + shift + wobble
            pen = rng.uniform(1.1, 1.9)
            img = downsample(render_glyph(warped, pen))
            img = img / max(img.max(), 1e-12)
            if noise > 0:
                img = img + rng.normal(0.0, noise, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
    return LabeledImages(np.asarray(images), np.asarray(labels), split)


def synthetic_letter_split(per_class_train: int = 50, per_class_test: int = 100, seed: int = 0,
                           noise: float = 0.05, distortion: float = 1.0):
    seq = np.random.SeedSequence(seed).spawn(2)
    train = synthetic_letters(per_class_train, int(seq[0].generate_state(1)[0]), noise, distortion, "train")
    test = synthetic_letters(per_class_test, int(seq[1].generate_state(1)[0]), noise, distortion, "test")
    return train, test
