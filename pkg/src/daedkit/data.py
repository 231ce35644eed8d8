"""Datasets and image files: synthetic families, IDX ingestion, PGM/PPM export."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import ImageBatch
from .numerics import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 2**31 - 1
SPLITS = {"train": 0, "eval": 1}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic:blobs"  # synthetic:blobs | synthetic:stripes | idx:<images>[,<labels>]
    size: int = 16
    channels: int = 1
    count: int = 1024
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if not (self.source.startswith("synthetic:") or self.source.startswith("idx:")):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source.startswith("synthetic:") and self.source.split(":", 1)[1] not in ("blobs", "stripes"):
            raise ValueError(f"unknown synthetic family {self.source!r}")
        if self.count < 1 or self.size < 1 or self.channels < 1:
            raise ValueError("count, size and channels must be >= 1")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {tuple(SPLITS)}")

    @property
    def dataset_id(self) -> str:
        return f"{self.source}/{self.split}/{self.size}px/seed{self.seed}"


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _blobs(rng: Rng, n: int, size: int, channels: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.zeros((n, channels, size, size))
    counts = rng.integers(1, 4, n)
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(counts[i]):
            cy, cx = 0.15 + 0.7 * rng.uniform(2)
            width = 0.06 + 0.08 * rng.uniform()
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        tint = 0.6 + 0.4 * rng.uniform(channels) if channels > 1 else np.ones(1)
        out[i] = np.clip(img, 0, 1)[None] * tint[:, None, None]
    return out


def _stripes(rng: Rng, n: int, size: int, channels: int) -> np.ndarray:
    yy, xx = _grid(size)
    out = np.zeros((n, channels, size, size))
    for i in range(n):
        period = 0.25 + 0.2 * rng.uniform()
        phase = rng.uniform()
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        wave = np.sin(2 * np.pi * ((xx + direction * yy) / (period * math.sqrt(2)) + phase))
        bars = 0.5 + 0.5 * np.tanh(4.0 * wave)
        tint = 0.6 + 0.4 * rng.uniform(channels) if channels > 1 else np.ones(1)
        out[i] = bars[None] * tint[:, None, None]
    return out


def gen_synthetic(spec: DatasetSpec) -> ImageBatch:
    """Blobs (1-3 Gaussian bumps) or diagonal stripes, mapped to [-1, 1]."""
    family = spec.source.split(":", 1)[1]
    rng = Rng(spec.seed).spawn(SPLITS[spec.split], 0 if family == "blobs" else 1)
    make = _blobs if family == "blobs" else _stripes
    img = make(rng, spec.count, spec.size, spec.channels)
    x = torch.from_numpy(np.clip(img * 2.0 - 1.0, -1.0, 1.0)).float()
    return ImageBatch(x, provenance=spec.dataset_id)


def load_dataset(spec: DatasetSpec) -> ImageBatch:
    if spec.source.startswith("synthetic:"):
        return gen_synthetic(spec)
    paths = spec.source.split(":", 1)[1].split(",")
    batch, _ = load_idx(paths[0], paths[1] if len(paths) > 1 else None)
    return ImageBatch(batch.tensor[: spec.count], provenance=batch.provenance)


# --- IDX -----------------------------------------------------------------------------


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_IDX_ELEMENTS:
            raise IdxDimensionError(f"{path}: declared dimensions {dims} overflow")
    payload = len(data) - header
    if payload < count:
        raise IdxTruncatedError(f"{path}: payload has {payload} bytes, dimensions {dims} need {count}")
    if payload > count:
        raise IdxDimensionError(f"{path}: payload has {payload} bytes, dimensions {dims} declare {count}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path | None = None):
    """Read IDX u8 images (and optional labels); pixels map linearly to [-1, 1]."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    x = torch.from_numpy(raw.astype(np.float64) * 2.0 / 255.0 - 1.0).float().unsqueeze(1)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if len(labels) != len(raw):
            raise IdxDimensionError("label count does not match image count")
        labels = torch.from_numpy(labels.astype(np.int64))
    return ImageBatch(x, provenance=f"idx:{Path(images_path).name}"), labels


def write_idx_images(path: str | Path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3:
        raise ValueError("expected (N, H, W) pixels")
    path = Path(path)
    path.write_bytes(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *pixels.shape) + pixels.tobytes())
    return path


def write_idx_labels(path: str | Path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    path = Path(path)
    path.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())
    return path


# --- PGM / PPM --------------------------------------------------------------------------


def quantize(x: torch.Tensor | np.ndarray) -> np.ndarray:
    """[-1, 1] -> {0..255}, rounding halves away from zero."""
    v = 255.0 * (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
    return np.floor(v + 0.5).astype(np.uint8)


def write_pnm(path: str | Path, image: np.ndarray) -> Path:
    """Binary P5 (C=1) or P6 (C=3) from a (C, H, W) uint8 array."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError("PGM/PPM need 1 or 3 channels")
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())
    return path


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError("only 8-bit binary PGM/PPM supported")
    c = 1 if magic == b"P5" else 3
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return px.reshape(h, w, c).transpose(2, 0, 1).copy()


def tile(batch: torch.Tensor, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Arrange a batch into one (C, H', W') uint8 sheet."""
    q = quantize(batch.detach().cpu().numpy())
    n, c, h, w = q.shape
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    sheet = np.zeros((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        sheet[:, pad + r * (h + pad):pad + r * (h + pad) + h, pad + k * (w + pad):pad + k * (w + pad) + w] = q[i]
    return sheet


def export_images(batch: torch.Tensor, directory: str | Path, fmt: str | None = None,
                  prefix: str = "img", sheet: bool = False) -> list[Path]:
    """Write each image (or one tiled sheet) as binary PGM/PPM."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c = batch.shape[1]
    fmt = fmt or ("pgm" if c == 1 else "ppm")
    if (fmt == "pgm") != (c == 1) or fmt not in ("pgm", "ppm"):
        raise ValueError(f"format {fmt!r} does not fit {c}-channel images")
    if sheet:
        return [write_pnm(directory / f"{prefix}_sheet.{fmt}", tile(batch))]
    q = quantize(batch.detach().cpu().numpy())
    return [write_pnm(directory / f"{prefix}_{i:04d}.{fmt}", q[i]) for i in range(len(q))]
