"""Toy 2-D datasets and an IDX image reader."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803

DATASETS = ("two_moons", "gaussian_ring", "checkerboard", "idx_images")


class DatasetError(ValueError):
    pass


def two_moons(n: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    n_upper = n // 2
    n_lower = n - n_upper
    a = rng.uniform(0.0, np.pi, n_upper)
    b = rng.uniform(0.0, np.pi, n_lower)
    upper = np.stack([np.cos(a), np.sin(a)], axis=1)
    lower = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    x = np.concatenate([upper, lower])[rng.permutation(n)]
    return x + noise * rng.standard_normal(x.shape)


def gaussian_ring(n: int, rng: np.random.Generator, radius: float = 1.0,
                  modes: int = 8, std: float = 0.05) -> np.ndarray:
    k = rng.integers(0, modes, n)
    ang = 2.0 * np.pi * k / modes
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + std * rng.standard_normal((n, 2))


def checkerboard(n: int, rng: np.random.Generator, cells: int = 4) -> np.ndarray:
    # rejection-free: pick a dark cell, then a uniform point inside it
    dark = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
    pick = rng.integers(0, len(dark), n)
    ij = np.asarray(dark, dtype=np.float64)[pick]
    x = ij + rng.uniform(0.0, 1.0, (n, 2))
    return x * (4.0 / cells) - 2.0


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Raw IDX (type 0x0803) image file as ``[n, rows*cols]`` float values."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DatasetError(f"{path}: IDX header truncated ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    expected = n * rows * cols
    body = raw[16:]
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows * cols).astype(np.float64)


def normalize(x: np.ndarray) -> np.ndarray:
    """Zero mean and unit standard deviation per dimension (constant dims left at scale 1)."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu) / sd


def dataset(name: str, n: int, rng: Optional[np.random.Generator] = None,
            path=None, normalized: bool = True, **kwargs) -> np.ndarray:
    if n < 1:
        raise DatasetError("n must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    if name == "two_moons":
        x = two_moons(n, rng, **kwargs)
    elif name == "gaussian_ring":
        x = gaussian_ring(n, rng, **kwargs)
    elif name == "checkerboard":
        x = checkerboard(n, rng, **kwargs)
    elif name == "idx_images":
        if path is None:
            raise DatasetError("idx_images needs a file path")
        x = read_idx_images(path)
        if n < x.shape[0]:
            x = x[rng.permutation(x.shape[0])[:n]]
    else:
        raise DatasetError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    return normalize(x) if normalized else x
