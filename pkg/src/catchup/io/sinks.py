"""Metrics CSV sinks, run manifests and a PPM writer."""
from __future__ import annotations

import csv
import json
import subprocess
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from ..trainer import MetricsRecord


def _fmt(v) -> str:
    # repr keeps every bit of a float, so identical runs give identical files
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvMetricsSink:
    """Writes MetricsRecord rows in field order.

    Wall-clock time goes to a separate ``timing`` file so the metrics file
    itself is reproducible bit for bit.
    """

    def __init__(self, path, timing_path=None):
        self.path = Path(path)
        self.timing_path = Path(timing_path) if timing_path is not None else None
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._tfh = open(self.timing_path, "w", newline="") if self.timing_path else None
        self._header = False
        self.rows = 0

    def __call__(self, rec: MetricsRecord) -> None:
        cols, vals = rec.columns()[:-1], rec.values()[:-1]
        if not self._header:
            self._writer.writerow(cols)
            if self._tfh:
                self._tfh.write("iteration,wall_ms\n")
            self._header = True
        self._writer.writerow([_fmt(v) for v in vals])
        if self._tfh:
            self._tfh.write(f"{rec.iteration},{rec.wall_ms:.3f}\n")
        self.rows += 1

    def close(self) -> None:
        self._fh.close()
        if self._tfh:
            self._tfh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_rows(path, header: Sequence[str], rows: Sequence[Sequence[Any]],
               comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_points(path) -> np.ndarray:
    """Float matrix from a CSV written by ``write_rows`` (comment lines and header skipped)."""
    return np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", skiprows=_header_rows(path)))


def _header_rows(path) -> int:
    n = 0
    with open(path) as fh:
        for line in fh:
            n += 1
            if not line.startswith("#"):
                # first non-comment line is the column header
                return n
    return n


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return f"artifact-{version('artifact')}"
    except PackageNotFoundError:
        return "unknown"


def write_manifest(path, command: str, config: dict, seeds: dict,
                   extra: Optional[dict] = None) -> Path:
    """Resolved config, seeds and build id as JSON; no timestamps, so reruns match."""
    doc = {"command": command, "build_id": build_id(), "config": config, "seeds": seeds}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from an ``[h, w, 3]`` uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected [h, w, 3], got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def image_grid(images: np.ndarray, side: Optional[int] = None, cols: int = 8) -> np.ndarray:
    """Tile flattened square grey images into one RGB grid (values min-max scaled)."""
    images = np.asarray(images, dtype=np.float64)
    n, d = images.shape
    side = side or int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"cannot reshape {d} values into a square image")
    lo, hi = images.min(), images.max()
    scaled = np.zeros_like(images) if hi == lo else (images - lo) / (hi - lo)
    rows = -(-n // cols)
    grid = np.zeros((rows * side, cols * side))
    for k in range(n):
        r, c = divmod(k, cols)
        grid[r * side:(r + 1) * side, c * side:(c + 1) * side] = scaled[k].reshape(side, side)
    grey = np.round(grid * 255).astype(np.uint8)
    return np.repeat(grey[:, :, None], 3, axis=2)
