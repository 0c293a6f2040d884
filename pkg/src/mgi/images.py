"""Grayscale image I/O (PGM, CSV, PNG previews) and the built-in test object."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np
from PIL import Image

from mgi.correlation import ObjectImage

BUILTIN = "builtin:glyph"
_DATA = Path(__file__).parent / "data"


class ImageFormatError(ValueError):
    pass


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a plain (P2) or binary (P5) PGM; returns (pixels, maxval)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        m = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise ImageFormatError(f"{path}: not a PGM file (magic {magic!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid PGM dimensions or maxval")
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=np.int64)
    else:
        raw = data[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = width * height * dtype.itemsize
        if len(raw) < need:
            raise ImageFormatError(f"{path}: expected {need} bytes of pixel data, got {len(raw)}")
        values = np.frombuffer(raw[:need], dtype=dtype).astype(np.int64)
    if values.size != width * height:
        raise ImageFormatError(f"{path}: expected {width * height} pixels, got {values.size}")
    if values.min() < 0 or values.max() > maxval:
        raise ImageFormatError(f"{path}: pixel values outside 0..{maxval}")
    return values.reshape(height, width), maxval


def write_pgm(path: str | Path, pixels: np.ndarray, maxval: int = 65535) -> None:
    """Binary PGM; 16-bit big-endian samples when ``maxval > 255``."""
    pixels = np.asarray(pixels)
    height, width = pixels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


def to_levels(values: np.ndarray, maxval: int, lo: float | None = None,
              hi: float | None = None) -> np.ndarray:
    """Linear map of [lo, hi] (default: data range) onto 0..maxval, clipped."""
    values = np.asarray(values, dtype=float)
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(scaled * maxval).astype(np.int64)


def write_image(stem: str | Path, values: np.ndarray, lo: float | None = None,
                hi: float | None = None) -> list[Path]:
    """Write ``stem.pgm`` (16-bit) and an 8-bit ``stem.png`` preview."""
    stem = Path(stem)
    pgm, png = stem.with_suffix(".pgm"), stem.with_suffix(".png")
    write_pgm(pgm, to_levels(values, 65535, lo, hi))
    Image.fromarray(to_levels(values, 255, lo, hi).astype(np.uint8), mode="L").save(png, optimize=False)
    return [pgm, png]


def read_csv_grid(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    try:
        values = np.array([[float(cell) for cell in row] for row in rows])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: non-numeric CSV entry ({exc})") from None
    if values.ndim != 2 or values.size == 0:
        raise ImageFormatError(f"{path}: CSV rows have unequal lengths or no data")
    return values


def glyph(grid: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Binary test object: a ring with a bar and an off-centre square.

    Asymmetric so that the inversion of ghost images is visible.
    """
    rows, cols = grid
    y, x = np.mgrid[0:rows, 0:cols]
    u = (x + 0.5) / cols - 0.5
    v = (y + 0.5) / rows - 0.5
    r = np.hypot(u - 0.05, v + 0.05)
    ring = (r > 0.22) & (r < 0.34)
    bar = (np.abs(u - 0.05) < 0.06) & (v > -0.3) & (v < 0.2)
    square = (u > -0.44) & (u < -0.26) & (v > 0.26) & (v < 0.44)
    return (ring | bar | square).astype(float)


def load_object(path: str | Path, grid: tuple[int, int] | None = None) -> ObjectImage:
    """Load a transparency map from PGM (P2/P5) or CSV, or the built-in glyph.

    PGM samples are mapped linearly from 0..maxval to [0, 1]; CSV values are
    taken as transparencies directly.
    """
    if str(path) == BUILTIN:
        if grid is None or tuple(grid) == (64, 64):
            pixels, maxval = read_pgm(bundled_object_path())
            values = pixels / maxval
        else:
            values = glyph(grid)
    else:
        p = Path(path)
        if not p.is_file():
            raise ImageFormatError(f"object file not found: {p}")
        if p.suffix.lower() == ".csv":
            values = read_csv_grid(p)
        else:
            pixels, maxval = read_pgm(p)
            values = pixels / maxval
    if grid is not None and values.shape != tuple(grid):
        raise ImageFormatError(f"object is {values.shape[0]}x{values.shape[1]}, grid is {grid[0]}x{grid[1]}")
    if values.min() < 0 or values.max() > 1:
        raise ImageFormatError(f"transparency values outside [0, 1]: [{values.min()}, {values.max()}]")
    return ObjectImage(values)


def bundled_object_path() -> Path:
    return _DATA / "glyph64.pgm"
