"""Small file helpers: CSV tables, PGM images, key-value configs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

# +inf dB is written as this cap in tables.
SNR_CAP_DB = 300.0


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isinf(v):
            v = SNR_CAP_DB if v > 0 else -SNR_CAP_DB
        return repr(v)
    return str(value)


def write_table(path, header, records) -> None:
    """Write a CSV with ``\\n`` line endings and round-trippable floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([_fmt(v) for v in rec])


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def to_gray(image, vmin: float, vmax: float) -> np.ndarray:
    """Linearly map [vmin, vmax] to 0..255, clipping outside values."""
    img = np.asarray(image, dtype=float)
    if vmax <= vmin:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = np.clip((img - vmin) / (vmax - vmin), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, image, vmin: float, vmax: float) -> None:
    """Binary 8-bit PGM (P5)."""
    gray = to_gray(image, vmin, vmax)
    rows, cols = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


def parse_keyvalue(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Values are decoded as JSON when possible (numbers, lists, booleans,
    quoted strings), otherwise kept as bare strings.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            if value in ("inf", "+inf"):
                out[key] = math.inf
            else:
                out[key] = value
    return out


def format_keyvalue(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, float) and math.isinf(value):
            lines.append(f"{key} = inf")
        else:
            lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
