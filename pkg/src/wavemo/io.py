"""File formats: PFM/PGM images, key=value manifests and CSV tables."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np


def write_pfm(path, image: np.ndarray) -> None:
    """Write a single-channel little-endian PFM (scale -1.0, rows bottom-up)."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D array, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(image)).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only grayscale PFM ('Pf') is supported, got {kind!r}")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM payload")
    return np.flipud(data.reshape(h, w)).astype(float)


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM; values are clipped to [0, 1] for display."""
    image = np.asarray(image, dtype=float)
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(raw[pos:], dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(float) / maxval


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    raise ValueError(f"unsupported image format: {path.suffix}")


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def array_digest(*arrays) -> str:
    """Short content hash used to tie stacks to the modulations that made them."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
