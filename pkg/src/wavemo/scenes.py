"""Procedural test scenes: smooth Gaussian blobs plus anti-aliased polyline strokes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from wavemo import io


def _segment_distance(yy, xx, p0, p1):
    d = p1 - p0
    L2 = float(d @ d) or 1e-12
    t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))


def procedural_scene(rng: np.random.Generator, n: int, n_blobs: int | None = None,
                     n_strokes: int | None = None, border: float = 0.08) -> np.ndarray:
    """Random scene in [0, 1] on an ``n x n`` grid.

    Content is tapered to zero within ``border * n`` pixels of the edge so
    circular convolution does not wrap bright structure across the frame.
    """
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    img = np.zeros((n, n))
    n_blobs = rng.integers(3, 7) if n_blobs is None else n_blobs
    n_strokes = rng.integers(2, 5) if n_strokes is None else n_strokes
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        s = rng.uniform(0.04, 0.15) * n
        img += rng.uniform(0.2, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    for _ in range(n_strokes):
        pts = rng.uniform(0.15 * n, 0.85 * n, size=(rng.integers(2, 5), 2))
        width = rng.uniform(0.6, 1.4)
        amp = rng.uniform(0.3, 0.7)
        dist = np.min([_segment_distance(yy, xx, a, b) for a, b in zip(pts[:-1], pts[1:])], axis=0)
        img += amp * np.exp(-0.5 * (dist / width) ** 2)
    img = np.clip(img, 0.0, 1.0)
    return img * _taper(n, border)


def _taper(n: int, border: float) -> np.ndarray:
    w = max(int(round(border * n)), 1)
    ramp = np.ones(n)
    edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(w) + 0.5) / w)
    ramp[:w] = edge
    ramp[-w:] = edge[::-1]
    return np.outer(ramp, ramp)


SCENE_STREAM = 0x5CE7E


class SceneSource:
    """Deterministic stream of scenes: procedural, or images from a directory."""

    def __init__(self, n: int, seed: int = 0, directory=None):
        self.n = n
        # keyed stream: never shares draws with samplers seeded by the same integer
        self.rng = np.random.default_rng([seed, SCENE_STREAM])
        self.files = []
        if directory is not None:
            self.files = sorted(p for p in Path(directory).iterdir()
                                if p.suffix.lower() in (".pfm", ".pgm"))
            if not self.files:
                raise ValueError(f"no PFM/PGM scenes found in {directory}")
        self._next = 0

    def __call__(self) -> np.ndarray:
        if not self.files:
            return procedural_scene(self.rng, self.n)
        img = io.read_image(self.files[self._next % len(self.files)])
        self._next += 1
        if img.shape != (self.n, self.n):
            raise ValueError(f"scene {img.shape} does not match grid {self.n}")
        return img
