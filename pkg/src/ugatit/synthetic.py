"""Seeded toy domains: bright filled squares or disks on dark noise."""
from __future__ import annotations

from pathlib import Path

import numpy as np

SHAPES = ("square", "disk")


def shape_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``[3, size, size]`` float32 image in [-1, 1]."""
    if kind not in SHAPES:
        raise ValueError(f"kind must be one of {SHAPES}, got {kind!r}")
    img = rng.uniform(0.0, 0.25, (3, size, size))          # dark noise in [0, 1]
    r = rng.uniform(0.18, 0.3) * size                       # half-side or radius
    cy, cx = rng.uniform(r, size - r, 2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    color = rng.uniform(0.75, 1.0, 3)
    img[:, mask] = color[:, None]
    return (img * 2.0 - 1.0).astype(np.float32)


def shape_domain(kind: str, n: int = 64, size: int = 32, seed: int = 0) -> np.ndarray:
    """``[n, 3, size, size]`` images; fully determined by ``(kind, n, size, seed)``."""
    rng = np.random.default_rng([seed, SHAPES.index(kind)])
    return np.stack([shape_image(kind, size, rng) for _ in range(n)])


def write_domain(directory, images: np.ndarray, prefix: str = "img") -> list[Path]:
    from .io import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = d / f"{prefix}_{i:04d}.png"
        save_image(p, img)
        paths.append(p)
    return paths
