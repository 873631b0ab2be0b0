"""Kernel Inception Distance with a pluggable feature extractor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FeatureSet:
    features: np.ndarray        # [m, d]
    source: str = "real"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need at least 2 feature vectors, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("feature set contains non-finite values")
        self.features = f

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class KidReport:
    estimates: list
    subset_size: int
    n_subsets: int
    mean_x100: float = field(init=False)
    std_x100: float = field(init=False)

    def __post_init__(self):
        est = np.asarray(self.estimates, dtype=np.float64)
        self.mean_x100 = float(100.0 * est.mean())
        self.std_x100 = float(100.0 * est.std())

    def summary(self) -> str:
        return (f"KID x100: {self.mean_x100:.4f} +/- {self.std_x100:.4f} "
                f"(subset={self.subset_size}, n={self.n_subsets})")

    def key_values(self) -> str:
        lines = [f"kid_mean_x100={self.mean_x100!r}", f"kid_std_x100={self.std_x100!r}",
                 f"subset_size={self.subset_size}", f"n_subsets={self.n_subsets}"]
        lines += [f"estimate_{i}={e!r}" for i, e in enumerate(self.estimates)]
        return "\n".join(lines)


def poly_kernel(x, y, d: int | None = None):
    """Cubic polynomial kernel ``(x.y / d + 1)^3``.

    Accepts single vectors or row-stacked matrices (returns the Gram matrix).
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    d = x.shape[-1] if d is None else d
    if x.ndim == 1 and y.ndim == 1:
        return float((x @ y / d + 1.0) ** 3)
    return (np.atleast_2d(x) @ np.atleast_2d(y).T / d + 1.0) ** 3


def mmd2_unbiased(x, y, kernel=poly_kernel) -> float:
    """Unbiased squared MMD; can be negative."""
    x = x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)
    y = y.features if isinstance(y, FeatureSet) else np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("mmd2_unbiased needs at least 2 samples per set")
    kxx, kyy, kxy = kernel(x, x), kernel(y, y), kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def kid_score(real: FeatureSet, fake: FeatureSet, subset_size: int = 100, n_subsets: int = 10,
              seed: int = 0, kernel=poly_kernel) -> KidReport:
    """Mean and spread of ``mmd2_unbiased`` over random subset pairs."""
    if subset_size < 2:
        raise ValueError("subset_size must be >= 2")
    if len(real) < subset_size or len(fake) < subset_size:
        raise ValueError(
            f"need {subset_size} samples per set, have {len(real)} real / {len(fake)} fake")
    rng = np.random.default_rng(seed)
    estimates = []
    for _ in range(n_subsets):
        # Sorted, so a full-set subset sums in file order whatever the draw.
        ir = np.sort(rng.choice(len(real), subset_size, replace=False))
        jf = np.sort(rng.choice(len(fake), subset_size, replace=False))
        estimates.append(mmd2_unbiased(real.features[ir], fake.features[jf], kernel))
    return KidReport(estimates, subset_size, n_subsets)


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------

class RandomProjectionExtractor:
    """Fixed feature map: 2x average-pool pyramid -> flatten -> Gaussian projection -> ReLU.

    The pyramid holds the half-, quarter- and eighth-resolution pools of the
    image (fewer for tiny inputs), concatenated before projection.
    """

    def __init__(self, img_size: int, dim: int = 64, seed: int = 0, levels: int = 3):
        self.img_size = img_size
        self.dim = dim
        self.levels = max(1, min(levels, int(np.log2(img_size))))
        n_in = sum(3 * (img_size >> k) ** 2 for k in range(1, self.levels + 1))
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)

    def pyramid(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, self.img_size, self.img_size):
            raise ValueError(
                f"extractor expects [B, 3, {self.img_size}, {self.img_size}], got {images.shape}")
        feats, cur = [], images
        for _ in range(self.levels):
            b, c, h, w = cur.shape
            cur = cur.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
            feats.append(cur.reshape(b, -1))
        return np.concatenate(feats, axis=1)

    def pre_activation(self, images: np.ndarray) -> np.ndarray:
        return self.pyramid(images) @ self.projection

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return np.maximum(self.pre_activation(images), 0.0)


def feature_extract(images, extractor, source: str = "real") -> FeatureSet:
    data = images.data if hasattr(images, "data") and not isinstance(images, np.ndarray) else images
    feats = np.asarray(extractor(np.asarray(data)))
    if feats.ndim != 2 or feats.shape[1] != extractor.dim:
        raise ValueError(f"extractor returned {feats.shape}, declared dim {extractor.dim}")
    return FeatureSet(feats, source)
