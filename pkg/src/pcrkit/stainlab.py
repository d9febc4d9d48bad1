"""Color-space machinery for stain handling.

sRGB <-> CIELAB conversion (D65 white point, standard gamma), Reinhard
per-channel statistics matching in LAB, and randomized virtual-template
augmentation driven by Gaussians fitted over a training set's stain
statistics. All statistics are population (not sample) moments, and the
reinhard/image_stats pair must agree on that convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyImage, EmptySet
from .util import seeded_rng

# sRGB (linear) -> XYZ, D65 reference white
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
_WHITE = np.array([0.95047, 1.0, 1.08883])
_DELTA = 6.0 / 29.0


@dataclass
class LabStats:
    """Per-channel LAB mean and population std of one image."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """8-bit sRGB image -> float64 CIELAB (L* in [0,100])."""
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB2XYZ.T / _WHITE
    f = np.where(xyz > _DELTA**3, np.cbrt(xyz), xyz / (3 * _DELTA**2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIELAB -> 8-bit sRGB; out-of-gamut values clamp after rounding."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > _DELTA, f**3, 3 * _DELTA**2 * (f - 4.0 / 29.0)) * _WHITE
    linear = xyz @ _XYZ2RGB.T
    # negative / small values take the linear branch, so no NaN from the power
    srgb = np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(np.maximum(linear, 0.0031308), 1.0 / 2.4) - 0.055,
    )
    return np.clip(np.rint(srgb * 255.0), 0, 255).astype(np.uint8)


def image_stats_lab(img: np.ndarray) -> LabStats:
    """Per-channel LAB mean and population std of an 8-bit RGB image."""
    arr = np.asarray(img)
    if arr.size == 0:
        raise EmptyImage("cannot compute stats of an empty image")
    lab = rgb_to_lab(arr).reshape(-1, 3)
    return LabStats(mean=lab.mean(axis=0), std=lab.std(axis=0))


def _lab_stats(lab: np.ndarray) -> LabStats:
    flat = lab.reshape(-1, 3)
    return LabStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def reinhard_lab(lab: np.ndarray, template: LabStats) -> np.ndarray:
    """Exact per-channel affine match in LAB space (no quantization)."""
    src = _lab_stats(lab)
    scale = template.std / np.maximum(src.std, 1e-6)
    return (lab - src.mean) * scale + template.mean


def reinhard(img: np.ndarray, template: LabStats) -> np.ndarray:
    """Match the image's LAB channel statistics to the template's.

    The affine map is exact in LAB; the returned image additionally went
    through 8-bit quantization and gamut clamping.
    """
    return lab_to_rgb(reinhard_lab(rgb_to_lab(img), template))


@dataclass
class StainDistribution:
    """Per-channel Gaussians over template means and template stds."""

    mean_of_means: np.ndarray
    std_of_means: np.ndarray
    mean_of_stds: np.ndarray
    std_of_stds: np.ndarray
    fit_digest: str = ""

    def __post_init__(self):
        for name in ("mean_of_means", "std_of_means", "mean_of_stds", "std_of_stds"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "mean_of_means": self.mean_of_means.tolist(),
            "std_of_means": self.std_of_means.tolist(),
            "mean_of_stds": self.mean_of_stds.tolist(),
            "std_of_stds": self.std_of_stds.tolist(),
            "fit_digest": self.fit_digest,
        }

    @staticmethod
    def from_dict(d: dict) -> "StainDistribution":
        return StainDistribution(
            d["mean_of_means"], d["std_of_means"], d["mean_of_stds"], d["std_of_stds"],
            d.get("fit_digest", ""),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True)

    @staticmethod
    def load(path) -> "StainDistribution":
        with open(path, "r", encoding="utf-8") as f:
            return StainDistribution.from_dict(json.load(f))


def fit_stain_distribution(imgs: list[np.ndarray]) -> StainDistribution:
    """Fit template-statistics Gaussians over a collection of images."""
    if len(imgs) < 1:
        raise EmptySet("need at least one image to fit a stain distribution")
    stats = [image_stats_lab(im) for im in imgs]
    means = np.stack([s.mean for s in stats])
    stds = np.stack([s.std for s in stats])
    import hashlib

    h = hashlib.sha256()
    h.update(means.tobytes())
    h.update(stds.tobytes())
    return StainDistribution(
        mean_of_means=means.mean(axis=0),
        std_of_means=means.std(axis=0),
        mean_of_stds=stds.mean(axis=0),
        std_of_stds=stds.std(axis=0),
        fit_digest=h.hexdigest()[:16],
    )


def sample_template(dist: StainDistribution, rng: np.random.Generator) -> LabStats:
    mean = rng.normal(dist.mean_of_means, dist.std_of_means)
    std = np.maximum(rng.normal(dist.mean_of_stds, dist.std_of_stds), 0.0)
    return LabStats(mean=mean, std=std)


def randstain_augment(img: np.ndarray, dist: StainDistribution, rng_seed: int) -> np.ndarray:
    """Reinhard to a virtual template sampled from the fitted Gaussians.

    Negative sampled stds clamp to 0; the draw is fully determined by
    rng_seed, so augmentation is reproducible per (seed, epoch, record).
    """
    rng = seeded_rng(rng_seed, "randstain")
    return reinhard(img, sample_template(dist, rng))
