"""Deterministic synthetic S1/S2/land-cover patches.

Land cover is a quantile-thresholded Gaussian random field, so classes form
contiguous regions. Optical bands carry the class signature plus texture and
a cloud layer that saturates towards 1.0; SAR bands carry the signature times
multiplicative speckle and ignore clouds. Class proportions drift smoothly
with geographic location (``regional_strength``), so nearby patches look
alike and distant ones do not.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage, special

from .data_model import N_CHANNELS, N_S2, Manifest, ManifestEntry, PatchSample, write_sample

TEXTURE_AMPLITUDE = 0.05
TEXTURE_SMOOTHNESS = 1.5
BASE_DATE = dt.date(2019, 1, 1)


def default_signatures(n_classes: int, seed: int = 7) -> np.ndarray:
    """Per-class 14-vectors of channel means in [0.1, 0.7]."""
    rng = np.random.default_rng(seed)
    while True:
        sig = rng.uniform(0.1, 0.7, size=(n_classes, N_CHANNELS))
        if n_classes < 2 or _min_gap(sig) >= 0.05:
            return sig


def _min_gap(sig: np.ndarray) -> float:
    d = np.linalg.norm(sig[:, None, :] - sig[None, :, :], axis=-1)
    d[np.diag_indices(len(sig))] = np.inf
    return float(d.min())


@dataclass
class SynthConfig:
    seed: int = 0
    n_samples: int = 64
    patch_size: int = 256
    n_classes: int = 5
    field_smoothness: float = 16.0
    cloud_fraction: float = 0.3
    speckle_looks: int = 4
    label_noise: float = 0.1
    regional_strength: float = 3.0
    labeled: bool = True
    dataset_name: str = "synthetic"
    class_signatures: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.class_signatures is None:
            self.class_signatures = default_signatures(self.n_classes)
        self.class_signatures = np.asarray(self.class_signatures, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.n_classes <= 250:
            raise ValueError("n_classes must be in [1, 250]")
        if self.patch_size < 8:
            raise ValueError("patch_size must be >= 8")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.field_smoothness <= 0:
            raise ValueError("field_smoothness must be > 0")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError("cloud_fraction must be in [0, 1]")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be in [0, 1]")
        sig = self.class_signatures
        if sig.shape != (self.n_classes, N_CHANNELS):
            raise ValueError(f"class_signatures must be [{self.n_classes}, {N_CHANNELS}]")
        if np.any((sig < 0) | (sig > 1)):
            raise ValueError("class signatures must lie in [0, 1]")
        if self.n_classes > 1 and _min_gap(sig) < 0.05:
            raise ValueError("class signatures must be pairwise >= 0.05 apart (L2)")


def generate_random_field(seed, size: int, smoothness: float) -> np.ndarray:
    """White noise blurred by a Gaussian of radius ``smoothness`` px, standardised.

    PCG64 noise and a separable, periodic-boundary blur keep the result
    identical across platforms. Radii below half a pixel skip the blur.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.standard_normal((size, size))
    if smoothness >= 0.5:
        noise = ndimage.gaussian_filter(noise, sigma=smoothness, mode="wrap")
    noise -= noise.mean()
    sd = noise.std()
    if sd > 0:
        noise /= sd
    return noise.astype(np.float32)


def _unit_vector(lon: float, lat: float) -> np.ndarray:
    lam, phi = np.radians(lon), np.radians(lat)
    return np.array([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])


def regional_class_fractions(cfg: SynthConfig, location) -> np.ndarray:
    """Target class proportions at ``location``: softmax of per-class dipoles on the sphere."""
    axes = np.random.default_rng([cfg.seed, 0xA11CE]).standard_normal((cfg.n_classes, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    logits = cfg.regional_strength * axes @ _unit_vector(*location)
    return special.softmax(logits)


class SynthLayers(NamedTuple):
    sample: PatchSample
    true_classes: np.ndarray  # uint8 [H, W], before label corruption
    cloud_opacity: np.ndarray  # float32 [H, W], 0 on clear pixels


def _stream_seeds(cfg: SynthConfig, index: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([cfg.seed, index]).spawn(6)


def generate_layers(cfg: SynthConfig, index: int, location) -> SynthLayers:
    """Like :func:`generate_sample` but also returns the clean class map and cloud layer."""
    n = cfg.patch_size
    s_label, s_texture, s_cloud, s_speckle, s_noise, s_date = _stream_seeds(cfg, index)

    field_ = generate_random_field(s_label, n, cfg.field_smoothness).astype(np.float64)
    cum = np.cumsum(regional_class_fractions(cfg, location))[:-1]
    cuts = np.quantile(field_, cum) if cum.size else np.empty(0)
    classes = (np.searchsorted(cuts, field_.ravel(), side="right").reshape(n, n) + 1).astype(np.uint8)

    sig = cfg.class_signatures
    per_pixel = sig[classes - 1].transpose(2, 0, 1)  # [14, H, W]

    texture = np.clip(generate_random_field(s_texture, n, TEXTURE_SMOOTHNESS), -5.0, 5.0)
    s2 = per_pixel[:N_S2] + TEXTURE_AMPLITUDE * texture[None].astype(np.float64)

    if cfg.cloud_fraction > 0:
        cloud_field = generate_random_field(s_cloud, n, cfg.field_smoothness).astype(np.float64)
        # a scene-level shift makes some scenes clear and some fully overcast
        shift = np.random.default_rng(s_cloud.spawn(1)[0]).standard_normal()
        # field + shift has variance 2; P(opacity > 0) == cloud_fraction
        thr = np.sqrt(2.0) * special.ndtri(1.0 - cfg.cloud_fraction) if cfg.cloud_fraction < 1 else -np.inf
        opacity = np.clip((cloud_field + shift - thr) / 0.5, 0.0, 1.0)
    else:
        opacity = np.zeros((n, n))
    s2 = s2 + opacity[None] * (1.0 - s2)

    shape = float(cfg.speckle_looks)
    speckle = np.random.default_rng(s_speckle).gamma(shape, 1.0 / shape, size=(2, n, n))
    s1 = per_pixel[N_S2:] * speckle

    labels = classes.copy()
    if cfg.label_noise > 0 and cfg.n_classes > 1:
        rng = np.random.default_rng(s_noise)
        hit = rng.random((n, n)) < cfg.label_noise
        step = np.where(rng.random((n, n)) < 0.5, -1, 1)
        moved = labels.astype(np.int64) + step
        # reflect at the ends of the code range
        moved = np.where(moved < 1, 2, moved)
        moved = np.where(moved > cfg.n_classes, cfg.n_classes - 1, moved)
        labels = np.where(hit, moved, labels).astype(np.uint8)

    drng = np.random.default_rng(s_date)
    s2_day = BASE_DATE + dt.timedelta(days=int(drng.integers(365)))
    s1_day = s2_day + dt.timedelta(days=int(drng.integers(-3, 4)))
    lon, lat = float(location[0]), float(location[1])
    sample = PatchSample(
        sample_id=f"{cfg.dataset_name}_{index:06d}",
        lon=lon,
        lat=lat,
        s2=s2.astype(np.float32),
        s1=s1.astype(np.float32),
        lc=labels if cfg.labeled else None,
        s2_date=s2_day.isoformat(),
        s1_date=s1_day.isoformat(),
    )
    return SynthLayers(sample, classes, opacity.astype(np.float32))


def generate_sample(cfg: SynthConfig, index: int, location) -> PatchSample:
    return generate_layers(cfg, index, location).sample


def generate_dataset(cfg: SynthConfig, locations, root) -> Manifest:
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    if len(locations) != cfg.n_samples:
        raise ValueError(f"{len(locations)} locations for n_samples={cfg.n_samples}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, loc in enumerate(locations):
        s = generate_sample(cfg, i, loc)
        write_sample(s, root)
        entries.append(ManifestEntry(s.sample_id, s.lon, s.lat, s.sample_id, s.has_label))
    manifest = Manifest(cfg.dataset_name, cfg.patch_size, entries, created_seed=cfg.seed, root=root)
    manifest.save(root)
    return manifest
