"""On-disk dataset container, manifests, band statistics and normalization.

Each sample lives in its own directory::

    <root>/<sample_id>/S2.f32    float32 little-endian, C-order [12, H, W]
    <root>/<sample_id>/S1.f32    float32 little-endian, C-order [2, H, W]  (VV, VH)
    <root>/<sample_id>/LC.u8     uint8 [H, W], omitted for unlabeled samples
    <root>/<sample_id>/meta.json lon, lat, dates, patch_size, has_label

A dataset root additionally carries ``manifest.json`` and ``band_stats.json``.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_S2 = 12
N_S1 = 2
N_CHANNELS = N_S2 + N_S1
S2_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12")
S1_BANDS = ("VV", "VH")
CHANNEL_NAMES = S2_BANDS + S1_BANDS
MAX_DATE_GAP_DAYS = 3
DEFAULT_PATCH_SIZE = 256

MANIFEST_FILE = "manifest.json"
BAND_STATS_FILE = "band_stats.json"

_F32 = np.dtype("<f4")
_U8 = np.dtype("u1")


class SampleError(ValueError):
    """A sample violates the container invariants or is corrupt on disk."""


@dataclass
class PatchSample:
    sample_id: str
    lon: float
    lat: float
    s2: np.ndarray
    s1: np.ndarray
    lc: np.ndarray | None = None
    s2_date: str = "2019-01-01"
    s1_date: str = "2019-01-01"

    @property
    def patch_size(self) -> int:
        return int(self.s2.shape[-1])

    @property
    def has_label(self) -> bool:
        return self.lc is not None

    def validate(self, max_label: int = 250) -> None:
        """Raise :class:`SampleError` if any container invariant is broken."""
        if not self.sample_id or "/" in self.sample_id or self.sample_id.startswith("."):
            raise SampleError(f"invalid sample_id {self.sample_id!r}")
        if not (-180.0 <= self.lon < 180.0):
            raise SampleError(f"{self.sample_id}: lon {self.lon} outside [-180, 180)")
        if not (-90.0 <= self.lat <= 90.0):
            raise SampleError(f"{self.sample_id}: lat {self.lat} outside [-90, 90]")
        s2, s1 = np.asarray(self.s2), np.asarray(self.s1)
        if s2.ndim != 3 or s2.shape[0] != N_S2:
            raise SampleError(f"{self.sample_id}: s2 shape {s2.shape}, expected [12, H, W]")
        size = s2.shape[1]
        if s2.shape != (N_S2, size, size):
            raise SampleError(f"{self.sample_id}: s2 patch is not square: {s2.shape}")
        if s1.shape != (N_S1, size, size):
            raise SampleError(f"{self.sample_id}: s1 shape {s1.shape}, expected {(N_S1, size, size)}")
        for name, arr in (("s2", s2), ("s1", s1)):
            bad = ~np.isfinite(arr)
            if bad.any():
                loc = tuple(int(i) for i in np.argwhere(bad)[0])
                raise SampleError(f"{self.sample_id}: non-finite value in {name} at {loc}")
        if self.lc is not None:
            lc = np.asarray(self.lc)
            if lc.shape != (size, size):
                raise SampleError(f"{self.sample_id}: lc shape {lc.shape}, expected {(size, size)}")
            if lc.size and int(lc.max()) > max_label:
                raise SampleError(f"{self.sample_id}: label code {int(lc.max())} > {max_label}")
        gap = abs((_parse_date(self.s2_date) - _parse_date(self.s1_date)).days)
        if gap > MAX_DATE_GAP_DAYS:
            raise SampleError(
                f"{self.sample_id}: S1/S2 acquisitions {gap} days apart (max {MAX_DATE_GAP_DAYS})"
            )

    def stacked(self) -> np.ndarray:
        """Channels concatenated as S2[0..11], VV, VH."""
        return np.concatenate([self.s2, self.s1], axis=0)


def _parse_date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except (TypeError, ValueError) as exc:
        raise SampleError(f"invalid ISO-8601 date {s!r}") from exc


def write_sample(sample: PatchSample, root: str | os.PathLike) -> Path:
    sample.validate()
    out = Path(root) / sample.sample_id
    out.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(sample.s2, dtype=_F32).tofile(out / "S2.f32")
    np.ascontiguousarray(sample.s1, dtype=_F32).tofile(out / "S1.f32")
    lc_path = out / "LC.u8"
    if sample.lc is not None:
        np.ascontiguousarray(sample.lc, dtype=_U8).tofile(lc_path)
    elif lc_path.exists():
        lc_path.unlink()
    meta = {
        "sample_id": sample.sample_id,
        "lon": float(sample.lon),
        "lat": float(sample.lat),
        "s2_date": sample.s2_date,
        "s1_date": sample.s1_date,
        "patch_size": sample.patch_size,
        "has_label": sample.has_label,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def _read_raw(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise SampleError(f"missing file {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise SampleError(f"{path}: {actual} bytes, expected {expected} for shape {list(shape)}")
    return np.fromfile(path, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def read_sample(root: str | os.PathLike, sample_id: str) -> PatchSample:
    d = Path(root) / sample_id
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise SampleError(f"missing file {meta_path}")
    meta = json.loads(meta_path.read_text())
    n = int(meta["patch_size"])
    s2 = _read_raw(d / "S2.f32", _F32, (N_S2, n, n))
    s1 = _read_raw(d / "S1.f32", _F32, (N_S1, n, n))
    lc = _read_raw(d / "LC.u8", _U8, (n, n)) if meta.get("has_label", False) else None
    sample = PatchSample(
        sample_id=meta.get("sample_id", sample_id),
        lon=float(meta["lon"]),
        lat=float(meta["lat"]),
        s2=s2,
        s1=s1,
        lc=lc,
        s2_date=meta["s2_date"],
        s1_date=meta["s1_date"],
    )
    sample.validate()
    return sample


@dataclass
class ManifestEntry:
    sample_id: str
    lon: float
    lat: float
    relative_path: str
    has_label: bool


@dataclass
class Manifest:
    dataset_name: str
    patch_size: int
    entries: list[ManifestEntry]
    created_seed: int | None = None
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise SampleError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    @property
    def locations(self) -> np.ndarray:
        return np.array([(e.lon, e.lat) for e in self.entries], dtype=np.float64).reshape(-1, 2)

    def sample_dir(self, entry: ManifestEntry) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory attached")
        return self.root / entry.relative_path

    def read(self, i: int) -> PatchSample:
        entry = self.entries[i]
        path = self.sample_dir(entry)
        return read_sample(path.parent, path.name)

    def __iter__(self):
        for i in range(len(self.entries)):
            yield self.read(i)

    def subset(self, sample_ids) -> "Manifest":
        """Entries for ``sample_ids``, in that order."""
        by_id = {e.sample_id: e for e in self.entries}
        missing = [i for i in sample_ids if i not in by_id]
        if missing:
            raise KeyError(f"sample ids not in manifest: {missing[:5]}")
        return Manifest(
            dataset_name=self.dataset_name,
            patch_size=self.patch_size,
            entries=[by_id[i] for i in sample_ids],
            created_seed=self.created_seed,
            root=self.root,
        )

    def to_dict(self) -> dict:
        d = {
            "dataset_name": self.dataset_name,
            "patch_size": self.patch_size,
            "entries": [vars(e).copy() for e in self.entries],
        }
        if self.created_seed is not None:
            d["created_seed"] = self.created_seed
        return d

    def save(self, root: str | os.PathLike | None = None) -> Path:
        root = Path(root) if root is not None else self.root
        if root is None:
            raise ValueError("no root directory to save manifest into")
        path = Path(root) / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.root = Path(root)
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> "Manifest":
        root = Path(root)
        d = json.loads((root / MANIFEST_FILE).read_text())
        m = cls(
            dataset_name=d["dataset_name"],
            patch_size=int(d["patch_size"]),
            entries=[ManifestEntry(**e) for e in d["entries"]],
            created_seed=d.get("created_seed"),
            root=root,
        )
        for e in m.entries:
            files = ["meta.json", "S2.f32", "S1.f32"] + (["LC.u8"] if e.has_label else [])
            missing = [f for f in files if not (root / e.relative_path / f).is_file()]
            if missing:
                raise SampleError(f"manifest entry {e.sample_id} incomplete at {e.relative_path}: "
                                  f"missing {', '.join(missing)}")
        return m

    @classmethod
    def from_samples(cls, samples, root, dataset_name: str, created_seed: int | None = None) -> "Manifest":
        """Write ``samples`` under ``root``, then the manifest itself."""
        samples = list(samples)
        if not samples:
            raise ValueError("cannot build a manifest from zero samples")
        for s in samples:
            write_sample(s, root)
        m = cls(
            dataset_name=dataset_name,
            patch_size=samples[0].patch_size,
            entries=[
                ManifestEntry(s.sample_id, float(s.lon), float(s.lat), s.sample_id, s.has_label)
                for s in samples
            ],
            created_seed=created_seed,
            root=Path(root),
        )
        m.save()
        return m


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    n_pixels: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_CHANNELS,) or self.std.shape != (N_CHANNELS,):
            raise ValueError(f"band stats must have {N_CHANNELS} channels")
        bad = np.flatnonzero(~(self.std > 0))
        if bad.size:
            raise ValueError(f"non-positive std for channel {CHANNEL_NAMES[bad[0]]} (index {bad[0]})")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "n_pixels": self.n_pixels,
            "channels": list(CHANNEL_NAMES),
            "provenance": self.provenance,
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / BAND_STATS_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BandStats":
        path = Path(path)
        if path.is_dir():
            path = path / BAND_STATS_FILE
        d = json.loads(path.read_text())
        return cls(d["mean"], d["std"], int(d["n_pixels"]), d.get("provenance", {}))


def compute_band_stats(manifest: Manifest) -> BandStats:
    """Per-channel mean and population std over every pixel in ``manifest``.

    Two passes; per-sample partial sums are float64 and are combined with
    :func:`math.fsum`, which is correctly rounded and therefore independent
    of the order in which samples are visited.
    """
    if len(manifest) == 0:
        raise ValueError("cannot compute band statistics of an empty manifest")
    sums: list[list[float]] = [[] for _ in range(N_CHANNELS)]
    n_pixels = 0
    for sample in manifest:
        x = sample.stacked().astype(np.float64).reshape(N_CHANNELS, -1)
        n_pixels += x.shape[1]
        for c, s in enumerate(x.sum(axis=1)):
            sums[c].append(float(s))
    mean = np.array([math.fsum(s) / n_pixels for s in sums])

    sq: list[list[float]] = [[] for _ in range(N_CHANNELS)]
    for sample in manifest:
        x = sample.stacked().astype(np.float64).reshape(N_CHANNELS, -1)
        dev = x - mean[:, None]
        for c, s in enumerate(np.einsum("ij,ij->i", dev, dev)):
            sq[c].append(float(s))
    var = np.array([math.fsum(s) / n_pixels for s in sq])
    std = np.sqrt(var)
    for c in range(N_CHANNELS):
        if not std[c] > 0:
            raise ValueError(f"channel {CHANNEL_NAMES[c]} (index {c}) has zero variance")
    return BandStats(
        mean,
        std,
        n_pixels,
        provenance={"dataset_name": manifest.dataset_name, "n_samples": len(manifest)},
    )


def normalize_patch(sample: PatchSample | np.ndarray, stats: BandStats) -> np.ndarray:
    x = sample.stacked() if isinstance(sample, PatchSample) else np.asarray(sample)
    out = (x.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return out.astype(np.float32)


def denormalize_patch(x: np.ndarray, stats: BandStats) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64) * stats.std[:, None, None] + stats.mean[:, None, None]
    return out.astype(np.float32)
