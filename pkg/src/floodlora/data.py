"""Flood-scene datasets: FSEG raster files, a JSON manifest, and a synthetic generator.

Directory layout::

    <root>/manifest.json
    <root>/samples/<id>.pre.fseg     4 x H x W float32 backscatter (dB)
    <root>/samples/<id>.post.fseg    4 x H x W float32 backscatter (dB)
    <root>/samples/<id>.mask.fseg    1 x H x W uint8 labels

FSEG header (little-endian): magic ``b"FSEG"``, u16 version, u16 channels,
u32 height, u32 width; then channel-major payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataFormatError, UsageError

FSEG_MAGIC = b"FSEG"
FSEG_VERSION = 1
_HEADER = struct.Struct("<4sHHII")

SPLITS = ("train", "val", "test", "ood")
POLARIZATIONS = ("VV_asc", "VH_asc", "VV_desc", "VH_desc")
CHANNEL_NAMES = tuple(f"{when}_{pol}" for when in ("pre", "post") for pol in POLARIZATIONS)
MANIFEST_VERSION = 1


# ---------------------------------------------------------------- FSEG


def write_fseg(path, array: np.ndarray) -> None:
    """Write a ``[C, H, W]`` float raster (as float32) or ``[H, W]`` mask (as uint8)."""
    a = np.asarray(array)
    if a.ndim == 2:
        payload = np.ascontiguousarray(a, dtype=np.uint8)
        c, h, w = 1, *a.shape
    elif a.ndim == 3:
        payload = np.ascontiguousarray(a, dtype="<f4")
        c, h, w = a.shape
    else:
        raise ConfigurationError(f"FSEG stores [C,H,W] rasters or [H,W] masks, got shape {a.shape}")
    try:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(FSEG_MAGIC, FSEG_VERSION, c, h, w))
            f.write(payload.tobytes())
    except OSError as exc:
        raise DataFormatError(f"cannot write {path}: {exc}") from exc


def read_fseg(path, mask: bool = False, label: str | None = None) -> np.ndarray:
    """Read an FSEG file. Masks come back ``[H, W]`` uint8, rasters ``[C, H, W]`` float32."""
    who = label or str(path)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{who}: cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{who}: file {path} shorter than the FSEG header")
    magic, version, c, h, w = _HEADER.unpack_from(raw)
    if magic != FSEG_MAGIC:
        raise DataFormatError(f"{who}: bad magic {magic!r} in {path}")
    if version != FSEG_VERSION:
        raise DataFormatError(f"{who}: unsupported FSEG version {version} in {path}")
    itemsize = 1 if mask else 4
    expected = c * h * w * itemsize
    body = len(raw) - _HEADER.size
    if body != expected:
        raise DataFormatError(f"{who}: {path} payload is {body} bytes, header implies {expected} (truncated?)")
    if mask:
        if c != 1:
            raise DataFormatError(f"{who}: mask file {path} has {c} channels")
        return np.frombuffer(raw, np.uint8, h * w, _HEADER.size).reshape(h, w).copy()
    return np.frombuffer(raw, "<f4", c * h * w, _HEADER.size).reshape(c, h, w).astype(np.float32)


# ---------------------------------------------------------------- types


@dataclass
class FloodSample:
    id: str
    split: str
    pre: np.ndarray  # [4, H, W]
    post: np.ndarray  # [4, H, W]
    mask: np.ndarray  # [H, W] uint8

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.pre.shape != self.post.shape or self.pre.shape[1:] != self.mask.shape:
            raise DataFormatError(
                f"{self.id}: inconsistent shapes pre={self.pre.shape} post={self.post.shape} mask={self.mask.shape}"
            )


@dataclass
class SynthConfig:
    image_size: int = 64
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    n_ood: int = 16
    water_fraction: tuple = (0.15, 0.45)
    flood_growth: tuple = (0.05, 0.2)
    speckle: float = 0.25
    terrain_sigma: float = 5.0
    label_mode: str = "all_water"
    seed: int = 0
    # shifted regime for the ood split
    ood_water_fraction: tuple = (0.04, 0.15)
    ood_speckle: float = 0.45
    ood_water_db_shift: float = 5.0
    ood_land_db_shift: float = -2.5

    def __post_init__(self):
        self.water_fraction = tuple(self.water_fraction)
        self.flood_growth = tuple(self.flood_growth)
        self.ood_water_fraction = tuple(self.ood_water_fraction)
        for name in ("water_fraction", "flood_growth", "ood_water_fraction"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ConfigurationError(f"{name} must satisfy 0 < lo <= hi < 1, got {(lo, hi)}")
        if self.image_size < 1:
            raise ConfigurationError("image_size must be positive")
        if min(self.n_train, self.n_val, self.n_test, self.n_ood) < 0:
            raise ConfigurationError("split sizes must be non-negative")
        if not 0 < self.speckle < 1 or not 0 < self.ood_speckle < 1:
            raise ConfigurationError("speckle strengths must lie in (0, 1)")
        if self.label_mode not in ("all_water", "flood_only"):
            raise ConfigurationError(f"unknown label_mode {self.label_mode!r}")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test, "ood": self.n_ood}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class DatasetManifest:
    version: int
    image_size: int
    channel_names: list[str]
    samples: list[dict]
    norm_mean: list[float]
    norm_std: list[float]
    label_mode: str = "all_water"
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s["id"] for s in self.samples]
        if len(ids) != len(set(ids)):
            raise DataFormatError("manifest has duplicate sample ids")
        for s in self.samples:
            if s.get("split") not in SPLITS:
                raise DataFormatError(f"sample {s.get('id')!r} has invalid split {s.get('split')!r}")
        if len(self.norm_mean) != 8 or len(self.norm_std) != 8:
            raise DataFormatError("manifest must carry normalization stats for all 8 channels")

    def to_json(self) -> str:
        d = {
            "format": "floodlora-dataset",
            "version": self.version,
            "image_size": self.image_size,
            "channel_names": list(self.channel_names),
            "label_mode": self.label_mode,
            "normalization": {"mean": list(self.norm_mean), "std": list(self.norm_std)},
            "generator": self.generator,
            "samples": self.samples,
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        norm = d["normalization"]
        return cls(
            version=d["version"],
            image_size=d["image_size"],
            channel_names=d["channel_names"],
            samples=d["samples"],
            norm_mean=norm["mean"],
            norm_std=norm["std"],
            label_mode=d.get("label_mode", "all_water"),
            generator=d.get("generator", {}),
        )


# ---------------------------------------------------------------- generator


def _terrain(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    coarse = gaussian_filter(rng.normal(size=(size, size)), sigma=2.0 * sigma, mode="wrap")
    fine = gaussian_filter(rng.normal(size=(size, size)), sigma=sigma, mode="wrap")
    t = coarse / (coarse.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
    return t


def _speckled_db(mean_db: np.ndarray, speckle: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative gamma speckle on linear intensity, returned in dB."""
    looks = 1.0 / speckle**2
    intensity = 10.0 ** (mean_db / 10.0) * rng.gamma(looks, 1.0 / looks, size=mean_db.shape)
    return 10.0 * np.log10(intensity)


def _snapshot(water: np.ndarray, land_texture: np.ndarray, scene_offset: float, speckle: float,
              water_db: float, land_db: float, rng: np.random.Generator) -> np.ndarray:
    """Four channels: VV/VH for ascending and descending passes."""
    vv = np.where(water, water_db, land_db + 2.0 * land_texture) + scene_offset
    out = []
    for orbit_offset in (0.0, -1.0):  # ascending, descending incidence difference
        vv_o = vv + orbit_offset
        vh_o = vv_o - np.where(water, 5.0, 7.0)
        out.append(_speckled_db(vv_o, speckle, rng))
        out.append(_speckled_db(vh_o, speckle, rng))
    return np.stack(out).astype(np.float32)


def synth_scene(rng: np.random.Generator, cfg: SynthConfig, ood: bool = False):
    """One (pre, post, mask, post_water_fraction) scene."""
    n = cfg.image_size
    elev = _terrain(rng, n, cfg.terrain_sigma)
    lo, hi = cfg.ood_water_fraction if ood else cfg.water_fraction
    post_frac = rng.uniform(lo, hi)
    growth = rng.uniform(*cfg.flood_growth)
    pre_frac = max(post_frac - growth, 0.25 * post_frac)
    flat = np.sort(elev.ravel())
    post_water = elev < flat[min(int(round(post_frac * flat.size)), flat.size - 1)]
    pre_water = elev < flat[int(round(pre_frac * flat.size))]
    texture = gaussian_filter(rng.normal(size=(n, n)), sigma=1.5, mode="wrap")
    texture /= texture.std() + 1e-12
    speckle = cfg.ood_speckle if ood else cfg.speckle
    water_db = -20.0 + (cfg.ood_water_db_shift if ood else 0.0)
    land_db = -7.0 + (cfg.ood_land_db_shift if ood else 0.0)
    pre = _snapshot(pre_water, texture, rng.uniform(-1, 1), speckle, water_db, land_db, rng)
    post = _snapshot(post_water, texture, rng.uniform(-1, 1), speckle, water_db, land_db, rng)
    if cfg.label_mode == "flood_only":
        mask = post_water & ~pre_water
    else:
        mask = post_water
    return pre, post, mask.astype(np.uint8), float(post_water.mean())


def _split_rng(seed: int, split: str) -> np.random.Generator:
    # independent streams per split; the ood stream never overlaps the others
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS.index(split), 0x0F100D]))


def generate_synthetic(cfg: SynthConfig, root) -> "Dataset":
    """Write a deterministic synthetic dataset under ``root`` and return it loaded."""
    root = Path(root)
    sample_dir = root / "samples"
    try:
        sample_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create {sample_dir}: {exc}") from exc
    records = []
    sums = np.zeros(8)
    sq = np.zeros(8)
    count = 0
    for split, n in cfg.split_sizes().items():
        rng = _split_rng(cfg.seed, split)
        for i in range(n):
            sid = f"{split}-{i:04d}"
            pre, post, mask, frac = synth_scene(rng, cfg, ood=(split == "ood"))
            rel = {k: f"samples/{sid}.{k}.fseg" for k in ("pre", "post", "mask")}
            write_fseg(root / rel["pre"], pre)
            write_fseg(root / rel["post"], post)
            write_fseg(root / rel["mask"], mask)
            records.append({"id": sid, "split": split, **rel, "water_fraction": round(frac, 6)})
            if split == "train":
                both = np.concatenate([pre, post]).astype(np.float64)
                sums += both.sum(axis=(1, 2))
                sq += (both**2).sum(axis=(1, 2))
                count += both.shape[1] * both.shape[2]
    if count:
        mean = sums / count
        std = np.sqrt(np.maximum(sq / count - mean**2, 1e-12))
    else:
        mean, std = np.zeros(8), np.ones(8)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        image_size=cfg.image_size,
        channel_names=list(CHANNEL_NAMES),
        samples=records,
        norm_mean=[round(float(v), 8) for v in mean],
        norm_std=[round(float(v), 8) for v in std],
        label_mode=cfg.label_mode,
        generator=cfg.to_dict(),
    )
    try:
        (root / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise DataFormatError(f"cannot write {root / 'manifest.json'}: {exc}") from exc
    return load_dataset(root)


# ---------------------------------------------------------------- loading


class Dataset:
    """Manifest plus lazy, normalizing access to samples."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._by_id = {s["id"]: s for s in manifest.samples}
        self._mean = np.asarray(manifest.norm_mean, dtype=np.float64)
        self._std = np.asarray(manifest.norm_std, dtype=np.float64)

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    def ids(self, split: str | None = None) -> list[str]:
        if split is not None and split not in SPLITS:
            raise UsageError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [s["id"] for s in self.manifest.samples if split is None or s["split"] == split]

    def __len__(self) -> int:
        return len(self.manifest.samples)

    def sample(self, sid: str, normalize: bool = True) -> FloodSample:
        try:
            rec = self._by_id[sid]
        except KeyError:
            raise UsageError(f"no sample with id {sid!r}") from None
        pre = read_fseg(self.root / rec["pre"], label=sid)
        post = read_fseg(self.root / rec["post"], label=sid)
        mask = read_fseg(self.root / rec["mask"], mask=True, label=sid)
        n = self.image_size
        if pre.shape != (4, n, n) or post.shape != (4, n, n) or mask.shape != (n, n):
            raise DataFormatError(
                f"{sid}: shapes pre={pre.shape} post={post.shape} mask={mask.shape} do not match manifest size {n}"
            )
        if not np.all(mask <= 1):
            raise DataFormatError(f"{sid}: mask has values other than 0/1")
        if normalize:
            pre = self.normalize(pre, 0)
            post = self.normalize(post, 4)
        return FloodSample(sid, rec["split"], pre, post, mask)

    def normalize(self, raster: np.ndarray, offset: int) -> np.ndarray:
        m = self._mean[offset : offset + 4, None, None]
        s = self._std[offset : offset + 4, None, None]
        return (raster.astype(np.float64) - m) / s

    def samples(self, split: str, normalize: bool = True) -> Iterator[FloodSample]:
        for sid in self.ids(split):
            yield self.sample(sid, normalize)

    def arrays(self, split: str, normalize: bool = True):
        """Stacked ``(pre, post, mask, ids)`` for a whole split."""
        ids = self.ids(split)
        if not ids:
            raise UsageError(f"split {split!r} is empty")
        items = [self.sample(i, normalize) for i in ids]
        return (
            np.stack([s.pre for s in items]),
            np.stack([s.post for s in items]),
            np.stack([s.mask for s in items]),
            ids,
        )


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        text = mpath.read_text()
    except OSError as exc:
        raise DataFormatError(f"cannot read manifest {mpath}: {exc}") from exc
    try:
        manifest = DatasetManifest.from_json(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"corrupt manifest {mpath}: {exc}") from exc
    return Dataset(root, manifest)


# ---------------------------------------------------------------- batching


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def split_iter(dataset: Dataset, split: str, batch_size: int, shuffle_seed: int | None = None):
    """Yield ``(pre, post, mask, ids)`` batches; only the train split is shuffled."""
    ids = dataset.ids(split)
    if not ids:
        raise UsageError(f"split {split!r} is empty")
    seed = shuffle_seed if split == "train" else None
    for idx in batch_indices(len(ids), batch_size, seed):
        items = [dataset.sample(ids[i]) for i in idx]
        yield (
            np.stack([s.pre for s in items]),
            np.stack([s.post for s in items]),
            np.stack([s.mask for s in items]),
            [s.id for s in items],
        )
