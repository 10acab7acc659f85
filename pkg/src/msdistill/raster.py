"""Multispectral rasters, the MSR container format and a synthetic corpus.

An MSR file is ``b"MSR1"`` followed by little-endian ``u32`` C, H, W and then
C*H*W little-endian float32 values, channel-major and row-major within each
channel. The first three channels are always the optical R, G, B planes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, ValidationError

MAGIC = b"MSR1"
OPTICAL_ROLES = ("R", "G", "B")
_HEADER = struct.Struct("<4sIII")


def default_roles(channels: int) -> tuple[str, ...]:
    return OPTICAL_ROLES + tuple(f"band{i}" for i in range(3, channels))


@dataclass(frozen=True)
class MultispectralImage:
    """A (C, H, W) float32 raster; channels 0-2 are R, G, B."""

    data: np.ndarray
    channel_roles: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"raster data must be (C, H, W), got shape {data.shape}")
        if data.shape[0] < 3:
            raise ValidationError(f"a raster needs at least 3 channels, got {data.shape[0]}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(data)):
            raise ValidationError("raster contains non-finite values")
        roles = tuple(self.channel_roles) or default_roles(data.shape[0])
        if len(roles) != data.shape[0]:
            raise ValidationError(f"{len(roles)} channel roles for {data.shape[0]} channels")
        if roles[:3] != OPTICAL_ROLES:
            raise ValidationError(f"channel roles must start with R, G, B, got {roles[:3]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_roles", roles)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def save_raster(img: MultispectralImage, path) -> None:
    c, h, w = img.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c, h, w))
        fh.write(img.data.astype("<f4", copy=False).tobytes(order="C"))


def load_raster(path) -> MultispectralImage:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for an MSR header")
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if c < 3:
        raise ValidationError(f"{path}: header declares {c} channels, need at least 3")
    n = c * h * w
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)
    return MultispectralImage(data)


def optical_subset(img: MultispectralImage) -> MultispectralImage:
    """The R, G, B planes as a 3-channel image."""
    return MultispectralImage(img.data[:3].copy(), OPTICAL_ROLES)


def normalize(img: MultispectralImage, mean, std) -> MultispectralImage:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (img.channels,) or std.shape != (img.channels,):
        raise ValidationError(f"statistics must have length {img.channels}")
    if not np.all(std > 0):
        raise ValidationError("std must be strictly positive")
    out = (img.data - mean[:, None, None]) / std[:, None, None]
    return MultispectralImage(out.astype(np.float32), img.channel_roles)


def channel_stats(images: Sequence[MultispectralImage]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over all pixels of all items (float64)."""
    stack = np.stack([im.data for im in images]).astype(np.float64)
    return stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Items with labels and per-channel statistics.

    ``items`` holds in-memory rasters; ``paths`` is filled when the dataset
    lives on disk. ``signatures`` and ``masks`` are only present for
    synthetic data and describe where the class signal was placed.
    """

    items: list[MultispectralImage]
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    seed: int | None = None
    n_classes: int = 0
    signatures: np.ndarray | None = None
    masks: np.ndarray | None = None
    paths: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.items) != len(self.labels):
            raise ValidationError("items and labels differ in length")
        if not self.items:
            raise ValidationError("dataset is empty")
        c = self.items[0].channels
        if any(im.channels != c for im in self.items):
            raise ValidationError("items have differing channel counts")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise ValidationError(f"statistics must have length {c}")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.items)

    @property
    def channels(self) -> int:
        return self.items[0].channels

    def stack(self, indices=None, normalized: bool = True) -> np.ndarray:
        """(N, C, H, W) float32 array, optionally standardized with the stored statistics."""
        idx = range(len(self)) if indices is None else indices
        x = np.stack([self.items[i].data for i in idx])
        if normalized:
            x = ((x - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)
        return x

    def subset(self, indices) -> "DatasetManifest":
        idx = [int(i) for i in indices]
        return DatasetManifest(
            items=[self.items[i] for i in idx],
            labels=self.labels[idx],
            mean=self.mean,
            std=self.std,
            seed=self.seed,
            n_classes=self.n_classes,
            signatures=self.signatures,
            masks=None if self.masks is None else self.masks[idx],
            paths=[self.paths[i] for i in idx] if self.paths else [],
            meta=dict(self.meta),
        )

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> Path:
        """Write one MSR file per item plus ``manifest.json``; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        width = max(4, len(str(len(self) - 1)))
        paths = []
        for i, im in enumerate(self.items):
            name = f"item_{i:0{width}d}.msr"
            save_raster(im, directory / name)
            paths.append(name)
        doc = {
            "format": "msr-manifest-1",
            "items": paths,
            "labels": self.labels.tolist(),
            "n_classes": self.n_classes,
            "channels": self.channels,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "seed": self.seed,
            "signatures": None if self.signatures is None else self.signatures.tolist(),
            "meta": self.meta,
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        self.paths = [str(directory / p) for p in paths]
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from exc
        for key in ("items", "labels", "mean", "std"):
            if key not in doc:
                raise FormatError(f"{path}: manifest lacks {key!r}")
        full = [str(path.parent / p) for p in doc["items"]]
        items = [load_raster(p) for p in full]
        sig = doc.get("signatures")
        return cls(
            items=items,
            labels=np.asarray(doc["labels"]),
            mean=np.asarray(doc["mean"]),
            std=np.asarray(doc["std"]),
            seed=doc.get("seed"),
            n_classes=int(doc.get("n_classes") or 0),
            signatures=None if sig is None else np.asarray(sig),
            paths=full,
            meta=doc.get("meta", {}),
        )


@dataclass
class SynthConfig:
    """Knobs of the synthetic generator (values are in raw reflectance-like units)."""

    signature_magnitude: float = 0.3
    nonoptical_fraction: float = 0.5  # share of signature energy placed in channels >= 3
    field_amplitude: float = 0.1  # smooth background variation
    field_sigma: float = 4.0
    blob_fraction: float = 0.3  # target share of pixels covered by the class blob
    item_offset: float = 0.05  # per-item spectral offset (nuisance)
    noise: float = 0.01  # white pixel noise
    base_level: float = 0.4


def balanced_labels(n_items: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Class ids whose counts differ by at most one, in a seeded random order."""
    return rng.permutation(np.arange(n_items) % n_classes)


def class_signatures(n_classes: int, channels: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """(n_classes, C) signatures of norm ``signature_magnitude``.

    The optical (first three) and non-optical parts are drawn separately and
    weighted so that a share ``nonoptical_fraction`` of each signature's
    energy sits in the non-optical channels. Within each part the vectors are
    orthonormal whenever the part has enough dimensions.
    """
    f = cfg.nonoptical_fraction
    if not 0.0 <= f <= 1.0:
        raise ValidationError("nonoptical_fraction must lie in [0, 1]")
    if channels == 3 and f > 0:
        raise ValidationError("a 3-channel dataset has no non-optical channels")

    def part(dim):
        m = rng.normal(size=(dim, n_classes))
        if n_classes <= dim:
            q, _ = np.linalg.qr(m)
            return q.T
        return (m / np.linalg.norm(m, axis=0)).T

    opt = part(3) * np.sqrt(1.0 - f)
    rest = part(channels - 3) * np.sqrt(f) if channels > 3 else np.zeros((n_classes, 0))
    sig = np.concatenate([opt, rest], axis=1)
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    return sig * cfg.signature_magnitude


def _smooth_field(rng, shape, sigma):
    x = ndimage.gaussian_filter(rng.normal(size=shape), sigma=sigma, mode="wrap")
    return x / (x.std() + 1e-12)


def class_blob_mask(label: int, n_classes: int, h: int, w: int, cfg: SynthConfig, rng) -> np.ndarray:
    """Boolean blob mask whose anisotropy depends on the class.

    Class k stretches a thresholded smooth field along the direction
    ``k * pi / n_classes``, giving each class its own typical blob shape.
    """
    angle = np.pi * label / n_classes
    long_s, short_s = 4.0, 1.2
    field = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=short_s, mode="wrap")
    # directional smoothing: rotate, smooth along one axis, rotate back
    rot = ndimage.rotate(field, np.degrees(angle), reshape=False, mode="grid-wrap", order=1)
    rot = ndimage.gaussian_filter1d(rot, sigma=long_s, axis=1, mode="wrap")
    field = ndimage.rotate(rot, -np.degrees(angle), reshape=False, mode="grid-wrap", order=1)
    thresh = np.quantile(field, 1.0 - cfg.blob_fraction)
    return field >= thresh


def generate_synthetic_dataset(
    n_items: int,
    channels: int,
    height: int,
    width: int,
    n_classes: int,
    seed: int,
    cfg: SynthConfig | None = None,
) -> DatasetManifest:
    """Smooth random fields plus per-class spectral signatures inside class blobs.

    A pure function of its arguments. Labels are balanced to within one item.
    """
    cfg = cfg or SynthConfig()
    if n_classes < 2 or n_items < n_classes:
        raise ValidationError(f"need n_items >= n_classes >= 2, got {n_items} items, {n_classes} classes")
    if channels < 3:
        raise ValidationError(f"need at least 3 channels, got {channels}")
    if height < 2 or width < 2:
        raise ValidationError("images must be at least 2x2")
    rng = np.random.default_rng(seed)
    labels = balanced_labels(n_items, n_classes, rng)
    sig = class_signatures(n_classes, channels, cfg, rng)
    base = cfg.base_level + 0.1 * rng.uniform(-1, 1, size=channels)
    items, masks = [], []
    for i in range(n_items):
        r = np.random.default_rng([seed, i])
        field = _smooth_field(r, (channels, height, width), (0, cfg.field_sigma, cfg.field_sigma))
        x = base[:, None, None] + cfg.field_amplitude * field
        x += cfg.item_offset * r.normal(size=(channels, 1, 1))
        mask = class_blob_mask(int(labels[i]), n_classes, height, width, cfg, r)
        x += sig[labels[i]][:, None, None] * mask[None]
        x += cfg.noise * r.normal(size=x.shape)
        items.append(MultispectralImage(x.astype(np.float32)))
        masks.append(mask)
    mean, std = channel_stats(items)
    return DatasetManifest(
        items=items,
        labels=labels,
        mean=mean,
        std=std,
        seed=seed,
        n_classes=n_classes,
        signatures=sig,
        masks=np.stack(masks),
        meta={"synth": cfg.__dict__.copy(), "height": height, "width": width},
    )


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = [
    "MAGIC",
    "MultispectralImage",
    "DatasetManifest",
    "SynthConfig",
    "load_raster",
    "save_raster",
    "optical_subset",
    "normalize",
    "channel_stats",
    "generate_synthetic_dataset",
    "balanced_labels",
    "class_signatures",
    "default_roles",
    "file_sha256",
]
