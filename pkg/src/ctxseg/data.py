"""Dataset ingestion, histogram equalization and the synthetic two-lobe generator."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

WORKING_SIZE = 256
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ImageSample:
    id: str
    domain_id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 2:
            raise DataError(f"{self.id}: image must be 2-d, got shape {image.shape}")
        image = image.copy()
        image.flags.writeable = False
        object.__setattr__(self, "image", image)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != image.shape:
                raise DataError(f"{self.id}: mask shape {mask.shape} != image shape {image.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise DataError(f"{self.id}: mask must contain only 0 and 1")
            mask = mask.astype(np.uint8, copy=True)
            mask.flags.writeable = False
            object.__setattr__(self, "mask", mask)

    @property
    def has_mask(self) -> bool:
        return self.mask is not None

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        if (self.id, self.domain_id) != (other.id, other.domain_id):
            return False
        if not np.array_equal(self.image, other.image):
            return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True)
class DatasetHandle:
    domain_id: str
    samples: tuple
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        samples = tuple(sorted(self.samples, key=lambda s: s.id))
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate sample ids in domain {self.domain_id!r}")
        for s in samples:
            if s.domain_id != self.domain_id:
                raise DataError(f"sample {s.id} has domain {s.domain_id!r}, expected {self.domain_id!r}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def fully_annotated(self) -> bool:
        return all(s.has_mask for s in self.samples)

    def subset(self, ids: Sequence[str], split: Optional[str] = None) -> "DatasetHandle":
        wanted = set(ids)
        return DatasetHandle(self.domain_id, tuple(s for s in self.samples if s.id in wanted),
                             split or self.split)

    def with_split(self, split: str) -> "DatasetHandle":
        return dataclasses.replace(self, split=split)


def split_dataset(handle: DatasetHandle, n_first: int) -> tuple[DatasetHandle, DatasetHandle]:
    """Split by id order into (first n_first samples as train, remainder as test)."""
    if not 0 <= n_first <= len(handle):
        raise DataError(f"cannot take {n_first} samples from a dataset of {len(handle)}")
    ids = handle.ids
    return handle.subset(ids[:n_first], "train"), handle.subset(ids[n_first:], "test")


# -- file I/O ---------------------------------------------------------------

def _read_grayscale(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                return np.asarray(im, dtype=np.float64) / 255.0
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                return np.asarray(im, dtype=np.float64) / 65535.0
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im if im.mode in ("L", "I;16", "I", "1") else im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr != 0).astype(np.uint8)


def _resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img.astype(np.float32)
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    out = Image.fromarray(mask * 255).resize((size, size), Image.NEAREST)
    return (np.asarray(out) != 0).astype(np.uint8)


def load_folder(image_dir, mask_dir=None, domain_id: Optional[str] = None, split: str = "train",
                size: int = WORKING_SIZE) -> DatasetHandle:
    """Load every ``*.png`` in ``image_dir``; a same-named file in ``mask_dir`` becomes its mask."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"missing image directory {image_dir}")
    if mask_dir is not None and not Path(mask_dir).is_dir():
        raise DataError(f"missing mask directory {mask_dir}")
    domain_id = domain_id or image_dir.name
    samples = []
    for path in sorted(image_dir.glob("*.png")):
        img = _read_grayscale(path)
        mask = None
        mask_path = Path(mask_dir) / path.name if mask_dir is not None else None
        if mask_path is not None and mask_path.exists():
            mask = _read_mask(mask_path)
            if mask.shape != img.shape:
                raise DataError(f"dimension mismatch: {mask_path} is {mask.shape}, image is {img.shape}")
            mask = _resize_mask(mask, size)
        samples.append(ImageSample(path.stem, domain_id, _resize_image(img, size), mask))
    if not samples:
        raise DataError(f"no PNG images in {image_dir}")
    return DatasetHandle(domain_id, tuple(samples), split)


def load_dataset(root_path, domain_id: str, split: str = "train", size: int = WORKING_SIZE) -> DatasetHandle:
    """Load ``<root>/<domain_id>/images/*.png`` (and optional ``masks/``) at ``size``×``size``."""
    domain_dir = Path(root_path) / domain_id
    mask_dir = domain_dir / "masks"
    return load_folder(domain_dir / "images", mask_dir if mask_dir.is_dir() else None, domain_id, split, size)


def load_domain_dir(path, split: str = "train", size: int = WORKING_SIZE) -> DatasetHandle:
    """Load a domain directory (``images/`` plus optional ``masks/``); its name is the domain id."""
    path = Path(path).resolve()
    return load_dataset(path.parent, path.name, split, size)


def save_dataset(handle: DatasetHandle, root_path) -> Path:
    """Write images as 16-bit PNG and masks as 0/255 8-bit PNG under the standard layout."""
    domain_dir = Path(root_path) / handle.domain_id
    (domain_dir / "images").mkdir(parents=True, exist_ok=True)
    if any(s.has_mask for s in handle):
        (domain_dir / "masks").mkdir(parents=True, exist_ok=True)
    for s in handle:
        pixels = np.round(np.clip(s.image.astype(np.float64), 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(pixels).save(domain_dir / "images" / f"{s.id}.png")
        if s.has_mask:
            Image.fromarray(s.mask * 255).save(domain_dir / "masks" / f"{s.id}.png")
    return domain_dir


# -- preprocessing ----------------------------------------------------------

def preprocess(image: np.ndarray, bins: int = 256) -> np.ndarray:
    """Histogram equalization with the standard CDF mapping.

    Intensities are binned into ``bins`` equal-width bins on [0, 1]; each bin maps
    to ``(cdf - cdf_min) / (N - cdf_min)``. A constant image is returned unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    idx = np.minimum((np.clip(img, 0.0, 1.0) * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(hist)
    n = cdf[-1]
    cdf_min = cdf[np.flatnonzero(hist)[0]]
    if cdf_min == n:
        return np.asarray(image, dtype=np.float32).copy()
    lut = (cdf - cdf_min) / (n - cdf_min)
    return np.clip(lut[idx], 0.0, 1.0).astype(np.float32)


# -- synthetic domains ------------------------------------------------------

@dataclass(frozen=True)
class ShiftSpec:
    gamma: float = 1.0
    invert: bool = False
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0
    deform_magnitude: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        for name in ("noise_sigma", "bias_amplitude", "deform_magnitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def is_identity(self) -> bool:
        return (self.gamma == 1.0 and not self.invert and self.noise_sigma == 0
                and self.bias_amplitude == 0 and self.deform_magnitude == 0)


def _smooth_field(rng: np.random.Generator, size: int, coarse: int) -> np.ndarray:
    grid = rng.standard_normal((coarse, coarse))
    field = ndimage.zoom(grid, size / coarse, order=3, mode="nearest")[:size, :size]
    return field / max(np.abs(field).max(), 1e-12)


def _lobe(u, v, cx, cy, ax, ay, rot, harmonics):
    du, dv = u - cx, v - cy
    c, s = np.cos(rot), np.sin(rot)
    x, y = c * du + s * dv, -s * du + c * dv
    r = np.hypot(x / ax, y / ay)
    theta = np.arctan2(y / ay, x / ax)
    boundary = np.ones_like(theta)
    for k, (amp, phase) in enumerate(harmonics, start=2):
        boundary += amp * np.cos(k * theta + phase)
    return r <= boundary


def _two_lobe_sample(rng: np.random.Generator, size: int, opacity_prob: float,
                     invert_fraction: float = 0.0, max_acquisition_noise: float = 0.0):
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing="ij")
    px = size / 256.0

    body = ((u / rng.uniform(0.8, 0.92)) ** 2 + ((v - 0.05) / rng.uniform(0.92, 1.0)) ** 2) <= 1
    img = np.where(body, rng.uniform(0.62, 0.72), 0.12)

    mask = np.zeros((size, size), dtype=bool)
    for side in (-1, 1):
        harmonics = [(rng.uniform(0, 0.06), rng.uniform(0, 2 * np.pi)) for _ in range(3)]
        mask |= _lobe(u, v,
                      cx=side * rng.uniform(0.30, 0.44), cy=rng.uniform(-0.10, 0.08),
                      ax=rng.uniform(0.17, 0.26), ay=rng.uniform(0.38, 0.52),
                      rot=side * rng.uniform(-0.05, 0.2), harmonics=harmonics)

    lobe_level = rng.uniform(0.24, 0.34)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 1.5 * px)
    img = img * (1 - soft) + lobe_level * soft

    if rng.random() < opacity_prob:
        ys, xs = np.nonzero(mask)
        k = rng.integers(len(ys))
        radius = rng.uniform(0.06, 0.13)
        blob = np.exp(-((u - coords[xs[k]]) ** 2 + (v - coords[ys[k]]) ** 2) / (2 * radius ** 2))
        img = img + rng.uniform(0.15, 0.3) * blob * soft

    ribs = np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * (v + 0.2 * u ** 2) + rng.uniform(0, 2 * np.pi))
    img = img + 0.05 * ribs * body
    img = img + 0.04 * _smooth_field(rng, size, 6)
    img = img + 0.02 * ndimage.gaussian_filter(rng.standard_normal((size, size)), px)
    sigma = rng.uniform(0, max_acquisition_noise)
    img = np.clip(img + sigma * rng.standard_normal((size, size)), 0, 1)
    if rng.random() < invert_fraction:
        img = 1.0 - img
    return img, mask.astype(np.uint8)


def apply_shift(image: np.ndarray, mask: np.ndarray, shift: ShiftSpec, rng: np.random.Generator):
    """Apply a ShiftSpec; only the deformation touches the mask."""
    if shift.is_identity:
        return image, mask
    size = image.shape[0]
    img = image.astype(np.float64)
    if shift.deform_magnitude > 0:
        dy, dx = _smooth_field(rng, size, 5), _smooth_field(rng, size, 5)
        scale = shift.deform_magnitude / max(np.hypot(dy, dx).max(), 1e-12)
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        coords = np.stack([rows + scale * dy, cols + scale * dx])
        img = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
        mask = ndimage.map_coordinates(mask, coords, order=0, mode="nearest").astype(np.uint8)
    if shift.bias_amplitude > 0:
        img = img * (1 + shift.bias_amplitude * _smooth_field(rng, size, 3))
    img = np.clip(img, 0, 1)
    if shift.gamma != 1.0:
        img = img ** shift.gamma
    if shift.invert:
        img = 1.0 - img
    if shift.noise_sigma > 0:
        img = img + rng.normal(0.0, shift.noise_sigma, img.shape)
    return np.clip(img, 0, 1), mask


def synth_domain(n_samples: int, shift: ShiftSpec = ShiftSpec(), seed: int = 0, *,
                 size: int = WORKING_SIZE, domain_id: str = "synth", split: str = "train",
                 opacity_prob: float = 0.25, invert_fraction: float = 0.0,
                 max_acquisition_noise: float = 0.0, id_offset: int = 0) -> DatasetHandle:
    """Generate ``n_samples`` two-lobe images with masks under ``shift``.

    Anatomy and shift draw from independent per-sample streams, so two calls with the
    same seed share anatomy regardless of the shift.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    children = np.random.SeedSequence(seed).spawn(id_offset + n_samples)[id_offset:]
    samples = []
    for i, child in enumerate(children, start=id_offset):
        base_ss, shift_ss = child.spawn(2)
        img, mask = _two_lobe_sample(np.random.default_rng(base_ss), size, opacity_prob,
                                     invert_fraction, max_acquisition_noise)
        img, mask = apply_shift(img, mask, shift, np.random.default_rng(shift_ss))
        samples.append(ImageSample(f"{domain_id}_{i:04d}", domain_id, img.astype(np.float32), mask))
    return DatasetHandle(domain_id, tuple(samples), split)
