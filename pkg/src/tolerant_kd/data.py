"""Synthetic superclass/fine-class Gaussian data and its on-disk format.

File layout (all little-endian)::

    magic      8 bytes  b"TKDDATA\\0"
    version    u32
    S, F, d    u32 x3   superclasses, fine classes per superclass, dimension
    C, n       u32, u64 fine classes, rows
    seed       u64
    split      u8       0 = train, 1 = test
    super_of   i32[C]
    mean       f64[d]   standardizer (train statistics)
    scale      f64[d]
    features   f64[n*d] raw, row-major
    labels     i32[n]
    crc32      u32      over everything between the version and here
"""
from dataclasses import dataclass
import struct
import warnings
import zlib

import numpy as np

MAGIC = b"TKDDATA\x00"
VERSION = 1
_HEAD = struct.Struct("<IIIIQQB")


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    superclasses: int = 20
    fine_per_super: int = 5
    dim: int = 32
    n_train: int = 100
    n_test: int = 20
    sigma_super: float = 4.0
    sigma_fine: float = 1.0
    sigma_noise: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if min(self.superclasses, self.fine_per_super, self.dim, self.n_train, self.n_test) < 1:
            raise ValueError(f"counts and dimension must be positive: {self}")
        if self.superclasses * self.fine_per_super < 2:
            raise ValueError("need at least two fine classes")
        if min(self.sigma_super, self.sigma_fine, self.sigma_noise) < 0:
            raise ValueError("scales must be non-negative")
        if not self.sigma_super > self.sigma_fine > self.sigma_noise:
            warnings.warn(
                "recommended ordering sigma_super > sigma_fine > sigma_noise does not hold",
                stacklevel=2,
            )

    @property
    def num_classes(self):
        return self.superclasses * self.fine_per_super


@dataclass(eq=False)
class HierarchicalDataset:
    features: np.ndarray  # raw, [n, d]
    fine_labels: np.ndarray  # int64, [n]
    super_of: np.ndarray  # int64, [C]
    mean: np.ndarray
    scale: np.ndarray
    superclasses: int
    fine_per_super: int
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.super_of.min() < 0 or self.super_of.max() >= self.superclasses:
            raise ValueError("super_of entries must lie in [0, S)")

    @property
    def num_classes(self):
        return self.super_of.size

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    @property
    def x(self):
        """Features standardized with the stored (train) statistics."""
        return (self.features - self.mean) / self.scale

    @property
    def y(self):
        return self.fine_labels

    @property
    def super_labels(self):
        return self.super_of[self.fine_labels]

    def class_counts(self):
        return np.bincount(self.fine_labels, minlength=self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, HierarchicalDataset):
            return NotImplemented
        return _pack(self) == _pack(other)


def generate(spec):
    """Draw ``(train, test)`` from a three-level Gaussian hierarchy.

    Superclass centres ~ N(0, sigma_super^2 I), fine centres add
    N(0, sigma_fine^2 I) and samples add N(0, sigma_noise^2 I). Train and test
    use disjoint draws around the same centres.
    """
    rng = np.random.default_rng(spec.seed)
    _, fine_centers, super_of = _draw_centers(spec, rng)
    S, C, d = spec.superclasses, spec.num_classes, spec.dim

    def draw(per_class):
        labels = np.repeat(np.arange(C), per_class)
        noise = rng.normal(0.0, 1.0, size=(labels.size, d)) * spec.sigma_noise
        return fine_centers[labels] + noise, labels

    xtr, ytr = draw(spec.n_train)
    xte, yte = draw(spec.n_test)
    mean = xtr.mean(axis=0)
    scale = xtr.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    common = dict(super_of=super_of, mean=mean, scale=scale, superclasses=S, fine_per_super=spec.fine_per_super, seed=spec.seed)
    return (
        HierarchicalDataset(xtr, ytr, split="train", **common),
        HierarchicalDataset(xte, yte, split="test", **common),
    )


def generate_centers(spec):
    """Superclass and fine-class centres exactly as :func:`generate` draws them."""
    return _draw_centers(spec, np.random.default_rng(spec.seed))


def _draw_centers(spec, rng):
    S, F, d = spec.superclasses, spec.fine_per_super, spec.dim
    super_centers = rng.normal(0.0, 1.0, size=(S, d)) * spec.sigma_super
    super_of = np.repeat(np.arange(S), F)
    fine_centers = super_centers[super_of] + rng.normal(0.0, 1.0, size=(S * F, d)) * spec.sigma_fine
    return super_centers, fine_centers, super_of


def _pack(ds):
    head = _HEAD.pack(
        ds.superclasses,
        ds.fine_per_super,
        ds.dim,
        ds.num_classes,
        len(ds),
        ds.seed & 0xFFFFFFFFFFFFFFFF,
        0 if ds.split == "train" else 1,
    )
    return b"".join(
        [
            head,
            ds.super_of.astype("<i4").tobytes(),
            ds.mean.astype("<f8").tobytes(),
            ds.scale.astype("<f8").tobytes(),
            np.ascontiguousarray(ds.features).astype("<f8").tobytes(),
            ds.fine_labels.astype("<i4").tobytes(),
        ]
    )


def save(ds, path):
    body = _pack(ds)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes")
    if len(raw) < 12 + _HEAD.size + 4:
        raise DatasetFormatError(f"{path}: truncated file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, expected {VERSION}")
    body, (crc,) = raw[12:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    S, F, d, C, n, seed, split = _HEAD.unpack_from(body, 0)
    need = _HEAD.size + 4 * C + 16 * d + 8 * n * d + 4 * n
    if len(body) != need:
        raise DatasetFormatError(f"{path}: truncated or oversized payload ({len(body)} != {need} bytes)")
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")

    at = _HEAD.size

    def take(dtype, count):
        nonlocal at
        width = np.dtype(dtype).itemsize
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=at)
        at += width * count
        return arr

    super_of = take("<i4", C).astype(np.int64)
    mean = take("<f8", d).astype(np.float64)
    scale = take("<f8", d).astype(np.float64)
    features = take("<f8", n * d).astype(np.float64).reshape(n, d)
    labels = take("<i4", n).astype(np.int64)
    return HierarchicalDataset(
        features,
        labels,
        super_of,
        mean,
        scale,
        superclasses=S,
        fine_per_super=F,
        seed=seed,
        split="train" if split == 0 else "test",
    )
