"""Synthetic ordinal images, stratified splitting, augmentation, dataset files.

Class ``k`` is drawn as ``k`` square blobs on a flat background, so the
prototypes are nested: every blob of class ``k`` is also present in class
``k+1``.  Confusions therefore fall on neighbouring grades first.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import gaussian

DEFAULT_DISTRIBUTION = (0.32, 0.05, 0.33, 0.18, 0.12)
DATASET_MAGIC = b"STDS0001"
_HEADER = struct.Struct("<8sIHHH")


class SpecError(ValueError):
    """A spec field is invalid; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetFormatError(ValueError):
    pass


class UnrecognizedFormatError(DatasetFormatError):
    pass


class TruncatedDatasetError(DatasetFormatError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SynthSpec:
    n: int = 100
    h: int = 16
    w: int = 16
    distribution: tuple[float, ...] = DEFAULT_DISTRIBUTION
    difficulty: float = 0.6
    seed: int = 0
    # Blob layout is drawn from family_seed so related datasets share it.
    family_seed: int = 0
    blob_size: int = 3
    blob_intensity: float = 1.0
    # Blob j is drawn at blob_intensity * blob_decay**j, so with decay < 1
    # the higher grades differ from each other by fainter increments.
    blob_decay: float = 1.0
    background: float = 0.0
    # Grader disagreement: each image shows a latent severity label + grade_noise*z
    # (z ~ N(0, 1), clipped to [0, C-1]); blob j fades in as severity goes j -> j+1.
    grade_noise: float = 0.0
    # Fraction of samples whose image comes from a different class's prototype.
    label_noise: float = 0.0
    name: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "distribution", tuple(float(p) for p in self.distribution))
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.distribution)

    def validate(self) -> None:
        for name in ("n", "h", "w", "blob_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise SpecError(name, f"must be a positive integer, got {v!r}")
        for name in ("seed", "family_seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise SpecError(name, f"must be a nonnegative integer, got {v!r}")
        if self.h > 65535 or self.w > 65535:
            raise SpecError("h", "image sides must fit in 16 bits")
        dist = self.distribution
        if len(dist) < 2:
            raise SpecError("distribution", "needs at least two classes")
        if len(dist) > 255:
            raise SpecError("distribution", "at most 255 classes fit the dataset format")
        if any(not math.isfinite(p) or p < 0 for p in dist):
            raise SpecError("distribution", "proportions must be finite and nonnegative")
        if abs(sum(dist) - 1.0) > 1e-9:
            raise SpecError("distribution", f"proportions must sum to 1, got {sum(dist)}")
        positive = sum(1 for p in dist if p > 0)
        if self.n < positive:
            raise SpecError("n", f"{self.n} samples cannot cover {positive} classes")
        if not math.isfinite(self.difficulty) or self.difficulty < 0:
            raise SpecError("difficulty", f"noise level must be >= 0, got {self.difficulty}")
        if not math.isfinite(self.blob_decay) or self.blob_decay <= 0:
            raise SpecError("blob_decay", f"must be > 0, got {self.blob_decay}")
        if not math.isfinite(self.grade_noise) or self.grade_noise < 0:
            raise SpecError("grade_noise", f"must be >= 0, got {self.grade_noise}")
        if not 0.0 <= self.label_noise < 1.0:
            raise SpecError("label_noise", f"must lie in [0, 1), got {self.label_noise}")
        side = self.blob_size
        if side > min(self.h, self.w):
            raise SpecError("blob_size", "blob larger than the image")
        if (self.num_classes - 1) * side * side > self.h * self.w // 2:
            raise SpecError("blob_size", "blobs for every class do not fit in the image")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise SpecError(key, "unknown field")
        kwargs = dict(d)
        if "distribution" in kwargs:
            if not isinstance(kwargs["distribution"], (list, tuple)):
                raise SpecError("distribution", "must be a list of proportions")
            try:
                kwargs["distribution"] = tuple(float(p) for p in kwargs["distribution"])
            except (TypeError, ValueError) as exc:
                raise SpecError("distribution", "proportions must be numbers") from exc
        for key in ("difficulty", "blob_intensity", "blob_decay", "background", "grade_noise", "label_noise"):
            if key in kwargs:
                if isinstance(kwargs[key], bool) or not isinstance(kwargs[key], (int, float)):
                    raise SpecError(key, f"must be a number, got {kwargs[key]!r}")
                kwargs[key] = float(kwargs[key])
        if "name" in kwargs and not isinstance(kwargs["name"], str):
            raise SpecError("name", "must be a string")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distribution"] = list(self.distribution)
        return d


@dataclass
class Dataset:
    images: np.ndarray          # [n, 1, h, w] float64
    labels: np.ndarray          # [n] int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [n,1,h,w], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, idx: Sequence[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------

def largest_remainder_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Integer counts summing to n; every positive class gets at least one when n allows."""
    quotas = [n * p for p in proportions]
    # Tolerance absorbs float error such as 0.29 * 100 == 28.999999999999996.
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda k: (-max(quotas[k] - counts[k], 0.0), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    positive = [k for k, p in enumerate(proportions) if p > 0]
    if n >= len(positive):
        for k in positive:
            if counts[k] == 0:
                donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
                counts[donor] -= 1
                counts[k] = 1
    return counts


def blob_positions(spec: SynthSpec) -> list[tuple[int, int]]:
    """Top-left corners of the C-1 blobs; disjoint with a one-pixel gap."""
    rng = make_rng([spec.family_seed, 0xB10B])
    side = spec.blob_size
    taken = np.zeros((spec.h, spec.w), dtype=bool)
    out: list[tuple[int, int]] = []
    for _ in range(100_000):
        if len(out) == spec.num_classes - 1:
            return out
        r = int(rng.integers(0, spec.h - side + 1))
        c = int(rng.integers(0, spec.w - side + 1))
        r0, r1 = max(r - 1, 0), min(r + side + 1, spec.h)
        c0, c1 = max(c - 1, 0), min(c + side + 1, spec.w)
        if taken[r0:r1, c0:c1].any():
            continue
        taken[r:r + side, c:c + side] = True
        out.append((r, c))
    raise SpecError("blob_size", "could not place disjoint blobs")


def severity_images(spec: SynthSpec, severity: Sequence[float]) -> np.ndarray:
    """Noise-free images [n, 1, h, w] for continuous severities in [0, C-1].

    Blob j contributes blob_intensity * blob_decay**j * clip(severity - j, 0, 1),
    so an integer severity k reproduces the class-k prototype exactly.
    """
    sev = np.asarray(severity, dtype=np.float64)
    side = spec.blob_size
    images = np.full((len(sev), 1, spec.h, spec.w), spec.background, dtype=np.float64)
    for j, (r, c) in enumerate(blob_positions(spec)):
        level = spec.blob_intensity * spec.blob_decay ** j * np.clip(sev - j, 0.0, 1.0)
        images[:, 0, r:r + side, c:c + side] += level[:, None, None]
    return images


def prototypes(spec: SynthSpec) -> np.ndarray:
    """Clean class images [C, 1, h, w]."""
    return severity_images(spec, np.arange(spec.num_classes))


def blob_mask(spec: SynthSpec, cls: int) -> np.ndarray:
    side = spec.blob_size
    mask = np.zeros((spec.h, spec.w), dtype=bool)
    for r, c in blob_positions(spec)[:cls]:
        mask[r:r + side, c:c + side] = True
    return mask


def synth_generate(spec: SynthSpec) -> Dataset:
    counts = largest_remainder_counts(spec.n, spec.distribution)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    rng = make_rng([spec.seed, 0x5A3])
    labels = labels[rng.permutation(spec.n)]
    source = labels.copy()
    if spec.label_noise > 0:
        flip = rng.random(spec.n) < spec.label_noise
        shift = rng.integers(1, spec.num_classes, size=spec.n)
        source = np.where(flip, (labels + shift) % spec.num_classes, labels)
    severity = source.astype(np.float64)
    if spec.grade_noise > 0:
        severity += spec.grade_noise * gaussian(spec.n, [spec.seed, 0x5E7])
        np.clip(severity, 0.0, spec.num_classes - 1, out=severity)
    images = severity_images(spec, severity)
    if spec.difficulty > 0:
        noise = gaussian(images.size, [spec.seed, 0x401]).reshape(images.shape)
        images += spec.difficulty * noise
    return Dataset(images, labels, spec.num_classes, spec.name)


def nearest_prototype_predict(ds: Dataset, spec: SynthSpec) -> np.ndarray:
    protos = prototypes(spec).reshape(spec.num_classes, -1)
    flat = ds.images.reshape(len(ds), -1)
    d2 = ((flat[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


# Stand-ins for the large noisy source, the medium source and the small target.
# Each has its own background/intensity so that transfer is not an identity map.
# Pixel noise is 0.3x the blob intensity of the target; grade_noise models grader
# disagreement between adjacent grades on every set, including the test set.
BUILTIN_DATASETS = {
    "synth-large": dict(n=5000, difficulty=0.9, blob_intensity=2.4, background=0.6, grade_noise=0.7,
                        label_noise=0.05),
    "synth-medium": dict(n=1200, difficulty=0.9, blob_intensity=3.6, background=-0.3, grade_noise=0.7),
    "synth-small": dict(n=100, difficulty=0.9, blob_intensity=3.0, background=0.0, grade_noise=0.7),
    "synth-small-test": dict(n=500, difficulty=0.9, blob_intensity=3.0, background=0.0, grade_noise=0.7),
}


def builtin_spec(name: str, seed: int) -> SynthSpec:
    if name not in BUILTIN_DATASETS:
        raise KeyError(f"unknown builtin dataset {name!r}; known: {sorted(BUILTIN_DATASETS)}")
    index = list(BUILTIN_DATASETS).index(name)
    return SynthSpec(seed=seed * 16 + index, family_seed=seed, name=name, **BUILTIN_DATASETS[name])


def builtin_dataset(name: str, seed: int) -> Dataset:
    return synth_generate(builtin_spec(name, seed))


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5 + 1e-9)


def validation_counts(class_counts: Sequence[int], val_fraction: float) -> list[int]:
    out = []
    for c in class_counts:
        if c < 2:
            out.append(0)
            continue
        out.append(min(max(_round_half_up(c * val_fraction), 1), c - 1))
    return out


def stratified_split(ds: Dataset, val_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = make_rng([seed, 0x5917])
    counts = ds.class_counts()
    want = validation_counts(counts, val_fraction)
    val_idx: list[int] = []
    for k, c in enumerate(counts):
        if c == 1:
            warnings.warn(f"class {k} has a single sample; it stays in the training split", stacklevel=2)
        members = np.flatnonzero(ds.labels == k)
        chosen = members[rng.permutation(len(members))[: want[k]]]
        val_idx.extend(int(i) for i in chosen)
    in_val = np.zeros(len(ds), dtype=bool)
    in_val[val_idx] = True
    return (ds.subset(np.flatnonzero(~in_val), f"{ds.name}/train"),
            ds.subset(np.flatnonzero(in_val), f"{ds.name}/val"))


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentOps:
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False
    jitter: float = 0.0

    @classmethod
    def parse(cls, ops: Sequence[str] | "AugmentOps" | None) -> "AugmentOps":
        """Accepts names like ``["hflip", "vflip", "rot90", "jitter:0.1"]``."""
        if isinstance(ops, AugmentOps):
            return ops
        kw: dict = {}
        for op in ops or ():
            name, _, arg = str(op).partition(":")
            if name in ("hflip", "vflip", "rot90") and not arg:
                kw[name] = True
            elif name == "jitter":
                try:
                    kw["jitter"] = float(arg) if arg else 0.1
                except ValueError:
                    raise SpecError("augmentation", f"bad jitter amplitude {arg!r}") from None
                if kw["jitter"] < 0:
                    raise SpecError("augmentation", "jitter amplitude must be >= 0")
            else:
                raise SpecError("augmentation", f"unknown op {op!r}")
        return cls(**kw)

    def names(self) -> list[str]:
        out = [n for n in ("hflip", "vflip", "rot90") if getattr(self, n)]
        if self.jitter:
            out.append(f"jitter:{self.jitter!r}")
        return out

    @property
    def active(self) -> bool:
        return self.hflip or self.vflip or self.rot90 or self.jitter > 0


def augment_batch(images: np.ndarray, ops: AugmentOps, rng: np.random.Generator) -> np.ndarray:
    """Each enabled op fires independently per image with probability 0.5."""
    out = images.copy()
    n = len(out)
    if ops.hflip:
        m = rng.random(n) < 0.5
        out[m] = out[m][..., ::-1]
    if ops.vflip:
        m = rng.random(n) < 0.5
        out[m] = out[m][..., ::-1, :]
    if ops.rot90:
        m = rng.random(n) < 0.5
        k = rng.integers(1, 4, size=n)
        if out.shape[-1] != out.shape[-2]:
            m[:] = m & (k == 2)
        for turns in (1, 2, 3):
            sel = m & (k == turns)
            if sel.any():
                out[sel] = np.rot90(out[sel], turns, axes=(-2, -1))
    if ops.jitter > 0:
        m = rng.random(n) < 0.5
        delta = rng.uniform(-ops.jitter, ops.jitter, size=n)
        out += np.where(m, delta, 0.0).reshape((n,) + (1,) * (out.ndim - 1))
    return out


def augment(image: np.ndarray, ops, seed) -> np.ndarray:
    """Augment a single image ([h,w] or [c,h,w]); shape is preserved."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim < 2:
        raise ValueError(f"image must be at least 2-D, got shape {image.shape}")
    return augment_batch(image[None], AugmentOps.parse(ops), make_rng(seed))[0]


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------

def encode_dataset(ds: Dataset) -> bytes:
    _, h, w = ds.image_shape
    if ds.num_classes > 256:
        raise ValueError("labels must fit in one byte")
    head = _HEADER.pack(DATASET_MAGIC, len(ds), ds.num_classes, h, w)
    rec = np.zeros(len(ds), dtype=[("label", "u1"), ("pixels", "<f8", (h * w,))])
    rec["label"] = ds.labels
    rec["pixels"] = ds.images.reshape(len(ds), h * w)
    return head + rec.tobytes()


def decode_dataset(blob: bytes, name: str = "dataset") -> Dataset:
    if len(blob) < 8 or blob[:8] != DATASET_MAGIC:
        raise UnrecognizedFormatError("unrecognized format: missing STDS0001 magic")
    if len(blob) < _HEADER.size:
        raise TruncatedDatasetError("truncated dataset: header incomplete")
    _, n, C, h, w = _HEADER.unpack_from(blob)
    if C < 1 or h < 1 or w < 1:
        raise DatasetFormatError(f"corrupt header: C={C}, h={h}, w={w}")
    rec_size = 1 + 8 * h * w
    body = blob[_HEADER.size:]
    if len(body) < n * rec_size:
        raise TruncatedDatasetError(f"truncated dataset: header declares {n} samples, file holds {len(body) // rec_size}")
    if len(body) > n * rec_size:
        raise DatasetFormatError(f"corrupt dataset: {len(body) - n * rec_size} trailing bytes")
    rec = np.frombuffer(body, dtype=[("label", "u1"), ("pixels", "<f8", (h * w,))], count=n)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= C:
        raise DatasetFormatError(f"corrupt dataset: label {labels.max()} >= C={C}")
    images = rec["pixels"].astype(np.float64).reshape(n, 1, h, w)
    return Dataset(images, labels, C, name)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), name=path.stem)
