"""Deterministic synthetic image-classification tasks and few-shot episodes.

Each class identity renders one procedural pattern (an oriented bar, a
Gaussian blob, or a sinusoidal grating) whose parameters are a fixed
function of the class id; samples of a class differ only by additive
noise. Class ids can be partitioned into disjoint halves that share the
rendering process, which is what module pre-training needs to transfer.

The on-disk container is a small little-endian format (magic ``PVPD``)
so externally produced datasets can be injected without code changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import (Reader, atomic_write, check_magic, pack_f32, pack_u32,
                    read_crc_trailer, with_crc)
from .errors import ConfigError, DataError, FormatError

_MAGIC = b"PVPD"
_VERSION = 1

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class DataSpec:
    """Generator input: which global class ids to render and how many samples."""

    seed: int
    classes: tuple[int, ...]
    samples_per_class: int
    image_size: int = 16
    channels: int = 1
    noise_std: float = 0.25

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError(f"DataSpec.classes needs >= 2 classes, got {len(self.classes)}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("DataSpec.classes contains duplicates")
        if self.samples_per_class < 1:
            raise ConfigError("DataSpec.samples_per_class must be >= 1")
        if self.image_size < 8:
            raise ConfigError(
                f"DataSpec.image_size must be >= 8 to render patterns, got {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("DataSpec.noise_std must be non-negative")


@dataclass
class Dataset:
    """Images (M, C, H, W), integer labels in [0, num_classes), and the
    generator fingerprint that identifies where the samples came from."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    fingerprint: dict

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: np.ndarray, note: str) -> "Dataset":
        fp = dict(self.fingerprint)
        fp["subset"] = note
        fp["size"] = int(len(indices))
        return Dataset(images=self.images[indices], labels=self.labels[indices],
                       class_names=list(self.class_names), fingerprint=fp)


@dataclass
class FewShotEpisode:
    """Exactly ``shots`` training samples per class plus the disjoint remainder."""

    train: Dataset
    eval: Dataset
    shots: int
    seed: int
    train_indices: np.ndarray
    eval_indices: np.ndarray


def pattern_name(class_id: int) -> str:
    kind = ("bar", "blob", "grid")[class_id % 3]
    return f"{kind}{class_id:03d}"


def _render_pattern(class_id: int, size: int) -> np.ndarray:
    """The noiseless (H, W) template for a global class id, values in [0, 1]."""
    kind = class_id % 3
    variant = class_id // 3
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = (size - 1) / 2.0
    xs, ys = xs - cx, ys - cy
    if kind == 0:  # oriented bar through a class-specific offset
        angle = 0.35 + variant * _GOLDEN_ANGLE
        shift = ((variant * 7) % 5 - 2) * size / 16.0
        dist = np.abs(-np.sin(angle) * xs + np.cos(angle) * ys - shift)
        return np.exp(-0.5 * (dist / 1.2) ** 2)
    if kind == 1:  # blob at a class-specific position
        angle = 0.8 + variant * _GOLDEN_ANGLE
        radius = size * 0.30
        bx, by = radius * np.cos(angle), radius * np.sin(angle)
        d2 = (xs - bx) ** 2 + (ys - by) ** 2
        return np.exp(-0.5 * d2 / (size / 7.0) ** 2)
    # sinusoidal grating with class-specific orientation and frequency
    angle = 1.2 + variant * _GOLDEN_ANGLE
    cycles = 2.0 + (variant % 3)
    phase = (xs * np.cos(angle) + ys * np.sin(angle)) * (2.0 * np.pi * cycles / size)
    return 0.5 + 0.5 * np.sin(phase)


def generate(spec: DataSpec) -> Dataset:
    """Render the dataset for ``spec``; a pure function of its fields."""
    rng = np.random.default_rng(spec.seed)
    n_cls = len(spec.classes)
    m = n_cls * spec.samples_per_class
    images = np.empty((m, spec.channels, spec.image_size, spec.image_size))
    labels = np.empty(m, dtype=np.int64)
    row = 0
    for local, class_id in enumerate(spec.classes):
        template = _render_pattern(class_id, spec.image_size)
        for _ in range(spec.samples_per_class):
            noise = rng.normal(0.0, spec.noise_std,
                               size=(spec.channels, spec.image_size, spec.image_size))
            images[row] = template[None, :, :] + noise
            labels[row] = local
            row += 1
    fingerprint = {"seed": spec.seed, "classes": list(spec.classes),
                   "size": m, "noise_std": spec.noise_std}
    return Dataset(images=images, labels=labels,
                   class_names=[pattern_name(c) for c in spec.classes],
                   fingerprint=fingerprint)


def sample_episode(ds: Dataset, shots: int, seed: int) -> FewShotEpisode:
    """Stratified split without replacement: ``shots`` per class to train,
    the remainder to eval. Deterministic per seed."""
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    train_ids, eval_ids = [], []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < shots + 1:
            raise DataError(
                f"class {ds.class_names[c]!r} has {len(members)} samples; "
                f"need at least {shots + 1} for a {shots}-shot episode")
        order = rng.permutation(members)
        train_ids.append(order[:shots])
        eval_ids.append(order[shots:])
    train_ids = np.concatenate(train_ids)
    eval_ids = np.concatenate(eval_ids)
    return FewShotEpisode(
        train=ds.subset(train_ids, f"train:{shots}-shot:seed{seed}"),
        eval=ds.subset(eval_ids, f"eval:{shots}-shot:seed{seed}"),
        shots=shots, seed=seed,
        train_indices=train_ids, eval_indices=eval_ids)


def augment(batch: np.ndarray, seed, enabled: bool = True,
            flip_prob: float = 0.5, jitter_std: float = 0.02) -> np.ndarray:
    """Label-preserving toy augmentation: per-image horizontal flip plus
    additive jitter. Identity when disabled; deterministic per seed."""
    if not enabled:
        return batch
    rng = np.random.default_rng(seed)
    out = batch.copy()
    for i in range(out.shape[0]):
        if rng.random() < flip_prob:
            out[i] = out[i, :, :, ::-1]
        if jitter_std > 0:
            out[i] += rng.normal(0.0, jitter_std, size=out[i].shape)
    return out


def save_dataset(ds: Dataset, path) -> None:
    """Write the PVPD container (atomic)."""
    m, c, h, w = ds.images.shape
    parts = [_MAGIC, pack_u32(_VERSION, m, c, h, w, ds.num_classes)]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(len(raw).to_bytes(2, "little"))
        parts.append(raw)
    parts.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    parts.append(pack_f32(ds.images))
    atomic_write(path, with_crc(b"".join(parts)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        buf = f.read()
    check_magic(buf, _MAGIC, "PVP dataset")
    r = Reader(buf, "dataset")
    r.take(4)
    version = r.u32()
    if version != _VERSION:
        raise FormatError(f"dataset: unsupported format version {version}", offset=4)
    m, c, h, w, n_cls = (r.u32() for _ in range(5))
    names = [r.utf8(r.u16()) for _ in range(n_cls)]
    labels_raw = r.take(4 * m)
    labels = np.frombuffer(labels_raw, dtype="<u4").astype(np.int64)
    images = r.f32_array(m * c * h * w).reshape(m, c, h, w)
    read_crc_trailer(r)
    if n_cls and labels.size and labels.max() >= n_cls:
        raise DataError(f"dataset: label {int(labels.max())} out of range for {n_cls} classes")
    return Dataset(images=images, labels=labels, class_names=names,
                   fingerprint={"file": str(path), "size": m})
