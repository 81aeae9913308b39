"""The two-stage tuning workflow.

Stage 1 trains a module set on a source task against the frozen backbone and
banks the module tensors in a checkpoint; stage 2 initializes a downstream
module set from that bank and tunes on a few-shot episode. Prompt banks hold
N tokens per layer and can seed any downstream token count k: sequential
loading slices the first k tokens of each layer, average loading replicates
the per-layer token mean k times. The shallow variant keeps only the layer-0
row of the bank. The backbone is never written in either stage.

Checkpoint format (little-endian): magic ``PVPC``, version u32, method tag u8
(0=prompts, 1=adapter, 2=low-rank), fingerprint of five u32 (embed dim,
layers, patch size, image size, module size N/h/r), tensor count u32, then
per tensor in lexicographic name order: name length u16 + UTF-8 name, rank
u8, dims u32 each, float32 payload row-major; trailing CRC-32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .autodiff import Tensor
from .binio import (Reader, atomic_write, check_magic, pack_f32, pack_u32,
                    read_crc_trailer, with_crc)
from .data import Dataset, FewShotEpisode
from .errors import ConfigError, DataError, FormatError
from .pet import Method, PetConfig, PetParams, attach, freeze_for
from .training import RunRecord, TrainSpec, train
from .vit import ViTConfig, ViTParams

_MAGIC = b"PVPC"
_VERSION = 1


class LoadType(Enum):
    SEQUENTIAL = "sequential"
    AVERAGE = "average"

    @classmethod
    def parse(cls, name: str) -> "LoadType":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigError(f"unknown load type {name!r} (expected sequential or average)")


_METHOD_TAGS = {Method.VPT_DEEP: 0, Method.VPT_SHALLOW: 0, Method.ADAPTER: 1, Method.LORA: 2}
_TAG_KINDS = {0: "vpt", 1: "adapter", 2: "lora"}


@dataclass(frozen=True)
class Fingerprint:
    """Backbone geometry a checkpoint was trained against, plus the module
    size (prompt bank width N, bottleneck width h, or rank r)."""

    embed_dim: int
    num_layers: int
    patch_size: int
    image_size: int
    module_size: int

    def check_against(self, vit_cfg: ViTConfig) -> None:
        mismatches = [
            (name, got, want) for name, got, want in (
                ("embed_dim", self.embed_dim, vit_cfg.embed_dim),
                ("num_layers", self.num_layers, vit_cfg.num_layers),
                ("patch_size", self.patch_size, vit_cfg.patch_size),
                ("image_size", self.image_size, vit_cfg.image_size),
            ) if got != want]
        if mismatches:
            detail = ", ".join(f"{n}: checkpoint has {g}, backbone has {w}"
                               for n, g, w in mismatches)
            raise ConfigError(f"checkpoint does not fit this backbone ({detail})")


@dataclass
class ModuleCheckpoint:
    """A serialized stage-1 module bank: the method kind, the backbone
    fingerprint, and the named module tensors (head never included)."""

    kind: str                     # "vpt" | "adapter" | "lora"
    fingerprint: Fingerprint
    tensors: dict[str, np.ndarray]
    metadata: dict

    @property
    def bank_size(self) -> int:
        return self.fingerprint.module_size


@dataclass(frozen=True)
class LoadSpec:
    """How to initialize k downstream prompt tokens from an N-token bank."""

    load_type: LoadType
    variant: Method = Method.VPT_DEEP
    k: int = 4

    def __post_init__(self):
        if not self.variant.is_vpt:
            raise ConfigError(f"LoadSpec.variant must be a prompt variant, got {self.variant}")
        if self.k < 1:
            raise ConfigError(f"LoadSpec.k must be >= 1, got {self.k}")


@dataclass
class TuneResult:
    pet: PetParams
    record: RunRecord


def snapshot_modules(pet: PetParams, vit_cfg: ViTConfig, **metadata) -> ModuleCheckpoint:
    """Bank the current module tensors (never the head) as a checkpoint."""
    if pet.method.is_vpt:
        module_size = pet.cfg.k
    elif pet.method is Method.ADAPTER:
        module_size = pet.cfg.h
    else:
        module_size = pet.cfg.r
    fp = Fingerprint(embed_dim=vit_cfg.embed_dim, num_layers=vit_cfg.num_layers,
                     patch_size=vit_cfg.patch_size, image_size=vit_cfg.image_size,
                     module_size=module_size)
    tensors = {name: t.data.copy() for name, t in pet.module_tensors()}
    return ModuleCheckpoint(kind=_TAG_KINDS[_METHOD_TAGS[pet.method]],
                            fingerprint=fp, tensors=tensors, metadata=dict(metadata))


def pretrain_modules(vit_params: ViTParams, cfg: PetConfig, source: Dataset,
                     train_spec: TrainSpec) -> ModuleCheckpoint:
    """Stage 1: train a fresh module set on the source task, backbone frozen.

    Prompt banks are always trained in the deep variant with all k = N bank
    tokens, so a single run can seed any downstream prompt count k <= N
    (and any k at all under average loading).
    """
    if len(source) == 0:
        raise DataError("pretrain_modules: empty source dataset")
    if source.num_classes < 2:
        raise DataError(f"pretrain_modules: source task needs >= 2 classes, "
                        f"got {source.num_classes}")
    stage1_cfg = replace(cfg, method=Method.VPT_DEEP) if cfg.method.is_vpt else cfg
    pet = attach(stage1_cfg, vit_params.cfg, source.num_classes, seed=train_spec.seed)
    record = train(vit_params, pet, source, train_spec)
    return snapshot_modules(
        pet, vit_params.cfg,
        seed=train_spec.seed, steps=train_spec.steps,
        source_task=source.fingerprint, final_loss=record.losses[-1] if record.losses else None)


def save_checkpoint(ckpt: ModuleCheckpoint, path) -> None:
    """Write the PVPC format (atomic: temp file then rename)."""
    tag = {"vpt": 0, "adapter": 1, "lora": 2}[ckpt.kind]
    fp = ckpt.fingerprint
    parts = [_MAGIC, pack_u32(_VERSION), bytes([tag]),
             pack_u32(fp.embed_dim, fp.num_layers, fp.patch_size, fp.image_size,
                      fp.module_size),
             pack_u32(len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        raw = name.encode("utf-8")
        parts.append(len(raw).to_bytes(2, "little"))
        parts.append(raw)
        parts.append(bytes([arr.ndim]))
        parts.append(pack_u32(*arr.shape))
        parts.append(pack_f32(arr))
    atomic_write(path, with_crc(b"".join(parts)))


def load_checkpoint(path) -> ModuleCheckpoint:
    """Parse a PVPC file; structural problems raise FormatError with a byte
    offset, value corruption raises IntegrityError via the CRC trailer."""
    with open(path, "rb") as f:
        buf = f.read()
    check_magic(buf, _MAGIC, "PVP checkpoint")
    r = Reader(buf, "checkpoint")
    r.take(4)
    version = r.u32()
    if version != _VERSION:
        raise FormatError(f"checkpoint: unsupported format version {version}", offset=4)
    tag = r.u8()
    if tag not in _TAG_KINDS:
        raise FormatError(f"checkpoint: unknown method tag {tag}", offset=8)
    fp = Fingerprint(embed_dim=r.u32(), num_layers=r.u32(), patch_size=r.u32(),
                     image_size=r.u32(), module_size=r.u32())
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.utf8(r.u16())
        rank = r.u8()
        dims = tuple(r.u32() for _ in range(rank))
        size = math.prod(dims)
        if size > len(r.buf):  # corrupted dims cannot promise more than the file holds
            raise FormatError(f"checkpoint: tensor {name!r} claims {size} elements",
                              offset=r.pos)
        tensors[name] = r.f32_array(size).reshape(dims)
    read_crc_trailer(r)
    return ModuleCheckpoint(kind=_TAG_KINDS[tag], fingerprint=fp, tensors=tensors,
                            metadata={"file": str(path)})


def load_prompts(ckpt: ModuleCheckpoint, spec: LoadSpec, vit_cfg: ViTConfig,
                 num_classes: int) -> PetParams:
    """Initialize k downstream prompt tokens from an N-token bank.

    Sequential loading is an exact slice of the first k bank tokens per
    layer (k <= N required); average loading replicates the per-layer bank
    mean k times (any k >= 1). The shallow variant then keeps only the
    layer-0 row. A fresh zero head is attached, never one from the bank.
    """
    if ckpt.kind != "vpt":
        raise ConfigError(f"load_prompts: checkpoint holds {ckpt.kind!r} modules, not prompts")
    ckpt.fingerprint.check_against(vit_cfg)
    bank = ckpt.tensors["prompt_tokens"]
    n = ckpt.bank_size
    if bank.shape != (vit_cfg.num_layers, n, vit_cfg.embed_dim):
        raise ConfigError(f"load_prompts: bank shape {bank.shape} does not match "
                          f"fingerprint ({vit_cfg.num_layers}, {n}, {vit_cfg.embed_dim})")
    if spec.load_type is LoadType.SEQUENTIAL:
        if spec.k > n:
            raise ConfigError(f"load_prompts: sequential loading of k={spec.k} tokens "
                              f"from a bank of N={n} has no tokens to slice")
        selected = bank[:, :spec.k, :]
    else:
        mean = bank.mean(axis=1, keepdims=True)
        selected = np.repeat(mean, spec.k, axis=1)
    if spec.variant is Method.VPT_SHALLOW:
        selected = selected[:1]
    pet = attach(PetConfig(method=spec.variant, k=spec.k), vit_cfg, num_classes, seed=0)
    pet.prompts = Tensor(selected.copy(), requires_grad=True)
    return pet


def load_modules(ckpt: ModuleCheckpoint, cfg: PetConfig, vit_cfg: ViTConfig,
                 num_classes: int) -> PetParams:
    """Copy a pre-trained adapter or low-rank bank into fresh downstream
    modules; dimensions must match exactly (no slicing for these methods)."""
    if ckpt.kind == "vpt":
        raise ConfigError("load_modules: prompt banks load through load_prompts")
    if (cfg.method is Method.ADAPTER) != (ckpt.kind == "adapter"):
        raise ConfigError(f"load_modules: checkpoint holds {ckpt.kind!r} modules but "
                          f"config asks for {cfg.method.value}")
    ckpt.fingerprint.check_against(vit_cfg)
    want = cfg.h if cfg.method is Method.ADAPTER else cfg.r
    if ckpt.bank_size != want:
        name = "h" if cfg.method is Method.ADAPTER else "r"
        raise ConfigError(f"load_modules: checkpoint {name}={ckpt.bank_size} does not "
                          f"match configured {name}={want}")
    pet = attach(cfg, vit_cfg, num_classes, seed=0)
    for name, tensor in pet.module_tensors():
        if name not in ckpt.tensors:
            raise ConfigError(f"load_modules: checkpoint missing tensor {name!r}")
        stored = ckpt.tensors[name]
        if stored.shape != tensor.data.shape:
            raise ConfigError(f"load_modules: tensor {name!r} has shape {stored.shape}, "
                              f"expected {tensor.data.shape}")
        tensor.data = stored.astype(np.float64).copy()
    return pet


def downstream_tune(vit_params: ViTParams, pet: PetParams, episode: FewShotEpisode,
                    train_spec: TrainSpec) -> TuneResult:
    """Stage 2: tune a loaded (or scratch) module set on a few-shot episode.

    Only module tensors move; the record carries per-step losses, final
    held-out accuracy, and the backbone digests witnessing the freeze.
    """
    if len(episode.train) == 0:
        raise DataError("downstream_tune: empty episode")
    freeze_for(vit_params, pet)
    record = train(vit_params, pet, episode, train_spec)
    return TuneResult(pet=pet, record=record)
