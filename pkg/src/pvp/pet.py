"""The three tuning-module families and the freezing mask.

Prompt tokens (shallow or deep), bottleneck adapters after the MLP, and
low-rank query/value deltas. Every module tensor is trainable; attaching a
module set to a backbone freezes every backbone tensor. Adapters and the
low-rank deltas are exact identities at init (up-projection / B factor zero),
so a freshly attached model computes the bare backbone function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import (Tensor, add, broadcast_to, concat, gelu, matmul,
                       narrow, reshape, scale, trunc_normal, xavier_uniform)
from .errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from .vit import ViTConfig, ViTParams


class Method(Enum):
    VPT_SHALLOW = "vpt_shallow"
    VPT_DEEP = "vpt_deep"
    ADAPTER = "adapter"
    LORA = "lora"

    @classmethod
    def parse(cls, name: str) -> "Method":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown tuning method {name!r} (expected one of: {valid})")

    @property
    def is_vpt(self) -> bool:
        return self in (Method.VPT_SHALLOW, Method.VPT_DEEP)


@dataclass(frozen=True)
class PetConfig:
    """Method selection plus the method-specific size knobs.

    Only the fields of the chosen method are meaningful: ``k`` (prompt token
    count), ``h`` (bottleneck width, must be well under the embed dim),
    ``r``/``s`` (low-rank rank and scale).
    """

    method: Method
    k: int = 4
    h: int = 4
    r: int = 2
    s: float = 1.0
    max_seq_len: int = 256

    def validate(self, vit_cfg: "ViTConfig") -> None:
        d = vit_cfg.embed_dim
        if self.method.is_vpt:
            if self.k < 1:
                raise ConfigError(f"PetConfig.k must be >= 1, got {self.k}")
            if 1 + self.k + vit_cfg.num_patches > self.max_seq_len:
                raise ConfigError(
                    f"PetConfig.k={self.k} pushes sequence length past max_seq_len={self.max_seq_len}")
        elif self.method is Method.ADAPTER:
            if not 1 <= self.h < d:
                raise ConfigError(f"PetConfig.h must be in [1, embed_dim), got h={self.h}, d={d}")
        elif self.method is Method.LORA:
            if not 1 <= self.r < d:
                raise ConfigError(f"PetConfig.r must be in [1, embed_dim), got r={self.r}, d={d}")
            if self.s <= 0:
                raise ConfigError(f"PetConfig.s must be positive, got {self.s}")


@dataclass
class AdapterLayer:
    w_down: Tensor
    w_up: Tensor


@dataclass
class LoraLayer:
    a_q: Tensor
    b_q: Tensor
    a_v: Tensor
    b_v: Tensor


@dataclass
class PetParams:
    """The small trainable parameter set, plus a fresh task head.

    The head always lives here (trainable) regardless of method; module
    tensors are the method-specific ones. ``embed_dim``/``num_layers``
    fingerprint the backbone this set was built for.
    """

    cfg: PetConfig
    embed_dim: int
    num_layers: int
    num_classes: int
    head_w: Tensor
    head_b: Tensor
    prompts: Tensor | None = None
    adapter_layers: list[AdapterLayer] = field(default_factory=list)
    lora_layers: list[LoraLayer] = field(default_factory=list)

    @property
    def method(self) -> Method:
        return self.cfg.method

    def module_tensors(self) -> list[tuple[str, Tensor]]:
        """Named method tensors, head excluded (the serializable bank)."""
        if self.method.is_vpt:
            out = [("prompt_tokens", self.prompts)]
        elif self.method is Method.ADAPTER:
            out = []
            for i, layer in enumerate(self.adapter_layers):
                out.append((f"layer{i:02d}.w_down", layer.w_down))
                out.append((f"layer{i:02d}.w_up", layer.w_up))
        else:
            out = []
            for i, layer in enumerate(self.lora_layers):
                out.append((f"layer{i:02d}.a_q", layer.a_q))
                out.append((f"layer{i:02d}.b_q", layer.b_q))
                out.append((f"layer{i:02d}.a_v", layer.a_v))
                out.append((f"layer{i:02d}.b_v", layer.b_v))
        return sorted(out)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return sorted(self.module_tensors() + [("head_w", self.head_w), ("head_b", self.head_b)])

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def check_compatible(self, vit_cfg: "ViTConfig") -> None:
        if self.embed_dim != vit_cfg.embed_dim or self.num_layers != vit_cfg.num_layers:
            raise ConfigError(
                f"tuning modules built for d={self.embed_dim}, L={self.num_layers} cannot "
                f"attach to backbone with d={vit_cfg.embed_dim}, L={vit_cfg.num_layers}")
        self.cfg.validate(vit_cfg)

    def clone(self) -> "PetParams":
        def c(t):
            return Tensor(t.data.copy(), t.requires_grad)

        return PetParams(
            cfg=self.cfg,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_classes=self.num_classes,
            head_w=c(self.head_w),
            head_b=c(self.head_b),
            prompts=c(self.prompts) if self.prompts is not None else None,
            adapter_layers=[AdapterLayer(c(l.w_down), c(l.w_up)) for l in self.adapter_layers],
            lora_layers=[LoraLayer(c(l.a_q), c(l.b_q), c(l.a_v), c(l.b_v))
                         for l in self.lora_layers],
        )


def attach(cfg: PetConfig, vit_cfg: "ViTConfig", num_classes: int, seed: int) -> PetParams:
    """Freshly initialized tuning modules for the given backbone geometry.

    Prompts are Xavier-uniform; adapter down / low-rank A factors are
    truncated-normal with the up / B factors zeroed (identity at init);
    the task head starts at exactly zero. Deterministic per seed.
    """
    cfg.validate(vit_cfg)
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    d, layers = vit_cfg.embed_dim, vit_cfg.num_layers

    params = PetParams(
        cfg=cfg,
        embed_dim=d,
        num_layers=layers,
        num_classes=num_classes,
        head_w=Tensor(np.zeros((d, num_classes)), requires_grad=True),
        head_b=Tensor(np.zeros((num_classes,)), requires_grad=True),
    )
    if cfg.method.is_vpt:
        rows = layers if cfg.method is Method.VPT_DEEP else 1
        params.prompts = Tensor(xavier_uniform(rng, (rows, cfg.k, d), fan_in=d, fan_out=d),
                                requires_grad=True)
    elif cfg.method is Method.ADAPTER:
        for _ in range(layers):
            params.adapter_layers.append(AdapterLayer(
                w_down=Tensor(trunc_normal(rng, (d, cfg.h)), requires_grad=True),
                w_up=Tensor(np.zeros((cfg.h, d)), requires_grad=True),
            ))
    else:
        for _ in range(layers):
            params.lora_layers.append(LoraLayer(
                a_q=Tensor(trunc_normal(rng, (d, cfg.r)), requires_grad=True),
                b_q=Tensor(np.zeros((cfg.r, d)), requires_grad=True),
                a_v=Tensor(trunc_normal(rng, (d, cfg.r)), requires_grad=True),
                b_v=Tensor(np.zeros((cfg.r, d)), requires_grad=True),
            ))
    return params


def freeze_for(vit_params: "ViTParams", pet: PetParams | None) -> None:
    """Apply the freezing mask: with modules attached the whole backbone is
    frozen; without them (full fine-tuning) everything is trainable."""
    vit_params.set_trainable(pet is None)


def insert_prompts(layer_input: Tensor, prompts: Tensor, layer_index: int,
                   method: Method, max_seq_len: int = 256) -> Tensor:
    """Place prompt tokens into a (B, T, d) sequence ahead of block ``layer_index``.

    Layer 0 inserts the tokens between the class token and the patches. For
    the deep variant, later layers overwrite the k prompt slots with that
    layer's tokens (the previous layer's prompt outputs are discarded); for
    the shallow variant later layers pass through untouched. Class and patch
    positions always pass through.
    """
    if not method.is_vpt:
        raise ConfigError(f"insert_prompts: method {method} has no prompt tokens")
    k = prompts.shape[0]
    if k == 0:
        return layer_input
    if method is Method.VPT_SHALLOW and layer_index > 0:
        return layer_input
    b, t, d = layer_input.shape
    if prompts.shape[1] != d:
        raise ShapeError(f"insert_prompts: prompt dim {prompts.shape} does not match "
                         f"sequence dim {layer_input.shape}")
    tokens = broadcast_to(reshape(prompts, (1, k, d)), (b, k, d))
    cls = narrow(layer_input, 1, 0, 1)
    if layer_index == 0:
        if t + k > max_seq_len:
            raise ConfigError(f"insert_prompts: sequence length {t}+{k} exceeds "
                              f"max_seq_len={max_seq_len}")
        rest = narrow(layer_input, 1, 1, t - 1)
    else:
        if t < 1 + k:
            raise ShapeError(f"insert_prompts: sequence of length {t} has no room for "
                             f"{k} prompt slots")
        rest = narrow(layer_input, 1, 1 + k, t - 1 - k)
    return concat([cls, tokens, rest], axis=1)


def adapter_apply(x: Tensor, w_down: Tensor, w_up: Tensor) -> Tensor:
    """Residual bottleneck x + gelu(x @ w_down) @ w_up (no biases)."""
    return add(x, matmul(gelu(matmul(x, w_down)), w_up))


def lora_qv(x: Tensor, w: Tensor, a: Tensor, b: Tensor, s: float) -> Tensor:
    """Projection with a scaled low-rank delta: x @ w + s * x @ a @ b."""
    return add(matmul(x, w), scale(matmul(matmul(x, a), b), s))


def count_trainable(vit_params: "ViTParams", pet: PetParams) -> dict:
    """Closed-form trainable/total parameter accounting for an attached model."""
    d, layers = pet.embed_dim, pet.num_layers
    head = d * pet.num_classes + pet.num_classes
    cfg = pet.cfg
    if cfg.method is Method.VPT_DEEP:
        trainable = layers * cfg.k * d + head
    elif cfg.method is Method.VPT_SHALLOW:
        trainable = cfg.k * d + head
    elif cfg.method is Method.ADAPTER:
        trainable = layers * 2 * d * cfg.h + head
    else:
        trainable = layers * 4 * d * cfg.r + head
    total = vit_params.total_size() + trainable
    return {"trainable": trainable, "total": total, "ratio": trainable / total}
