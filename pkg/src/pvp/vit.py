"""Miniature vision transformer: patch embedding, class token, pre-norm
encoder blocks (multi-head self-attention + MLP), classifier head.

The forward pass is a pure function of (backbone params, optional tuning
modules, batch). Tuning-module insertion points (prompt slots, low-rank
query/value deltas, bottleneck after the MLP) are delegated to ``pvp.pet``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import pet as _pet
from .autodiff import (Tensor, add, broadcast_to, concat, gelu, layernorm,
                       matmul, narrow, reshape, scale, softmax, transpose,
                       trunc_normal)
from .errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from .pet import PetParams


@dataclass(frozen=True)
class ViTConfig:
    """Architecture hyperparameters of the miniature backbone."""

    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 48
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim",
                     "num_layers", "num_heads", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"ViTConfig.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"ViTConfig.patch_size ({self.patch_size}) must divide image_size ({self.image_size})")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"ViTConfig.num_heads ({self.num_heads}) must divide embed_dim ({self.embed_dim})")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"ViTConfig.mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor


_BLOCK_FIELDS = ("ln1_gamma", "ln1_beta", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                 "w_o", "b_o", "ln2_gamma", "ln2_beta", "w_mlp1", "b_mlp1",
                 "w_mlp2", "b_mlp2")


@dataclass
class ViTParams:
    """The full backbone parameter set. Trainability is controlled through
    the ``requires_grad`` flags, flipped wholesale by freeze/unfreeze."""

    cfg: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("cls_token", self.cls_token), ("head_b", self.head_b),
               ("head_w", self.head_w), ("patch_b", self.patch_b),
               ("patch_w", self.patch_w), ("pos_embed", self.pos_embed)]
        for i, blk in enumerate(self.blocks):
            for name in _BLOCK_FIELDS:
                out.append((f"block{i:02d}.{name}", getattr(blk, name)))
        return sorted(out)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def freeze(self) -> None:
        self.set_trainable(False)

    def clone(self) -> "ViTParams":
        blocks = [BlockParams(**{n: Tensor(getattr(b, n).data.copy(),
                                           getattr(b, n).requires_grad)
                                 for n in _BLOCK_FIELDS}) for b in self.blocks]
        return ViTParams(
            cfg=self.cfg,
            patch_w=Tensor(self.patch_w.data.copy(), self.patch_w.requires_grad),
            patch_b=Tensor(self.patch_b.data.copy(), self.patch_b.requires_grad),
            cls_token=Tensor(self.cls_token.data.copy(), self.cls_token.requires_grad),
            pos_embed=Tensor(self.pos_embed.data.copy(), self.pos_embed.requires_grad),
            blocks=blocks,
            head_w=Tensor(self.head_w.data.copy(), self.head_w.requires_grad),
            head_b=Tensor(self.head_b.data.copy(), self.head_b.requires_grad),
        )

    def total_size(self) -> int:
        return sum(t.size for t in self.tensors())


def param_count(cfg: ViTConfig) -> int:
    """Closed-form backbone parameter count (checked against enumeration in tests)."""
    d, h = cfg.embed_dim, cfg.mlp_hidden
    per_block = 4 * (d * d + d) + 4 * d + (d * h + h) + (h * d + d)
    return (cfg.patch_dim * d + d          # patch projection
            + d                            # class token
            + (cfg.num_patches + 1) * d    # positional embedding
            + cfg.num_layers * per_block
            + d * cfg.num_classes + cfg.num_classes)  # head


def init_backbone(cfg: ViTConfig, seed: int) -> ViTParams:
    """Fresh backbone: truncated-normal weights (std 0.02), zero biases and
    class token, truncated-normal positional embedding. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    d = cfg.embed_dim

    def w(shape):
        return Tensor(trunc_normal(rng, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params = ViTParams(
        cfg=cfg,
        patch_w=w((cfg.patch_dim, d)),
        patch_b=zeros((d,)),
        cls_token=zeros((1, d)),
        pos_embed=w((cfg.num_patches + 1, d)),
        head_w=w((d, cfg.num_classes)),
        head_b=zeros((cfg.num_classes,)),
    )
    for _ in range(cfg.num_layers):
        params.blocks.append(BlockParams(
            ln1_gamma=ones((d,)), ln1_beta=zeros((d,)),
            w_q=w((d, d)), b_q=zeros((d,)),
            w_k=w((d, d)), b_k=zeros((d,)),
            w_v=w((d, d)), b_v=zeros((d,)),
            w_o=w((d, d)), b_o=zeros((d,)),
            ln2_gamma=ones((d,)), ln2_beta=zeros((d,)),
            w_mlp1=w((d, cfg.mlp_hidden)), b_mlp1=zeros((cfg.mlp_hidden,)),
            w_mlp2=w((cfg.mlp_hidden, d)), b_mlp2=zeros((d,)),
        ))
    return params


def backbone_digest(params: ViTParams) -> str:
    """SHA-256 over every backbone tensor (sorted by name); the freezing witness."""
    h = hashlib.sha256()
    for name, t in params.named_tensors():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _to_patches(batch: Tensor, cfg: ViTConfig) -> Tensor:
    b, c, height, width = batch.shape
    p = cfg.patch_size
    hp, wp = height // p, width // p
    x = reshape(batch, (b, c, hp, p, wp, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, hp * wp, c * p * p))


def _attention(x: Tensor, blk: BlockParams, cfg: ViTConfig, pet, layer: int) -> Tensor:
    b, t, d = x.shape
    nh, hd = cfg.num_heads, cfg.head_dim
    xn = layernorm(x, blk.ln1_gamma, blk.ln1_beta)
    if pet is not None and pet.method is _pet.Method.LORA:
        lw = pet.lora_layers[layer]
        q = add(_pet.lora_qv(xn, blk.w_q, lw.a_q, lw.b_q, pet.cfg.s), blk.b_q)
        v = add(_pet.lora_qv(xn, blk.w_v, lw.a_v, lw.b_v, pet.cfg.s), blk.b_v)
    else:
        q = add(matmul(xn, blk.w_q), blk.b_q)
        v = add(matmul(xn, blk.w_v), blk.b_v)
    k = add(matmul(xn, blk.w_k), blk.b_k)

    def split_heads(m):
        return transpose(reshape(m, (b, t, nh, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = softmax(logits)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return add(matmul(ctx, blk.w_o), blk.b_o)


def _mlp(x: Tensor, blk: BlockParams, pet, layer: int) -> Tensor:
    xn = layernorm(x, blk.ln2_gamma, blk.ln2_beta)
    h = gelu(add(matmul(xn, blk.w_mlp1), blk.b_mlp1))
    out = add(matmul(h, blk.w_mlp2), blk.b_mlp2)
    if pet is not None and pet.method is _pet.Method.ADAPTER:
        aw = pet.adapter_layers[layer]
        out = _pet.adapter_apply(out, aw.w_down, aw.w_up)
    return out


def forward(params: ViTParams, batch, pet: "PetParams | None" = None,
            return_features: bool = False) -> Tensor:
    """Logits (or pre-head class-token features) for a (B, C, H, W) batch.

    With ``pet`` absent this is the bare backbone; with it attached, the
    tuning modules are inserted at their method-specific points and the
    classifier head is read from ``pet`` instead of the backbone.
    """
    cfg = params.cfg
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.data.ndim != 4 or batch.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"forward: batch shape {batch.shape} does not match configured "
            f"(B, {cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    if pet is not None:
        pet.check_compatible(cfg)
    b = batch.shape[0]
    d = cfg.embed_dim

    tokens = add(matmul(_to_patches(batch, cfg), params.patch_w), params.patch_b)
    cls = broadcast_to(reshape(params.cls_token, (1, 1, d)), (b, 1, d))
    x = add(concat([cls, tokens], axis=1), params.pos_embed)

    vpt = pet is not None and pet.method in (_pet.Method.VPT_SHALLOW, _pet.Method.VPT_DEEP)
    for layer, blk in enumerate(params.blocks):
        if vpt:
            row = 0 if pet.method is _pet.Method.VPT_SHALLOW else layer
            prompts = reshape(narrow(pet.prompts, 0, row, 1), pet.prompts.shape[1:])
            x = _pet.insert_prompts(x, prompts, layer, pet.method,
                                    max_seq_len=pet.cfg.max_seq_len)
        x = add(x, _attention(x, blk, cfg, pet, layer))
        x = add(x, _mlp(x, blk, pet, layer))

    features = reshape(narrow(x, 1, 0, 1), (b, d))
    if return_features:
        return features
    if pet is not None:
        return add(matmul(features, pet.head_w), pet.head_b)
    return add(matmul(features, params.head_w), params.head_b)
