"""Patch embedding and the stacked contextual multi-head self-attention encoders.

The image is cut into non-overlapping square patches of side P, where
P = sqrt(R*C / n_p). Each patch is linearly projected to width l and summed
with a learnable positional row; the combined projections pass through a
cascade of pre-norm attention encoders whose final output feeds the fusion
stage of the segmentation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


def fan_in_uniform(rng: np.random.Generator, fan_in: int, *dims) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=dims).astype(np.float32)


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry and encoder-stack hyperparameters."""

    patch: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 3

    def __post_init__(self):
        if self.patch < 1:
            raise ConfigError(f"patch size must be positive, got {self.patch}")
        if self.depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(
                f"embed dim {self.embed_dim} must divide evenly into {self.heads} heads"
            )

    def patch_count(self, rows: int, cols: int) -> int:
        if rows % self.patch or cols % self.patch:
            raise ShapeError(
                f"image ({rows},{cols}) not divisible into {self.patch}x{self.patch} patches"
            )
        return (rows // self.patch) * (cols // self.patch)


def patch_side_from_count(rows: int, cols: int, n_patches: int) -> int:
    """Solve P = sqrt(R*C / n_p), requiring an exact integer solution."""
    if n_patches < 1 or (rows * cols) % n_patches:
        raise ShapeError(f"{n_patches} patches do not tile a {rows}x{cols} image")
    p = math.isqrt(rows * cols // n_patches)
    if p * p * n_patches != rows * cols:
        raise ShapeError(f"patch side for {n_patches} patches of {rows}x{cols} is not integral")
    return p


def partition_patches(x: T.Tensor, patch: int) -> T.Tensor:
    """(R, C, Ch) -> (n_p, P*P*Ch), patches row-major over the patch grid."""
    if len(x.dims) != 3:
        raise ShapeError(f"partition_patches expects (R, C, Ch), got {x.dims}")
    R, C, Ch = x.dims
    if R % patch or C % patch:
        raise ShapeError(f"image ({R},{C}) not divisible by patch size {patch}")
    gh, gw = R // patch, C // patch
    t = T.reshape(x, (gh, patch, gw, patch, Ch))
    t = T.permute(t, (0, 2, 1, 3, 4))
    return T.reshape(t, (gh * gw, patch * patch * Ch))


def assemble_patches(patches: np.ndarray, rows: int, cols: int, channels: int, patch: int) -> np.ndarray:
    """Inverse of partition_patches on raw arrays (test utility)."""
    gh, gw = rows // patch, cols // patch
    t = patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return t.reshape(rows, cols, channels)


class PatchEmbedder:
    """Linear patch projection plus a learnable positional table."""

    def __init__(self, proj: T.Tensor, pos: T.Tensor):
        self.proj = proj
        self.pos = pos

    @classmethod
    def create(cls, n_patches: int, patch_width: int, embed_dim: int, rng: np.random.Generator):
        proj = T.Tensor(fan_in_uniform(rng, patch_width, patch_width, embed_dim), requires_grad=True)
        pos = T.Tensor(fan_in_uniform(rng, embed_dim, n_patches, embed_dim), requires_grad=True)
        return cls(proj, pos)

    def parameters(self):
        return [self.proj, self.pos]


def embed(patches: T.Tensor, emb: PatchEmbedder) -> T.Tensor:
    """Row i is the projected patch plus its positional row (no bias)."""
    if patches.dims[1] != emb.proj.dims[0]:
        raise ShapeError(
            f"patch width {patches.dims[1]} does not match projection input {emb.proj.dims[0]}"
        )
    if patches.dims[0] != emb.pos.dims[0]:
        raise ShapeError(
            f"{patches.dims[0]} patches vs positional table of {emb.pos.dims[0]} rows"
        )
    return T.add(T.matmul(patches, emb.proj), emb.pos)


class TransformerLayer:
    """One encoder: full-width q/k/v maps sliced per head, two norms, feedforward."""

    def __init__(self, wq, wk, wv, ln1_g, ln1_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b):
        self.wq, self.wk, self.wv = wq, wk, wv
        self.ln1_g, self.ln1_b = ln1_g, ln1_b
        self.ln2_g, self.ln2_b = ln2_g, ln2_b
        self.ff1_w, self.ff1_b = ff1_w, ff1_b
        self.ff2_w, self.ff2_b = ff2_w, ff2_b

    @classmethod
    def create(cls, cfg: PatchConfig, rng: np.random.Generator):
        l = cfg.embed_dim
        hidden = 4 * l
        mk = lambda fi, *d: T.Tensor(fan_in_uniform(rng, fi, *d), requires_grad=True)
        ones = lambda n: T.Tensor(np.ones(n, dtype=np.float32), requires_grad=True)
        zeros = lambda n: T.Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)
        return cls(
            wq=mk(l, l, l),
            wk=mk(l, l, l),
            wv=mk(l, l, l),
            ln1_g=ones(l),
            ln1_b=zeros(l),
            ln2_g=ones(l),
            ln2_b=zeros(l),
            ff1_w=mk(l, l, hidden),
            ff1_b=zeros(hidden),
            ff2_w=mk(hidden, hidden, l),
            ff2_b=zeros(l),
        )

    def parameters(self):
        return [
            self.wq, self.wk, self.wv,
            self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
            self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b,
        ]


def attention_head(q: T.Tensor, k: T.Tensor, v: T.Tensor, scale_dim: int):
    """Scaled dot-product attention for one head.

    The pre-softmax logits divide by sqrt(scale_dim), which is the full
    embedding width l (not the per-head slice width). Returns the head
    output and the row-stochastic attention weights.
    """
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(scale_dim))
    attn = T.softmax_temp(logits, 1.0)
    return T.matmul(attn, v), attn


def cmsa(q_norm: T.Tensor, layer: TransformerLayer, cfg: PatchConfig, collect_attn=None) -> T.Tensor:
    """Contextual multi-head self-attention: per-head slices, concatenated."""
    l = cfg.embed_dim
    if q_norm.dims[-1] != l:
        raise ShapeError(f"cmsa: token width {q_norm.dims[-1]} != embed dim {l}")
    if l % cfg.heads:
        raise ConfigError(f"embed dim {l} not divisible by {cfg.heads} heads")
    dh = l // cfg.heads
    qf = T.matmul(q_norm, layer.wq)
    kf = T.matmul(q_norm, layer.wk)
    vf = T.matmul(q_norm, layer.wv)
    outs = []
    for j in range(cfg.heads):
        qj = T.narrow(qf, 1, j * dh, dh)
        kj = T.narrow(kf, 1, j * dh, dh)
        vj = T.narrow(vf, 1, j * dh, dh)
        out, attn = attention_head(qj, kj, vj, scale_dim=l)
        if collect_attn is not None:
            collect_attn.append(attn)
        outs.append(out)
    return T.concat(outs, axis=1)


def encoder_layer(q: T.Tensor, layer: TransformerLayer, cfg: PatchConfig, collect_attn=None) -> T.Tensor:
    """Pre-norm attention with residual, then norm, feedforward, residual."""
    qn = T.layernorm(q, layer.ln1_g, layer.ln1_b)
    attended = T.add(cmsa(qn, layer, cfg, collect_attn), q)
    normed = T.layernorm(attended, layer.ln2_g, layer.ln2_b)
    ff = T.linear(T.relu(T.linear(normed, layer.ff1_w, layer.ff1_b)), layer.ff2_w, layer.ff2_b)
    return T.add(ff, normed)


class TransformerStack:
    """Patch embedder plus ``depth`` cascaded encoders."""

    def __init__(self, cfg: PatchConfig, embedder: PatchEmbedder, layers: list):
        self.cfg = cfg
        self.embedder = embedder
        self.layers = layers

    @classmethod
    def create(cls, rows: int, cols: int, channels: int, cfg: PatchConfig, rng: np.random.Generator):
        n_p = cfg.patch_count(rows, cols)
        width = cfg.patch * cfg.patch * channels
        embedder = PatchEmbedder.create(n_p, width, cfg.embed_dim, rng)
        layers = [TransformerLayer.create(cfg, rng) for _ in range(cfg.depth)]
        return cls(cfg, embedder, layers)

    def parameters(self):
        ps = self.embedder.parameters()
        for layer in self.layers:
            ps.extend(layer.parameters())
        return ps

    def forward(self, x: T.Tensor, collect_attn=None) -> T.Tensor:
        patches = partition_patches(x, self.cfg.patch)
        q = embed(patches, self.embedder)
        for layer in self.layers:
            q = encoder_layer(q, layer, self.cfg, collect_attn)
        return q


def transformer_stack(x: T.Tensor, stack: TransformerStack) -> T.Tensor:
    """Final projections after the full encoder cascade."""
    return stack.forward(x)
