"""The full segmentation network.

A five-level convolutional encoder of shape-preservation blocks (SPBs) and
pooling residual blocks (RBs) produces latent features; a transformer stack
runs in parallel on the same input and its projections gate the latent
features multiplicatively before an unpooling decoder with skip connections
restores full resolution and emits a per-pixel class distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .transformer import PatchConfig, TransformerStack, fan_in_uniform


@dataclass(frozen=True)
class ArchConfig:
    """Everything that shapes the learnable parameters."""

    rows: int = 64
    cols: int = 64
    channels: int = 3
    classes: int = 4
    widths: tuple = (16, 32, 64, 128, 256)
    spb_counts: tuple = (2, 2, 2, 2, 3)
    patch: int = 8
    embed_dim: int = 64
    heads: int = 4
    depth: int = 3
    use_transformer: bool = True
    backbone_id: str = "native"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "spb_counts", tuple(int(c) for c in self.spb_counts))
        levels = len(self.widths)
        if levels < 1 or len(self.spb_counts) != levels:
            raise ConfigError(
                f"widths ({levels} levels) and spb_counts ({len(self.spb_counts)}) disagree"
            )
        if any(w < 1 for w in self.widths) or any(c < 1 for c in self.spb_counts):
            raise ConfigError("level widths and SPB counts must be positive")
        div = 1 << levels
        if self.rows % div or self.cols % div:
            raise ConfigError(
                f"input ({self.rows},{self.cols}) must be divisible by 2^{levels} = {div}"
            )
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.backbone_id != "native":
            raise ConfigError(
                f"backbone '{self.backbone_id}' is not available; only the native "
                "encoder is implemented (the id is an integration hook)"
            )
        if self.use_transformer:
            PatchConfig(self.patch, self.embed_dim, self.heads, self.depth).patch_count(
                self.rows, self.cols
            )

    @property
    def levels(self) -> int:
        return len(self.widths)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.patch, self.embed_dim, self.heads, self.depth)


class ConvBN:
    """Convolution + batchnorm pair with its running statistics."""

    def __init__(self, w, b, gamma, beta, run_mean, run_var):
        self.w, self.b = w, b
        self.gamma, self.beta = gamma, beta
        self.run_mean, self.run_var = run_mean, run_var

    @classmethod
    def create(cls, rng, kh, kw, cin, cout):
        fan_in = kh * kw * cin
        return cls(
            w=T.Tensor(fan_in_uniform(rng, fan_in, kh, kw, cin, cout), requires_grad=True),
            b=T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True),
            gamma=T.Tensor(np.ones(cout, dtype=np.float32), requires_grad=True),
            beta=T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True),
            run_mean=np.zeros(cout, dtype=np.float32),
            run_var=np.ones(cout, dtype=np.float32),
        )

    def forward(self, x, training):
        y = T.conv2d(x, self.w, self.b)
        return T.batchnorm(y, self.gamma, self.beta, self.run_mean, self.run_var, training)

    def register(self, params, buffers, prefix):
        params[f"{prefix}.w"] = self.w
        params[f"{prefix}.b"] = self.b
        params[f"{prefix}.bn.g"] = self.gamma
        params[f"{prefix}.bn.b"] = self.beta
        buffers[f"{prefix}.bn.rm"] = self.run_mean
        buffers[f"{prefix}.bn.rv"] = self.run_var


class SPB:
    """Shape-preservation block: 4 convs, 4 batchnorms, 2 ReLUs.

    Spatial dims are preserved; the block input is added back when the
    channel counts match.
    """

    def __init__(self, units, residual):
        self.units = units
        self.residual = residual

    @classmethod
    def create(cls, rng, cin, cout):
        units = [ConvBN.create(rng, 3, 3, cin, cout)]
        units += [ConvBN.create(rng, 3, 3, cout, cout) for _ in range(3)]
        return cls(units, residual=cin == cout)

    def forward(self, x, training):
        y = T.relu(self.units[0].forward(x, training))
        y = self.units[1].forward(y, training)
        y = T.relu(self.units[2].forward(y, training))
        y = self.units[3].forward(y, training)
        if self.residual:
            y = T.add(y, x)
        return y

    def register(self, params, buffers, prefix):
        for i, u in enumerate(self.units, 1):
            u.register(params, buffers, f"{prefix}.c{i}")


class RB:
    """Residual block: 3 convs, 3 batchnorms, 2 ReLUs, 1 max pooling.

    Halves the spatial dims; returns the pooled map, the pooling indices,
    and the pre-pooling activation used as the decoder skip.
    """

    def __init__(self, main1, main2, shortcut):
        self.main1, self.main2, self.shortcut = main1, main2, shortcut

    @classmethod
    def create(cls, rng, ch):
        return cls(
            main1=ConvBN.create(rng, 3, 3, ch, ch),
            main2=ConvBN.create(rng, 3, 3, ch, ch),
            shortcut=ConvBN.create(rng, 1, 1, ch, ch),
        )

    def forward(self, x, training):
        if x.dims[0] % 2 or x.dims[1] % 2:
            raise ShapeError(f"residual block needs even spatial dims, got {x.dims}")
        m = T.relu(self.main1.forward(x, training))
        m = self.main2.forward(m, training)
        s = self.shortcut.forward(x, training)
        pre = T.relu(T.add(m, s))
        pooled, idx = T.maxpool2x2(pre)
        return pooled, idx, pre

    def register(self, params, buffers, prefix):
        self.main1.register(params, buffers, f"{prefix}.c1")
        self.main2.register(params, buffers, f"{prefix}.c2")
        self.shortcut.register(params, buffers, f"{prefix}.sc")


class SegModel:
    """Encoder + transformer + fusion + decoder with named parameters."""

    def __init__(self, arch: ArchConfig):
        self.arch = arch
        self.levels: list = []
        self.stack: TransformerStack | None = None
        self.fuse_proj: ConvBN | None = None
        self.dec_stages: list = []
        self.head_w: T.Tensor | None = None
        self.head_b: T.Tensor | None = None
        self.params: dict[str, T.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    @classmethod
    def create(cls, arch: ArchConfig, seed: int = 0) -> "SegModel":
        rng = np.random.default_rng(seed)
        model = cls(arch)
        cin = arch.channels
        for li, (width, n_spb) in enumerate(zip(arch.widths, arch.spb_counts), 1):
            spbs = []
            for si in range(n_spb):
                spbs.append(SPB.create(rng, cin if si == 0 else width, width))
            rb = RB.create(rng, width)
            model.levels.append((spbs, rb))
            cin = width

        if arch.use_transformer:
            model.stack = TransformerStack.create(
                arch.rows, arch.cols, arch.channels, arch.patch_config(), rng
            )
            model.fuse_proj = ConvBN.create(rng, 1, 1, arch.embed_dim, arch.widths[-1])

        L = arch.levels
        in_ch = arch.widths[-1]
        for k in range(L):
            skip_ch = arch.widths[L - 1 - k]
            out_ch = arch.widths[L - 2 - k] if L - 2 - k >= 0 else arch.widths[0]
            model.dec_stages.append(ConvBN.create(rng, 3, 3, in_ch + skip_ch, out_ch))
            in_ch = out_ch
        model.head_w = T.Tensor(
            fan_in_uniform(rng, in_ch, 1, 1, in_ch, arch.classes), requires_grad=True
        )
        model.head_b = T.Tensor(np.zeros(arch.classes, dtype=np.float32), requires_grad=True)
        model._register()
        return model

    def _register(self):
        params: dict[str, T.Tensor] = {}
        buffers: dict[str, np.ndarray] = {}
        for li, (spbs, rb) in enumerate(self.levels, 1):
            for si, spb in enumerate(spbs, 1):
                spb.register(params, buffers, f"enc.l{li}.spb{si}")
            rb.register(params, buffers, f"enc.l{li}.rb")
        if self.stack is not None:
            params["tr.embed.proj"] = self.stack.embedder.proj
            params["tr.embed.pos"] = self.stack.embedder.pos
            for ti, layer in enumerate(self.stack.layers, 1):
                pre = f"tr.t{ti}"
                params[f"{pre}.wq"] = layer.wq
                params[f"{pre}.wk"] = layer.wk
                params[f"{pre}.wv"] = layer.wv
                params[f"{pre}.ln1.g"] = layer.ln1_g
                params[f"{pre}.ln1.b"] = layer.ln1_b
                params[f"{pre}.ln2.g"] = layer.ln2_g
                params[f"{pre}.ln2.b"] = layer.ln2_b
                params[f"{pre}.ff1.w"] = layer.ff1_w
                params[f"{pre}.ff1.b"] = layer.ff1_b
                params[f"{pre}.ff2.w"] = layer.ff2_w
                params[f"{pre}.ff2.b"] = layer.ff2_b
            self.fuse_proj.register(params, buffers, "fuse.proj")
        for k, stage in enumerate(self.dec_stages, 1):
            stage.register(params, buffers, f"dec.s{k}")
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        self.params = params
        self.buffers = buffers

    def trainable(self) -> list:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # ----- forward pieces -------------------------------------------------

    def encoder_forward(self, x: T.Tensor, training: bool):
        if x.dims != (self.arch.rows, self.arch.cols, self.arch.channels):
            raise ShapeError(
                f"input dims {x.dims} do not match configured "
                f"({self.arch.rows},{self.arch.cols},{self.arch.channels})"
            )
        skips, indices = [], []
        y = x
        for spbs, rb in self.levels:
            for spb in spbs:
                y = spb.forward(y, training)
            y, idx, pre = rb.forward(y, training)
            skips.append(pre)
            indices.append(idx)
        return y, skips, indices

    def fuse(self, f_e: T.Tensor, p_t: T.Tensor) -> T.Tensor:
        """Apply the transformer projections as a multiplicative filter."""
        n_p, l = p_t.dims
        g = math.isqrt(n_p)
        if g * g != n_p:
            raise ConfigError(f"fusion needs a square patch grid; {n_p} patches have none")
        grid = T.reshape(p_t, (g, g, l))
        grid = T.resize_bilinear(grid, f_e.dims[0], f_e.dims[1])
        proj = T.conv2d(grid, self.fuse_proj.w, self.fuse_proj.b)
        return T.add(f_e, T.mul(f_e, proj))

    def decoder_logits(self, f_d: T.Tensor, skips: list, indices: list, training: bool) -> T.Tensor:
        y = f_d
        for k, stage in enumerate(self.dec_stages):
            skip = skips[-(k + 1)]
            idx = indices[-(k + 1)]
            y = T.max_unpool2x2(y, idx, skip.dims)
            y = T.concat([y, skip], axis=-1)
            y = T.relu(stage.forward(y, training))
        return T.conv2d(y, self.head_w, self.head_b)

    def decoder_forward(self, f_d, skips, indices, training=False, tau: float = 1.0):
        return T.softmax_temp(self.decoder_logits(f_d, skips, indices, training), tau)

    def forward_logits(self, x: T.Tensor, training: bool = False) -> T.Tensor:
        f_e, skips, indices = self.encoder_forward(x, training)
        if self.arch.use_transformer:
            p_t = self.stack.forward(x)
            f_d = self.fuse(f_e, p_t)
        else:
            f_d = f_e
        return self.decoder_logits(f_d, skips, indices, training)

    def forward(self, x: T.Tensor, training: bool = False, tau: float = 1.0) -> T.Tensor:
        """Per-pixel class distribution of dims (R, C, classes)."""
        return T.softmax_temp(self.forward_logits(x, training), tau)

    def predict(self, x: T.Tensor):
        """(argmax mask, per-pixel max probability) without graph recording."""
        with T.no_grad():
            probs = self.forward(x).data
        return probs.argmax(axis=-1).astype(np.int64), probs.max(axis=-1)

    # ----- persistence ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        from .errors import CheckpointError

        own = self.state_arrays()
        for name in own:
            if name not in entries:
                raise CheckpointError(f"checkpoint is missing parameter '{name}'")
            if entries[name].shape != own[name].shape:
                raise CheckpointError(
                    f"parameter '{name}' has dims {entries[name].shape}, "
                    f"model expects {own[name].shape}"
                )
        extra = [n for n in entries if n not in own]
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameter '{extra[0]}'")
        for name, p in self.params.items():
            p.data = np.ascontiguousarray(entries[name], dtype=np.float32)
            p.grad = None
        for name in self.buffers:
            self.buffers[name][:] = entries[name]
