"""Training objectives.

The composite objective combines a dice-style overlap term with a
cross-entropy term, beta1*L_s1 + beta2*L_s2, both computed on
temperature-softened probabilities. The class sums of the dice term extend
over classes and pixels (flattened), the standard soft-dice reading.
Cross-entropy, plain dice, and focal-Tversky alternatives back the loss
ablation; the soft-nearest-neighbor kind is a registered hook without an
implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

LOSS_KINDS = ("lt", "ce", "dice", "focal_tversky", "soft_nn")
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    beta1: float = 0.9
    beta2: float = 0.1
    tau: float = 1.5
    classes: int = 4
    kind: str = "lt"
    class_weights: tuple | None = None

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise ConfigError(
                f"betas must be nonnegative with beta1+beta2 > 0, got ({self.beta1}, {self.beta2})"
            )
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind '{self.kind}'; choose from {LOSS_KINDS}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if len(w) != self.classes:
                raise ConfigError(
                    f"class_weights has {len(w)} entries for {self.classes} classes"
                )
            object.__setattr__(self, "class_weights", w)


def one_hot_targets(masks: np.ndarray, classes: int) -> T.Tensor:
    """(b, H, W) index masks -> (b, H, W, classes) one-hot constant tensor."""
    masks = np.asarray(masks)
    if masks.min() < 0 or masks.max() >= classes:
        raise ShapeError(
            f"mask values span [{masks.min()}, {masks.max()}] outside {classes} classes"
        )
    hot = np.zeros(masks.shape + (classes,), dtype=np.float32)
    np.put_along_axis(hot, masks[..., None].astype(np.int64), 1.0, axis=-1)
    return T.Tensor(hot)


def _check_inputs(logits: T.Tensor, targets: T.Tensor, cfg: LossConfig) -> None:
    if len(logits.dims) != 4:
        raise ShapeError(f"logits must be (batch, H, W, classes), got {logits.dims}")
    if logits.dims != targets.dims:
        raise ShapeError(f"logits {logits.dims} vs targets {targets.dims}")
    if logits.dims[-1] != cfg.classes:
        raise ShapeError(f"logits carry {logits.dims[-1]} classes, config says {cfg.classes}")


def loss_s1(logits: T.Tensor, targets: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """Dice-style term: per sample 1 - 2*sum(T*p) / sum(T^2 + p^2), batch mean."""
    _check_inputs(logits, targets, cfg)
    p = T.softmax_temp(logits, cfg.tau)
    axes = (1, 2, 3)
    num = T.sum_axes(T.mul(targets, p), axes)
    den = T.sum_axes(T.add(T.mul(targets, targets), T.mul(p, p)), axes)
    ratio = T.div(T.scale(num, 2.0), den)
    return T.mean_all(T.add(T.scale(ratio, -1.0), 1.0))


def loss_s2(logits: T.Tensor, targets: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """Cross-entropy term: batch mean of summed -T*log(p), probabilities clamped."""
    _check_inputs(logits, targets, cfg)
    p = T.softmax_temp(logits, cfg.tau)
    logp = T.log(T.clamp_min(p, PROB_EPS))
    weighted = T.mul(targets, logp)
    if cfg.class_weights is not None:
        w = np.broadcast_to(
            np.asarray(cfg.class_weights, dtype=np.float32), logits.dims
        ).copy()
        weighted = T.mul(weighted, T.Tensor(w))
    per_sample = T.sum_axes(weighted, (1, 2, 3))
    return T.scale(T.mean_all(per_sample), -1.0)


def loss_lt(logits: T.Tensor, targets: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """beta1*L_s1 + beta2*L_s2; zero-weight terms are skipped so the
    single-term projections are bit-exact."""
    if cfg.beta2 == 0.0:
        return T.scale(loss_s1(logits, targets, cfg), cfg.beta1) if cfg.beta1 != 1.0 else loss_s1(
            logits, targets, cfg
        )
    if cfg.beta1 == 0.0:
        return T.scale(loss_s2(logits, targets, cfg), cfg.beta2) if cfg.beta2 != 1.0 else loss_s2(
            logits, targets, cfg
        )
    return T.add(
        T.scale(loss_s1(logits, targets, cfg), cfg.beta1),
        T.scale(loss_s2(logits, targets, cfg), cfg.beta2),
    )


def loss_focal_tversky(
    logits: T.Tensor,
    targets: T.Tensor,
    cfg: LossConfig,
    alpha: float = 0.7,
    beta: float = 0.3,
    gamma: float = 4.0 / 3.0,
) -> T.Tensor:
    """Focal Tversky: sum over classes of (1 - TI_c)^gamma with
    TI_c = TP / (TP + alpha*FN + beta*FP) on softened probabilities."""
    _check_inputs(logits, targets, cfg)
    p = T.softmax_temp(logits, cfg.tau)
    total = None
    for c in range(cfg.classes):
        pc = T.narrow(p, 3, c, 1)
        tc = T.narrow(targets, 3, c, 1)
        tp = T.sum_all(T.mul(pc, tc))
        fn = T.sum_all(T.mul(T.add(T.scale(pc, -1.0), 1.0), tc))
        fp = T.sum_all(T.mul(pc, T.add(T.scale(tc, -1.0), 1.0)))
        den = T.add(tp, T.add(T.scale(fn, alpha), T.scale(fp, beta)))
        ti = T.div(tp, den)
        term = T.powc(T.add(T.scale(ti, -1.0), 1.0), gamma)
        total = term if total is None else T.add(total, term)
    return total


def compute_loss(logits: T.Tensor, targets: T.Tensor, cfg: LossConfig) -> T.Tensor:
    """Dispatch on cfg.kind; this is the trainer's single entry point."""
    if cfg.kind == "lt":
        return loss_lt(logits, targets, cfg)
    if cfg.kind == "ce":
        return loss_s2(logits, targets, replace(cfg, tau=1.0))
    if cfg.kind == "dice":
        return loss_s1(logits, targets, cfg)
    if cfg.kind == "focal_tversky":
        return loss_focal_tversky(logits, targets, cfg)
    if cfg.kind == "soft_nn":
        raise ConfigError(
            "loss kind 'soft_nn' is a registered hook without an implementation: "
            "it needs an embedding-space formulation this architecture does not define"
        )
    raise ConfigError(f"unknown loss kind '{cfg.kind}'")
