"""Finite-difference verification of every differentiable operation.

The oracle perturbs each parameter coordinate by +/-h (h = 1e-3) and forms
the central-difference quotient with the computation promoted to 64-bit
accumulation (a float32-stored scalar cannot resolve quotients of small
gradients). Analytic gradients come from the ordinary float32 engine. A
coordinate passes when

    |analytic - numeric| / max(|analytic|, |numeric|, 0.01) <= tol

the floor keeping near-zero denominators from turning float32 rounding
noise into spurious failures.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T

STEP = 1e-3
TOL = 1e-3
REL_FLOOR = 0.01


def finite_difference(f, param: T.Tensor, step: float = STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``param``.

    The parameter is temporarily held in float64 so perturbations are exact,
    and ``f`` is evaluated under promoted precision.
    """
    orig = param.data
    work = orig.astype(np.float64)
    param.data = work
    flat = work.reshape(-1)
    grad = np.empty(flat.shape, dtype=np.float64)
    try:
        with T.promoted_precision():
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                fp = float(f())
                flat[i] = saved - step
                fm = float(f())
                flat[i] = saved
                grad[i] = (fp - fm) / (2.0 * step)
    finally:
        param.data = orig
    return grad.reshape(param.dims)


def rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    frac_within: float
    coords: int
    passed: bool


def check_scalar_fn(name, build, tol: float = TOL, min_frac: float = 1.0) -> CheckResult:
    """Run one gradient check.

    ``build()`` returns (forward, params): ``forward()`` produces the scalar
    loss Tensor from current parameter data, ``params`` the leaf tensors to
    verify. Passing requires at least ``min_frac`` of coordinates within
    ``tol``; max_rel_err reports the worst coordinate either way.
    """
    forward, params = build()
    for p in params:
        p.grad = None
    out = forward()
    T.backward(out)

    errs = []
    for p in params:
        analytic = np.zeros(p.dims, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        numeric = finite_difference(lambda: forward().item(), p)
        errs.append(rel_errors(analytic, numeric).reshape(-1))
    all_errs = np.concatenate(errs) if errs else np.zeros(0)
    max_err = float(all_errs.max()) if all_errs.size else 0.0
    frac = float((all_errs <= tol).mean()) if all_errs.size else 1.0
    passed = frac >= min_frac and (min_frac < 1.0 or max_err <= tol)
    return CheckResult(name, max_err, frac, int(all_errs.size), passed)


def _rng(seed):
    return np.random.default_rng(seed)


def _away_from_kinks(arr, margin=2 * STEP):
    """Nudge entries off zero so ReLU kinks cannot corrupt the difference quotient."""
    small = np.abs(arr) < margin
    arr[small] = margin * np.where(arr[small] >= 0, 1.0, -1.0)
    return arr


def _weighted(out: T.Tensor, rng) -> T.Tensor:
    """Scalarize a tensor with fixed random weights, keeping |f| small."""
    w = T.Tensor(rng.uniform(0.5, 1.5, size=out.dims).astype(np.float32) / out.size)
    return T.sum_all(T.mul(out, w))


def _param(rng, *dims, lo=-1.0, hi=1.0, kinks=False):
    data = rng.uniform(lo, hi, size=dims).astype(np.float32)
    if kinks:
        data = _away_from_kinks(data)
    return T.Tensor(data, requires_grad=True)


# --- per-op builders ------------------------------------------------------


def _build_add(seed=0):
    rng = _rng(seed)
    a = _param(rng, 4, 5)
    b = _param(rng, 4, 5)
    return (lambda: _weighted(T.add(a, b), _rng(seed + 1))), [a, b]


def _build_sub(seed=0):
    rng = _rng(seed)
    a = _param(rng, 4, 5)
    b = _param(rng, 4, 5)
    return (lambda: _weighted(T.sub(a, b), _rng(seed + 1))), [a, b]


def _build_mul(seed=0):
    rng = _rng(seed)
    a = _param(rng, 4, 5)
    b = _param(rng, 4, 5)
    return (lambda: _weighted(T.mul(a, b), _rng(seed + 1))), [a, b]


def _build_relu(seed=0):
    rng = _rng(seed)
    a = _param(rng, 6, 6, kinks=True)
    return (lambda: _weighted(T.relu(a), _rng(seed + 1))), [a]


def _build_scale(seed=0):
    rng = _rng(seed)
    a = _param(rng, 4, 5)
    return (lambda: _weighted(T.scale(a, 1.7), _rng(seed + 1))), [a]


def _build_matmul(seed=0):
    rng = _rng(seed)
    a = _param(rng, 4, 3)
    b = _param(rng, 3, 5)
    return (lambda: _weighted(T.matmul(a, b), _rng(seed + 1))), [a, b]


def _build_conv2d(seed=0):
    rng = _rng(seed)
    x = _param(rng, 5, 5, 2)
    w = _param(rng, 3, 3, 2, 3)
    b = _param(rng, 3)
    return (lambda: _weighted(T.conv2d(x, w, b), _rng(seed + 1))), [x, w, b]


def _build_batchnorm(seed=0):
    rng = _rng(seed)
    x = _param(rng, 4, 4, 2)
    gamma = _param(rng, 2, lo=0.5, hi=1.5)
    beta = _param(rng, 2, lo=-0.5, hi=0.5)

    def forward():
        rm = np.zeros(2, dtype=np.float32)
        rv = np.ones(2, dtype=np.float32)
        return _weighted(T.batchnorm(x, gamma, beta, rm, rv, training=True), _rng(seed + 1))

    return forward, [x, gamma, beta]


def _build_layernorm(seed=0):
    rng = _rng(seed)
    x = _param(rng, 5, 6)
    gamma = _param(rng, 6, lo=0.5, hi=1.5)
    beta = _param(rng, 6, lo=-0.5, hi=0.5)
    return (lambda: _weighted(T.layernorm(x, gamma, beta), _rng(seed + 1))), [x, gamma, beta]


def _build_softmax_temp(seed=0):
    rng = _rng(seed)
    x = _param(rng, 5, 4, lo=-2.0, hi=2.0)
    return (lambda: _weighted(T.softmax_temp(x, 1.5), _rng(seed + 1))), [x]


def _build_maxpool2x2(seed=0):
    rng = _rng(seed)
    x = _param(rng, 6, 6, 2)

    def forward():
        y, _ = T.maxpool2x2(x)
        return _weighted(y, _rng(seed + 1))

    return forward, [x]


def _build_max_unpool2x2(seed=0):
    rng = _rng(seed)
    x = _param(rng, 6, 6, 2, lo=0.1, hi=1.0)

    def forward():
        y, idx = T.maxpool2x2(x)
        return _weighted(T.max_unpool2x2(y, idx), _rng(seed + 1))

    return forward, [x]


def _build_resize_bilinear(seed=0):
    rng = _rng(seed)
    x = _param(rng, 4, 5, 2)
    return (lambda: _weighted(T.resize_bilinear(x, 7, 3), _rng(seed + 1))), [x]


def _build_encoder_layer(seed=0):
    from .transformer import PatchConfig, TransformerLayer, encoder_layer

    cfg = PatchConfig(patch=2, embed_dim=8, heads=2, depth=1)
    layer = TransformerLayer.create(cfg, _rng(seed))
    rng = _rng(seed + 7)
    q = _param(rng, 4, 8)
    params = [q] + layer.parameters()
    return (lambda: _weighted(encoder_layer(q, layer, cfg), _rng(seed + 1))), params


def _build_full_model(seed=0):
    """End-to-end composite-loss gradient on an 8x8x3 two-class model."""
    from .losses import LossConfig, loss_lt, one_hot_targets
    from .model import ArchConfig, SegModel

    arch = ArchConfig(
        rows=8,
        cols=8,
        channels=3,
        classes=2,
        widths=(2, 3),
        spb_counts=(1, 1),
        patch=4,
        embed_dim=8,
        heads=2,
        depth=1,
    )
    model = SegModel.create(arch, seed=seed + 3)
    rng = _rng(seed)
    x = T.Tensor(rng.uniform(0.0, 1.0, size=(8, 8, 3)).astype(np.float32))
    mask = rng.integers(0, 2, size=(8, 8))
    lcfg = LossConfig(beta1=0.9, beta2=0.1, tau=1.5, classes=2)
    targets = one_hot_targets(mask[None, :, :], 2)

    def forward():
        logits = model.forward_logits(x, training=True)
        return loss_lt(T.stack([logits]), targets, lcfg)

    return forward, model.trainable()


SUITE = {
    "add": _build_add,
    "sub": _build_sub,
    "mul": _build_mul,
    "relu": _build_relu,
    "scale": _build_scale,
    "matmul": _build_matmul,
    "conv2d": _build_conv2d,
    "batchnorm": _build_batchnorm,
    "layernorm": _build_layernorm,
    "softmax_temp": _build_softmax_temp,
    "maxpool2x2": _build_maxpool2x2,
    "max_unpool2x2": _build_max_unpool2x2,
    "resize_bilinear": _build_resize_bilinear,
    "encoder_layer": _build_encoder_layer,
    "full_model_lt": _build_full_model,
}

# The end-to-end check crosses ReLU kinks and pooling-argmax switches, so a
# small fraction of coordinates may sit on a non-differentiable point.
MIN_FRAC = {"full_model_lt": 0.99}


def run_suite(ops=None, seed: int = 0) -> list[CheckResult]:
    names = list(SUITE) if not ops else list(ops)
    results = []
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown gradcheck op '{name}'")
        results.append(
            check_scalar_fn(name, lambda n=name: SUITE[n](seed), min_frac=MIN_FRAC.get(name, 1.0))
        )
    return results


def format_results(results) -> str:
    lines = [f"{'op':<18} {'max_rel_err':>12} {'coords_ok':>10} {'status':>8}"]
    for r in results:
        lines.append(
            f"{r.name:<18} {r.max_rel_err:>12.3e} {r.frac_within:>9.1%} "
            f"{'pass' if r.passed else 'FAIL':>8}"
        )
    return "\n".join(lines)


def main_check(ops=None, seed: int = 0):
    start = time.time()
    results = run_suite(ops=ops, seed=seed)
    elapsed = time.time() - start
    return results, elapsed
