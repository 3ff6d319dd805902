"""ADADELTA training loop, validation tracking, checkpointing, and sweeps.

Batch composition is a pure function of (seed, epoch), validation never
touches parameters or the random stream, and optimizer state rides in a
sidecar file of the checkpoint envelope, so a resumed run is bit-identical
to an uninterrupted one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import read_entries, save_checkpoint, write_entries
from .errors import ConfigError, ContractError, NumericError, TrainAbort
from .losses import LossConfig, compute_loss, one_hot_targets
from .metrics import MaskPair, MetricsReport, confusion_matrix, evaluate_masks, iou_from_confusion
from .model import ArchConfig, SegModel


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    iterations: int = 0  # 0 = ceil(train_size / batch); >0 cycles a fixed count
    rho: float = 0.95
    lr: float = 1.0
    eps: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only best + last
    patience: int = 0  # 0 = no early stop

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}"
            )
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"decay rate must be in [0,1), got {self.rho}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    final_report: MetricsReport | None = None

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_miou"]
        for r in self.records:
            lines.append(f"{r.epoch}\t{r.train_loss:.8f}\t{r.val_loss:.8f}\t{r.val_miou:.8f}")
        return "\n".join(lines) + "\n"


class AdaDelta:
    """Standard ADADELTA with per-parameter running averages of g^2 and dx^2."""

    def __init__(self, params: dict, rho: float = 0.95, lr: float = 1.0, eps: float = 1e-6):
        self.params = dict(params)
        self.rho = np.float32(rho)
        self.lr = np.float32(lr)
        self.eps = np.float32(eps)
        self.eg2 = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.edx2 = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        one_m_rho = np.float32(1.0) - self.rho
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient dims {g.shape} do not match parameter '{name}' {p.data.shape}"
                )
            eg2 = self.eg2[name]
            edx2 = self.edx2[name]
            eg2 *= self.rho
            eg2 += one_m_rho * g * g
            delta = -np.sqrt((edx2 + self.eps) / (eg2 + self.eps)) * g
            edx2 *= self.rho
            edx2 += one_m_rho * delta * delta
            p.data = p.data + self.lr * delta

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"eg2.{name}"] = self.eg2[name]
            out[f"edx2.{name}"] = self.edx2[name]
        return out

    def load_state(self, entries: dict) -> None:
        for name in self.params:
            self.eg2[name][:] = entries[f"eg2.{name}"]
            self.edx2[name][:] = entries[f"edx2.{name}"]


def adadelta_step(params: dict, rho=0.95, lr=1.0, eps=1e-6, state: AdaDelta | None = None):
    """One-shot functional wrapper around :class:`AdaDelta` (state reusable)."""
    if state is None:
        state = AdaDelta(params, rho=rho, lr=lr, eps=eps)
    state.step()
    return state


def _batch_indices(n: int, cfg: TrainConfig, epoch: int):
    """Deterministic batches for one epoch, keyed by (seed, epoch)."""
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    if cfg.iterations > 0:
        need = cfg.iterations * cfg.batch_size
        reps = int(math.ceil(need / n))
        pool = np.concatenate([perm] * reps)[:need]
        return [pool[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(cfg.iterations)]
    n_batches = int(math.ceil(n / cfg.batch_size))
    return [perm[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(n_batches)]


def _batch_loss(model: SegModel, samples, idxs, lcfg: LossConfig, training: bool) -> T.Tensor:
    logits = T.stack([model.forward_logits(T.Tensor(samples[i].image), training) for i in idxs])
    masks = np.stack([samples[i].mask for i in idxs])
    targets = one_hot_targets(masks, lcfg.classes)
    return compute_loss(logits, targets, lcfg)


def validation_metrics(model: SegModel, samples, lcfg: LossConfig, batch_size: int):
    """(mean loss, foreground mean IoU) without touching any parameter."""
    if not samples:
        return float("nan"), float("nan")
    total, count = 0.0, 0
    pairs = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            idxs = range(start, min(start + batch_size, len(samples)))
            loss = _batch_loss(model, samples, idxs, lcfg, training=False)
            total += loss.item() * len(idxs)
            count += len(idxs)
        for s in samples:
            pred, _ = model.predict(T.Tensor(s.image))
            pairs.append(MaskPair(pred=pred, truth=s.mask))
    conf = confusion_matrix(pairs, lcfg.classes)
    ious = [iou_from_confusion(conf, c) for c in range(1, lcfg.classes)]
    present = [v for v in ious if v is not None]
    miou = float(np.mean(present)) if present else float("nan")
    return total / count, miou


def predict_samples(model: SegModel, samples):
    """Mask pairs plus per-pixel probability maps for the full metric suite."""
    pairs, probs = [], []
    with T.no_grad():
        for s in samples:
            p = model.forward(T.Tensor(s.image)).data
            pred = p.argmax(axis=-1).astype(np.int64)
            pairs.append(MaskPair(pred=pred, truth=s.mask, confidence=p.max(axis=-1)))
            probs.append(p)
    return pairs, probs


def evaluate_model(
    model: SegModel,
    samples,
    class_names: dict,
    iou_thresh: float = 0.5,
    interp: str = "all",
) -> MetricsReport:
    pairs, probs = predict_samples(model, samples)
    return evaluate_masks(pairs, class_names, iou_thresh=iou_thresh, interp=interp, prob_maps=probs)


def train(
    model: SegModel,
    train_samples,
    val_samples,
    tcfg: TrainConfig,
    lcfg: LossConfig,
    run_dir=None,
    resume: bool = False,
    log_fn=None,
) -> RunLog:
    """Optimize the model in place; returns the per-epoch log.

    With ``run_dir`` set, writes curves.tsv plus best/last checkpoints and
    the optimizer sidecar; ``resume=True`` picks up from last.ckpt.
    """
    if not train_samples:
        raise ConfigError("training set is empty")
    opt = AdaDelta(model.params, rho=tcfg.rho, lr=tcfg.lr, eps=tcfg.eps)
    start_epoch = 1
    best_miou = -1.0
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
    if resume:
        if run_dir is None:
            raise ConfigError("resume requires a run directory")
        from .checkpoint import load_checkpoint

        last = run_dir / "checkpoints" / "last.ckpt"
        restored = load_checkpoint(last)
        model.load_state(restored.state_arrays())
        side = read_entries(run_dir / "checkpoints" / "last.opt")
        start_epoch = int(round(float(side.pop("meta.epoch").reshape(-1)[0]))) + 1
        best_miou = float(side.pop("meta.best_miou").reshape(-1)[0])
        opt.load_state(side)

    log = RunLog()
    start = time.time()
    stale = 0
    for epoch in range(start_epoch, tcfg.epochs + 1):
        epoch_sum, epoch_n = 0.0, 0
        try:
            for idxs in _batch_indices(len(train_samples), tcfg, epoch):
                opt.zero_grad()
                loss = _batch_loss(model, train_samples, idxs, lcfg, training=True)
                T.backward(loss)
                opt.step()
                epoch_sum += loss.item() * len(idxs)
                epoch_n += len(idxs)
        except NumericError as exc:
            raise TrainAbort(f"epoch {epoch}: training aborted, {exc}") from exc
        train_loss = epoch_sum / epoch_n
        val_loss, val_miou = validation_metrics(model, val_samples, lcfg, tcfg.batch_size)
        record = EpochRecord(epoch, train_loss, val_loss, val_miou)
        log.records.append(record)
        if log_fn:
            log_fn(
                f"epoch {epoch}/{tcfg.epochs} train_loss={train_loss:.6f} "
                f"val_loss={val_loss:.6f} val_miou={val_miou:.6f}"
            )
        improved = not math.isnan(val_miou) and val_miou > best_miou
        if improved:
            best_miou = val_miou
            stale = 0
        else:
            stale += 1
        if run_dir is not None:
            ckpt_dir = run_dir / "checkpoints"
            if improved or (math.isnan(val_miou) and not (ckpt_dir / "best.ckpt").exists()):
                save_checkpoint(model, ckpt_dir / "best.ckpt")
            save_checkpoint(model, ckpt_dir / "last.ckpt")
            side = opt.state_arrays()
            side["meta.epoch"] = np.asarray([epoch], dtype=np.float32)
            side["meta.best_miou"] = np.asarray([best_miou], dtype=np.float32)
            write_entries(ckpt_dir / "last.opt", side)
            if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
            (run_dir / "curves.tsv").write_text(log.to_tsv())
        if tcfg.patience and stale >= tcfg.patience:
            if log_fn:
                log_fn(f"early stop after {stale} epochs without improvement")
            break
    log.wall_time = time.time() - start
    return log


# ---------------------------------------------------------------------------
# ablation sweeps

BETA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
TAU_GRID = (1.0, 1.5, 2.0, 2.5)
LOSS_GRID = ("lt", "ce", "dice", "focal_tversky")
SWEEP_KINDS = ("beta", "tau", "loss", "transformer")


def sweep_cells(kind: str):
    """The grid cells for one sweep kind, in table row order."""
    if kind == "beta":
        return [{"beta1": b1, "beta2": round(1.0 - b1, 10)} for b1 in BETA_GRID]
    if kind == "tau":
        return [{"tau": t} for t in TAU_GRID]
    if kind == "loss":
        return [{"loss_kind": k} for k in LOSS_GRID]
    if kind == "transformer":
        return [{"use_transformer": v} for v in (True, False)]
    raise ConfigError(f"unknown sweep kind '{kind}'; choose from {SWEEP_KINDS}")


def sweep(
    kind: str,
    arch: ArchConfig,
    lcfg: LossConfig,
    tcfg: TrainConfig,
    train_samples,
    val_samples,
    eval_samples,
    class_names: dict,
    iou_thresh: float = 0.5,
    interp: str = "all",
    log_fn=None,
) -> list:
    """Train and evaluate one model per grid cell; failures mark their row."""
    rows = []
    for cell in sweep_cells(kind):
        cell_arch, cell_lcfg = arch, lcfg
        if "beta1" in cell:
            cell_lcfg = replace(lcfg, beta1=cell["beta1"], beta2=cell["beta2"])
        if "tau" in cell:
            cell_lcfg = replace(lcfg, tau=cell["tau"])
        if "loss_kind" in cell:
            cell_lcfg = replace(lcfg, kind=cell["loss_kind"])
        if "use_transformer" in cell:
            cell_arch = replace(arch, use_transformer=cell["use_transformer"])
        row = dict(cell)
        try:
            model = SegModel.create(cell_arch, seed=tcfg.seed)
            train(model, train_samples, val_samples, tcfg, cell_lcfg, log_fn=None)
            report = evaluate_model(
                model, eval_samples, class_names, iou_thresh=iou_thresh, interp=interp
            )
            row.update(
                miou=report.miou, mdc=report.mdc, map=report.map, auc=report.auc, status="ok"
            )
        except Exception as exc:  # keep sweeping; the row records the failure
            row.update(
                miou=float("nan"),
                mdc=float("nan"),
                map=float("nan"),
                auc=float("nan"),
                status=f"failed: {exc}",
            )
        if log_fn:
            log_fn(f"sweep cell {cell} -> {row['status']}")
        rows.append(row)
    return rows
