"""Configuration registry and the "key = value" file format.

Every tunable consumed by any module is declared here once; command help,
file parsing, override validation, and the config.resolved dump are all
derived from this registry, never hand-maintained.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .model import ArchConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ConfigKey:
    key: str
    kind: str  # int | float | bool | str | ints | floats
    default: object
    help: str


REGISTRY = [
    ConfigKey("seed", "int", 0, "global random seed"),
    ConfigKey("data.root", "str", "", "dataset root (images/, masks/, classmap.txt)"),
    ConfigKey("data.train_frac", "float", 0.75, "training fraction of the split"),
    ConfigKey("data.val_frac", "float", 0.125, "validation fraction of the split"),
    ConfigKey("data.test_frac", "float", 0.125, "test fraction of the split"),
    ConfigKey("model.rows", "int", 64, "input rows (divisible by 2^levels)"),
    ConfigKey("model.cols", "int", 64, "input cols (divisible by 2^levels)"),
    ConfigKey("model.channels", "int", 3, "input channels"),
    ConfigKey("model.classes", "int", 4, "class count including background"),
    ConfigKey("model.widths", "ints", (16, 32, 64, 128, 256), "encoder channel width per level"),
    ConfigKey("model.spb_counts", "ints", (2, 2, 2, 2, 3), "shape-preservation blocks per level"),
    ConfigKey("model.patch", "int", 8, "transformer patch side in pixels"),
    ConfigKey("model.embed_dim", "int", 64, "transformer embedding width"),
    ConfigKey("model.heads", "int", 4, "attention heads"),
    ConfigKey("model.depth", "int", 3, "stacked transformer encoders"),
    ConfigKey("model.use_transformer", "bool", True, "fuse transformer projections (ablation flag)"),
    ConfigKey("model.backbone_id", "str", "native", "encoder backbone hook; only 'native' ships"),
    ConfigKey("loss.kind", "str", "lt", "lt | ce | dice | focal_tversky | soft_nn"),
    ConfigKey("loss.beta1", "float", 0.9, "weight of the dice-style term"),
    ConfigKey("loss.beta2", "float", 0.1, "weight of the cross-entropy term"),
    ConfigKey("loss.tau", "float", 1.5, "softmax temperature inside the loss"),
    ConfigKey("loss.class_weights", "floats", (), "optional per-class CE weights (empty = off)"),
    ConfigKey("train.epochs", "int", 200, "training epochs"),
    ConfigKey("train.batch_size", "int", 16, "samples per optimization step"),
    ConfigKey("train.iterations", "int", 0, "fixed iterations per epoch (0 = dataset-derived)"),
    ConfigKey("train.rho", "float", 0.95, "ADADELTA decay rate"),
    ConfigKey("train.lr", "float", 1.0, "ADADELTA learning rate"),
    ConfigKey("train.eps", "float", 1e-6, "ADADELTA epsilon"),
    ConfigKey("train.checkpoint_every", "int", 0, "periodic checkpoint cadence (0 = off)"),
    ConfigKey("train.patience", "int", 0, "early-stop patience in epochs (0 = off)"),
    ConfigKey("eval.map_iou", "float", 0.5, "box-IoU threshold for detection matching"),
    ConfigKey("eval.ap_interp", "str", "all", "AP interpolation: all | eleven"),
    ConfigKey("eval.split", "str", "all", "which samples to evaluate: all | train | val | test"),
    ConfigKey("synth.count", "int", 16, "synthetic samples to generate"),
    ConfigKey("synth.rows", "int", 64, "synthetic image rows"),
    ConfigKey("synth.cols", "int", 64, "synthetic image cols"),
    ConfigKey("augment.copies", "int", 1, "augmented copies per source sample"),
    ConfigKey("augment.transforms", "str", "", "comma list of transforms (empty = all)"),
    ConfigKey("augment.prob", "float", 0.5, "probability each transform fires"),
    ConfigKey("sweep.kind", "str", "beta", "beta | tau | loss | transformer"),
]

_BY_KEY = {e.key: e for e in REGISTRY}


def defaults() -> dict:
    return {e.key: e.default for e in REGISTRY}


def parse_value(key: str, raw: str):
    if key not in _BY_KEY:
        raise ConfigError(f"unknown config key '{key}'")
    kind = _BY_KEY[key].kind
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip()) if raw else ()
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{key}' expects {kind}, got {raw!r}") from exc


def parse_config_file(path) -> dict:
    """Line-oriented "key = value" with '#' comments."""
    values = {}
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _BY_KEY:
            raise ConfigError(f"{path}:{ln}: unknown config key '{key}'")
        values[key] = parse_value(key, raw)
    return values


def merge(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults < config file < explicit overrides."""
    cfg = defaults()
    for src in (file_values or {}), (overrides or {}):
        for key, val in src.items():
            if key not in _BY_KEY:
                raise ConfigError(f"unknown config key '{key}'")
            cfg[key] = val
    return cfg


def format_value(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, tuple):
        return ",".join(str(v) for v in val)
    return str(val)


def resolved_text(cfg: dict) -> str:
    lines = [f"{e.key} = {format_value(cfg[e.key])}" for e in REGISTRY]
    return "\n".join(lines) + "\n"


def help_for(prefixes) -> str:
    """Registry-derived help listing for the key groups a command consumes."""
    rows = []
    for e in REGISTRY:
        group = e.key.split(".", 1)[0]
        if group in prefixes or e.key in prefixes:
            rows.append(f"  {e.key:<24} {format_value(e.default):>18}  {e.help}")
    return "config keys (file or --key value overrides):\n" + "\n".join(rows)


def arch_from(cfg: dict) -> ArchConfig:
    return ArchConfig(
        rows=cfg["model.rows"],
        cols=cfg["model.cols"],
        channels=cfg["model.channels"],
        classes=cfg["model.classes"],
        widths=cfg["model.widths"],
        spb_counts=cfg["model.spb_counts"],
        patch=cfg["model.patch"],
        embed_dim=cfg["model.embed_dim"],
        heads=cfg["model.heads"],
        depth=cfg["model.depth"],
        use_transformer=cfg["model.use_transformer"],
        backbone_id=cfg["model.backbone_id"],
    )


def loss_from(cfg: dict) -> LossConfig:
    weights = cfg["loss.class_weights"]
    return LossConfig(
        beta1=cfg["loss.beta1"],
        beta2=cfg["loss.beta2"],
        tau=cfg["loss.tau"],
        classes=cfg["model.classes"],
        kind=cfg["loss.kind"],
        class_weights=weights if weights else None,
    )


def train_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        iterations=cfg["train.iterations"],
        rho=cfg["train.rho"],
        lr=cfg["train.lr"],
        eps=cfg["train.eps"],
        seed=cfg["seed"],
        checkpoint_every=cfg["train.checkpoint_every"],
        patience=cfg["train.patience"],
    )
