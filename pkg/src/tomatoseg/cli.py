"""Command-line entry point.

Subcommands: train, evaluate, predict, augment, synth, gradcheck, sweep.
Every tunable is a dotted config key (see --help per subcommand); values
come from defaults, then an optional --config file, then --key value
overrides, in that order. Exit codes: 0 ok, 1 config/input error,
2 runtime abort, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as C
from . import report as R
from . import tensor as T
from .augment import ALL_KINDS, AugmentSpec, augment, sample_seed
from .checkpoint import load_checkpoint, save_checkpoint
from .data import discover, load_dataset, read_class_map, save_sample, split, write_class_map
from .errors import ConfigError, TomatoSegError, TrainAbort
from .gradcheck import format_results, main_check
from .model import SegModel
from .synth import synth_generate
from .trainer import evaluate_model, sweep, train

# Overlay palette following the qualitative-figure convention:
# background transparent, unripened yellow, half-ripened pink, fully cyan.
OVERLAY_RGBA = {
    0: (0, 0, 0, 0),
    1: (255, 225, 40, 140),
    2: (255, 105, 180, 140),
    3: (0, 228, 228, 140),
}

COMMAND_PREFIXES = {
    "train": ("seed", "data", "model", "loss", "train"),
    "evaluate": ("seed", "data", "model", "eval", "loss"),
    "predict": ("seed", "model"),
    "augment": ("seed", "data", "augment"),
    "synth": ("seed", "synth"),
    "gradcheck": ("seed",),
    "sweep": ("seed", "data", "model", "loss", "train", "eval", "sweep"),
}


def _parse_overrides(rest: list) -> dict:
    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"override --{key} is missing its value")
            raw = rest[i + 1]
            i += 1
        overrides[key] = C.parse_value(key, raw)
        i += 1
    return overrides


def _load_config(args, rest) -> dict:
    file_values = C.parse_config_file(args.config) if args.config else {}
    overrides = _parse_overrides(rest)
    cfg = C.merge(file_values, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    explicit = set(file_values) | set(overrides)
    return cfg, explicit


def _dataset_splits(cfg):
    root = cfg["data.root"]
    if not root:
        raise ConfigError("data.root is required")
    if not Path(root).exists():
        raise ConfigError(f"dataset root does not exist: {root}")
    manifest = discover(root)
    samples = load_dataset(manifest)
    fracs = (cfg["data.train_frac"], cfg["data.val_frac"], cfg["data.test_frac"])
    train_s, val_s, test_s = split(samples, fracs, cfg["seed"])
    return manifest, samples, train_s, val_s, test_s


def _select_eval_samples(cfg, samples, train_s, val_s, test_s):
    which = cfg["eval.split"]
    chosen = {"all": samples, "train": train_s, "val": val_s, "test": test_s}.get(which)
    if chosen is None:
        raise ConfigError(f"eval.split must be all|train|val|test, got '{which}'")
    if not chosen:
        raise ConfigError(f"eval.split '{which}' selected no samples")
    return chosen


def cmd_train(args, rest) -> int:
    cfg, _ = _load_config(args, rest)
    _, _, train_s, val_s, _ = _dataset_splits(cfg)
    arch = C.arch_from(cfg)
    lcfg = C.loss_from(cfg)
    tcfg = C.train_from(cfg)
    run_dir = Path(args.out or "runs/run")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    (run_dir / "config.resolved").write_text(C.resolved_text(cfg))
    model = SegModel.create(arch, seed=cfg["seed"])
    log_path = run_dir / "log.txt"
    lines = [
        f"run_dir {run_dir}",
        f"parameters {model.param_count()}",
        f"loss kind={lcfg.kind} beta1={lcfg.beta1} beta2={lcfg.beta2} tau={lcfg.tau}",
        f"train samples={len(train_s)} val samples={len(val_s)}",
    ]

    def log_fn(msg):
        lines.append(msg)
        print(msg)

    for ln in list(lines):
        print(ln)
    runlog = train(
        model, train_s, val_s, tcfg, lcfg, run_dir=run_dir, resume=args.resume, log_fn=log_fn
    )
    lines.append(f"wall_time_seconds {runlog.wall_time:.1f}")
    log_path.write_text("\n".join(lines) + "\n")
    if runlog.records:
        R.render_curves_png(runlog.records, run_dir / "reports" / "curves.png")
    summary = [
        f"param_count={model.param_count()}",
        f"epochs_run={len(runlog.records)}",
    ]
    if runlog.records:
        last = runlog.records[-1]
        summary += [
            f"final_train_loss={last.train_loss:.6f}",
            f"final_val_loss={last.val_loss:.6f}",
            f"final_val_miou={last.val_miou:.6f}",
        ]
    (run_dir / "reports" / "summary.kv").write_text("\n".join(summary) + "\n")
    print(f"checkpoints and reports in {run_dir}")
    return 0


def cmd_evaluate(args, rest) -> int:
    cfg, explicit = _load_config(args, rest)
    model = _model_for_inference(args.checkpoint, cfg, explicit)
    _, samples, train_s, val_s, test_s = _dataset_splits(cfg)
    chosen = _select_eval_samples(cfg, samples, train_s, val_s, test_s)
    manifest = discover(cfg["data.root"])
    report = evaluate_model(
        model,
        chosen,
        manifest.class_map,
        iou_thresh=cfg["eval.map_iou"],
        interp=cfg["eval.ap_interp"],
    )
    text = R.metrics_text(report)
    kv = R.metrics_kv(report)
    print(text)
    print(kv, end="")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        R.write_text(out / "metrics.txt", text)
        R.write_text(out / "metrics.kv", kv)
        R.render_metrics_png(report, out / "metrics.png")
    return 0


def _model_for_inference(ckpt_path, cfg, explicit) -> SegModel:
    if not Path(ckpt_path).is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    model_keys_given = any(k.startswith("model.") for k in explicit)
    if model_keys_given:
        from .checkpoint import read_entries

        model = SegModel.create(C.arch_from(cfg), seed=0)
        entries = {
            k: v for k, v in read_entries(ckpt_path).items() if not k.startswith("arch.")
        }
        model.load_state(entries)
        return model
    return load_checkpoint(ckpt_path)


def _reflect_pad_to(arr: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Reflect-pad the first two axes up to (rows, cols), iterating when the
    pad exceeds what one reflection can supply."""
    while arr.shape[0] < rows or arr.shape[1] < cols:
        pr = min(rows - arr.shape[0], arr.shape[0] - 1) if arr.shape[0] < rows else 0
        pc = min(cols - arr.shape[1], arr.shape[1] - 1) if arr.shape[1] < cols else 0
        if pr == 0 and pc == 0:
            raise ConfigError("cannot reflect-pad a single-pixel axis")
        pad = ((0, pr), (0, pc)) + ((0, 0),) * (arr.ndim - 2)
        arr = np.pad(arr, pad, mode="reflect")
    return arr


def cmd_predict(args, rest) -> int:
    cfg, explicit = _load_config(args, rest)
    model = _model_for_inference(args.checkpoint, cfg, explicit)
    arch = model.arch
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for img_path in args.images:
        img_path = Path(img_path)
        if not img_path.is_file():
            raise ConfigError(f"unreadable image: {img_path}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        h, w = image.shape[:2]
        if h > arch.rows or w > arch.cols:
            raise ConfigError(
                f"{img_path.name}: image ({h},{w}) exceeds the model's input "
                f"({arch.rows},{arch.cols}); train a model with matching dims"
            )
        padded = _reflect_pad_to(image, arch.rows, arch.cols)
        mask, _ = model.predict(T.Tensor(padded))
        mask = mask[:h, :w]
        Image.fromarray(mask.astype(np.uint8), mode="L").save(out / f"{img_path.stem}_mask.png")
        overlay = np.zeros((h, w, 4), dtype=np.uint8)
        base = np.asarray(Image.open(img_path).convert("RGBA"), dtype=np.uint8)
        for cls, rgba in OVERLAY_RGBA.items():
            overlay[mask == cls] = rgba
        blended = Image.alpha_composite(
            Image.fromarray(base, mode="RGBA"), Image.fromarray(overlay, mode="RGBA")
        )
        blended.save(out / f"{img_path.stem}_overlay.png")
        print(f"{img_path.name}: wrote {img_path.stem}_mask.png, {img_path.stem}_overlay.png")
    return 0


def cmd_augment(args, rest) -> int:
    cfg, _ = _load_config(args, rest)
    # augment consumes the whole dataset without splitting
    root = cfg["data.root"]
    if not root or not Path(root).exists():
        raise ConfigError(f"dataset root does not exist: {root!r}")
    manifest = discover(root)
    samples = load_dataset(manifest)
    out = Path(args.out or (Path(root).parent / (Path(root).name + "_aug")))
    out.mkdir(parents=True, exist_ok=True)
    write_class_map(out / "classmap.txt", manifest.class_map)
    kinds = [k.strip() for k in cfg["augment.transforms"].split(",") if k.strip()] or None
    spec = AugmentSpec.default(kinds=kinds, prob=cfg["augment.prob"])
    copies = cfg["augment.copies"]
    n_out = 0
    for i, s in enumerate(samples):
        for k in range(copies):
            seed = sample_seed(cfg["seed"] + 7919 * k, i)
            aug = augment(s, spec, seed)
            aug.stem = f"{s.stem}_aug{k}"
            save_sample(out, aug)
            n_out += 1
    print(f"wrote {n_out} augmented samples to {out}")
    return 0


def cmd_synth(args, rest) -> int:
    cfg, _ = _load_config(args, rest)
    out = Path(args.out or "synth_data")
    synth_generate(
        cfg["synth.count"], (cfg["synth.rows"], cfg["synth.cols"]), seed=cfg["seed"], root=out
    )
    print(f"wrote {cfg['synth.count']} synthetic samples to {out}")
    return 0


def cmd_gradcheck(args, rest) -> int:
    cfg, _ = _load_config(args, rest)
    ops = [o.strip() for o in args.ops.split(",") if o.strip()] if args.ops else None
    if args.inject_fault:
        with T.inject_backward_fault(args.inject_fault):
            results, elapsed = main_check(ops=ops, seed=cfg["seed"])
    else:
        results, elapsed = main_check(ops=ops, seed=cfg["seed"])
    print(format_results(results))
    print(f"elapsed {elapsed:.1f}s")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_sweep(args, rest) -> int:
    cfg, _ = _load_config(args, rest)
    manifest, samples, train_s, val_s, test_s = _dataset_splits(cfg)
    eval_s = test_s or val_s or train_s
    kind = cfg["sweep.kind"]
    out = Path(args.out or f"runs/sweep_{kind}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(C.resolved_text(cfg))
    rows = sweep(
        kind,
        C.arch_from(cfg),
        C.loss_from(cfg),
        C.train_from(cfg),
        train_s,
        val_s,
        eval_s,
        manifest.class_map,
        iou_thresh=cfg["eval.map_iou"],
        interp=cfg["eval.ap_interp"],
        log_fn=print,
    )
    tsv = R.sweep_tsv(rows, kind)
    R.write_text(out / "sweep.tsv", tsv)
    R.render_sweep_png(rows, kind, out / "sweep.png")
    print(tsv, end="")
    print(f"sweep table and figure in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tomatoseg",
        description="Convolutional-transformer tomato ripeness segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, configure=None):
        p = sub.add_parser(
            name,
            help=help_text,
            epilog=C.help_for(COMMAND_PREFIXES[name]),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="config file of 'key = value' lines")
        p.add_argument("--seed", type=int, default=None, help="global random seed")
        p.add_argument("--out", help="output directory")
        if configure:
            configure(p)
        return p

    add("train", "train a model on a dataset").add_argument(
        "--resume", action="store_true", help="resume from last.ckpt in the run directory"
    )
    p_eval = add("evaluate", "evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint")
    p_pred = add("predict", "write predicted masks and overlays")
    p_pred.add_argument("checkpoint")
    p_pred.add_argument("images", nargs="+")
    add("augment", "write augmented copies of a dataset")
    add("synth", "generate a synthetic ripeness dataset")
    p_gc = add("gradcheck", "finite-difference verification of all gradients")
    p_gc.add_argument("--ops", help="comma list restricting the checked ops")
    p_gc.add_argument("--inject-fault", help="corrupt this op's backward (harness self-test)")
    add("sweep", "run an ablation sweep (beta | tau | loss | transformer)")
    return parser


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "augment": cmd_augment,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, rest)
    except TrainAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TomatoSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
