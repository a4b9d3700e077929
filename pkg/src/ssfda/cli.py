"""``ssfda`` command-line entry point.

Every subcommand writes deterministic artifacts (checkpoints, JSON, CSV, PNG)
into its output directory. Wall-clock timings go to a separate ``timing.json``
so the report files stay byte-reproducible.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io as _io
import logging
import sys
import time
from pathlib import Path

from . import experiment as X
from . import plots
from .config import ExperimentConfig
from .io import (CheckpointError, Split, check_shapes, load_checkpoint, read_split, save_checkpoint,
                 write_dataset, write_json)
from .metrics import evaluate
from .segnet import predict

log = logging.getLogger("ssfda")

CSV_COLUMNS = ["dataset", "severity", "road_iou", "bg_iou", "miou", "recall", "precision", "f1", "mean_entropy"]


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cannot create output directory {out}: {exc}") from None
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _timing(out: Path, t0: float) -> None:
    write_json(out / "timing.json", {"wall_clock_seconds": round(time.perf_counter() - t0, 3)})


def _split(data: str, name: str) -> Split:
    try:
        return read_split(data, name)
    except FileNotFoundError as exc:
        raise SystemExit(f"error: {exc}") from None


def _checkpoint(path: str, cfg: ExperimentConfig):
    try:
        params = load_checkpoint(path)
        check_shapes(params, cfg.net)
    except FileNotFoundError:
        raise SystemExit(f"error: checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise SystemExit(f"error: {path}: {exc}") from None
    return params


def _csv_text(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                    for k in CSV_COLUMNS})
    return buf.getvalue()


# ---------------------------------------------------------------- subcommands


def cmd_init_config(args) -> int:
    cfg = ExperimentConfig(seed=args.seed)
    cfg.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    out = _outdir(args.out)
    splits = X.build_splits(cfg)
    write_dataset(out, splits, meta={"config": cfg.to_dict()})
    _timing(out, t0)
    print(f"wrote {sum(len(s) for s in splits.values())} scenes to {out}")
    return 0


def cmd_pretrain(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    train, holdout = _split(args.data, "train"), _split(args.data, "holdout")
    out = _outdir(args.out)
    params, losses = X.pretrain(cfg, train)
    ckpt = out / "pretrained.ssfd"
    save_checkpoint(ckpt, params)
    rows = X.evaluate_split(params, holdout, cfg.net, "holdout")
    report = {
        "command": "pretrain",
        "config": cfg.to_dict(),
        "epoch_losses": losses,
        "holdout": rows,
        "checkpoint": {"path": ckpt.name, "sha256": _sha256(ckpt)},
    }
    write_json(out / "report.json", report)
    plots.loss_curve(losses, out / "loss_curve.png", "pretraining loss")
    _timing(out, t0)
    print(f"holdout mIoU {rows[-1]['miou']:.4f}; checkpoint {ckpt}")
    return 0


def cmd_adapt(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    source = _checkpoint(args.checkpoint, cfg)
    target = _split(args.data, args.split)
    out = _outdir(args.out)
    images = target.images
    m = 1 if args.no_curriculum else args.m
    monitor = None
    if args.monitor:
        # Evaluation only: labels feed the report, never the update.
        labels = target.labels
        monitor = lambda p: evaluate(predict(p, images, cfg.net), labels).to_dict()  # noqa: E731
    selftrain = "iterative" if args.iterative_baseline else "online"
    params, plan, snaps = X.adapt(cfg, source, images, m=m, selftrain=selftrain, monitor=monitor)
    ckpt = out / "adapted.ssfd"
    save_checkpoint(ckpt, params)
    (out / "plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    snap_dicts = [s.to_dict() for s in snaps]
    report = {
        "command": "adapt",
        "config": cfg.to_dict(),
        "flags": {"m": plan.m, "no_curriculum": args.no_curriculum, "selftrain": selftrain, "split": args.split},
        "source_checkpoint": {"path": str(args.checkpoint), "sha256": _sha256(Path(args.checkpoint))},
        "snapshots": snap_dicts,
        "checkpoint": {"path": ckpt.name, "sha256": _sha256(ckpt)},
    }
    write_json(out / "report.json", report)
    plots.curriculum_trace(snap_dicts, out / "curriculum.png")
    _timing(out, t0)
    print(f"adapted over {plan.m} batch(es); checkpoint {ckpt}")
    return 0


def cmd_finetune_few(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    anchor_path = Path(args.checkpoint)
    anchor = _checkpoint(args.checkpoint, cfg)
    pool = _split(args.data, args.split)
    k = cfg.distill.k if args.k is None else args.k
    if k > len(pool.scenes):
        raise SystemExit(f"error: k={k} exceeds the {len(pool.scenes)} scenes in split {args.split!r}")
    lam = 0.0 if args.no_distill else args.lam
    out = _outdir(args.out)
    try:
        res, idx = X.finetune(cfg, anchor, pool, k=k, lam=lam)
    except ValueError as exc:
        raise SystemExit(f"error: {exc}") from None
    ckpt = out / "finetuned.ssfd"
    save_checkpoint(ckpt, res.params)
    report = {
        "command": "finetune-few",
        "config": cfg.to_dict(),
        "k": k,
        "lambda": cfg.distill.lam if lam is None else lam,
        "labeled_indices": idx,
        "labeled_seeds": [pool.scenes[i].seed for i in idx],
        "epoch_losses": res.epoch_losses,
        "train_ce": {"initial": res.initial_ce, "final": res.final_ce},
        "anchor": {"path": str(anchor_path), "sha256": _sha256(anchor_path)},
        "checkpoint": {"path": ckpt.name, "sha256": _sha256(ckpt)},
    }
    if args.eval_split:
        report["eval"] = X.evaluate_split(res.params, _split(args.data, args.eval_split), cfg.net)
    write_json(out / "report.json", report)
    plots.loss_curve(res.epoch_losses, out / "loss_curve.png", "few-shot fine-tuning loss")
    _timing(out, t0)
    print(f"fine-tuned on k={k} scenes; checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    params = _checkpoint(args.checkpoint, cfg)
    out = _outdir(args.out)
    rows = []
    for name in args.split:
        split = _split(args.data, name)
        rows.extend(X.evaluate_split(params, split, cfg.net, name))
        if not args.no_figures:
            plots.severity_bars([r for r in rows if r["dataset"] == name], out / f"{name}_miou.png", f"{name}: mIoU")
            groups = split.groups()
            pick = [idx[0] for idx in groups.values()]
            imgs, labs = split.images[pick], split.labels[pick]
            plots.prediction_panel(imgs, predict(params, imgs, cfg.net), labs, out / f"{name}_predictions.png",
                                   titles=list(groups))
    (out / "metrics.csv").write_text(_csv_text(rows), encoding="utf-8")
    write_json(out / "metrics.json", {"checkpoint": str(args.checkpoint), "rows": rows})
    _timing(out, t0)
    sys.stdout.write(_csv_text(rows))
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import CASES, TOLERANCE, run_suite

    names = args.only or list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise SystemExit(f"error: unknown grad-check case(s): {', '.join(unknown)}")
    results = run_suite(args.seeds, names)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} max_rel_err={r.max_rel_error:.3e}" for r in results]
    text = "\n".join(lines) + f"\ntolerance {TOLERANCE:g}, {args.seeds} seeds per case\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssfda", description="Curriculum self-training for road segmentation under weather shift.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the default experiment config as JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-data", help="generate the synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="supervised training on the clean split")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="label-free adaptation to a target split")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="fog")
    s.add_argument("--m", type=int, default=None, help="number of curriculum batches")
    s.add_argument("--no-curriculum", action="store_true", help="adapt on all target images as one batch")
    s.add_argument("--iterative-baseline", action="store_true", help="frozen-label rounds instead of online labels")
    s.add_argument("--monitor", action="store_true", help="record target metrics per batch (report only)")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("finetune-few", help="fine-tune on k labeled target scenes")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="mixed")
    s.add_argument("--eval-split", default="mixed_holdout")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--lam", type=float, default=None, help="distillation weight (config default if omitted)")
    s.add_argument("--no-distill", action="store_true", help="set the distillation weight to 0")
    s.set_defaults(func=cmd_finetune_few)

    s = sub.add_parser("eval", help="metrics CSV per severity group plus figures")
    s.add_argument("--config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", nargs="+", default=["holdout", "fog"])
    s.add_argument("--out", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference check of every op")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--only", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
