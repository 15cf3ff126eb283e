"""Command-line entry point: ``gplab <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import EnsembleSpec, ensemble_predict, evaluate, export_predictions
from .training import NumericError, train, train_cv

log = logging.getLogger("gplab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = load_config(None, {"seed": args.seed})
    D.generate_synthetic(args.out, args.total, image_size=args.size, seed=cfg.seed)
    return EXIT_OK


def cmd_split(args) -> int:
    if args.mode == "kfold" and args.k < 2:
        raise UsageError(f"--k must be >= 2, got {args.k}")
    if args.mode == "holdout" and not 0 < args.ratio < 1:
        raise UsageError(f"--ratio must lie in (0, 1), got {args.ratio}")
    cfg = load_config(None, {"seed": args.seed})
    ds = D.ingest(args.data)
    if args.mode == "holdout":
        plan = D.split_holdout(ds, args.ratio, cfg.seed)
    else:
        plan = D.split_kfold(ds, args.k, cfg.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan.to_csv(args.out, ds)
    log.info("wrote %s split of %d records to %s", plan.mode, len(ds), args.out)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in ("model", "epochs", "seed", "data", "split", "out", "fold", "jobs")}
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.data or not cfg.split or not cfg.out:
        raise UsageError("train needs data, split and out (flags or config)")
    ds = D.ingest(cfg.data)
    plan = D.SplitPlan.from_csv(cfg.split, ds)
    if plan.mode == "kfold" and cfg.fold is None:
        raise UsageError("a k-fold split needs --fold")
    tc = cfg.train_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.render(), newline="\n")
    resume = load_checkpoint(args.resume) if args.resume else None
    train(cfg.model, ds, plan, tc, fold=cfg.fold if plan.mode == "kfold" else None, out_dir=out, resume=resume)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _run_config(args)
    if not cfg.data or not cfg.out:
        raise UsageError("cv needs data and out (flags or config)")
    ds = D.ingest(cfg.data)
    plan = D.SplitPlan.from_csv(cfg.split, ds) if cfg.split else D.split_kfold(ds, args.k, cfg.seed)
    if plan.mode != "kfold":
        raise UsageError("cv needs a k-fold split")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.render(), newline="\n")
    train_cv(cfg.model, ds, plan.k, cfg.train_config(), out, jobs=cfg.jobs, plan=plan)
    return EXIT_OK


def _load_inputs(data: str, split: Optional[str], subset: Optional[str], fold: Optional[int],
                 resize: Optional[int]):
    """Images, ids and labels (None when the directory is unlabeled)."""
    root = Path(data)
    if not root.is_dir():
        raise D.DataError(f"data directory {root} not found")
    has_classes = any(p.is_dir() for p in root.iterdir())
    if has_classes:
        ds = D.ingest(root)
        idx = np.arange(len(ds))
        if split:
            plan = D.SplitPlan.from_csv(split, ds)
            tr, va = plan.train_val(fold if plan.mode == "kfold" else None)
            idx = va if (subset or "val") == "val" else tr
        ds = ds.subset(idx)
        images = D.load_images(ds, resize)
        return images, [ds.relative_path(i) for i in range(len(ds))], ds.labels
    if split:
        raise UsageError("--split needs a labeled (class-folder) dataset")
    paths = D.ingest_unlabeled(root)
    if not paths:
        return np.zeros((0, 3, 1, 1), np.uint8), [], None
    images = np.stack([D.read_rgb(p, resize) for p in paths]).transpose(0, 3, 1, 2).copy()
    return images, [p.relative_to(root).as_posix() for p in paths], None


def _members(paths: Sequence[str]) -> EnsembleSpec:
    try:
        return EnsembleSpec.from_checkpoints(paths)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise D.DataError(str(exc)) from None


def _predict_to_csv(paths: Sequence[str], args) -> int:
    ens = _members(paths)
    images, ids, labels = _load_inputs(args.data, args.split, args.subset, args.fold, args.resize)
    if len(images) == 0:
        export_predictions([], [], args.out_csv)
        return EXIT_OK
    probs, pred = ensemble_predict(ens, images)
    Path(args.out_csv).parent.mkdir(parents=True, exist_ok=True)
    export_predictions(ids, pred, args.out_csv)
    if labels is not None:
        report = evaluate(ens, images, labels)
        stem = Path(args.out_csv).stem + "_report"
        report.save(Path(args.out_csv).parent, stem)
        log.info("macro_f1=%.4f mcc=%.4f on %d images", report.macro_f1, report.mcc, report.n_samples)
    return EXIT_OK


def cmd_predict(args) -> int:
    return _predict_to_csv([args.checkpoint], args)


def cmd_ensemble(args) -> int:
    return _predict_to_csv(args.checkpoints, args)


def cmd_evaluate(args) -> int:
    paths = [args.checkpoint] if args.checkpoint else args.ensemble
    ens = _members(paths)
    images, _, labels = _load_inputs(args.data, args.split, args.subset, args.fold, args.resize)
    if labels is None:
        raise D.DataError("evaluation needs a labeled (class-folder) dataset")
    if len(images) == 0:
        raise D.DataError("the selected subset is empty")
    report = evaluate(ens, images, labels)
    txt, cm = report.save(args.out, "report")
    log.info("macro_f1=%.4f mcc=%.4f n=%d -> %s", report.macro_f1, report.mcc, report.n_samples, txt)
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_config(args.config)
    text = cfg.render()
    if args.out:
        Path(args.out).write_text(text, newline="\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gplab", description="Patch classification with compound-scaled MBConv networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic six-class patch dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--total", type=int, default=600)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="stratified holdout or k-fold split CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("holdout", "kfold"), default="holdout")
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    def run_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--data")
        sp.add_argument("--split")
        sp.add_argument("--out")
        sp.add_argument("--model")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one model (one fold of a k-fold split)")
    run_flags(t)
    t.add_argument("--fold", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="k-fold cross-validation training")
    run_flags(c)
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--jobs", type=int)
    c.set_defaults(func=cmd_cv)

    def input_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--split")
        sp.add_argument("--subset", choices=("train", "val"), default="val")
        sp.add_argument("--fold", type=int)
        sp.add_argument("--resize", type=int)

    pr = sub.add_parser("predict", help="single-model predictions CSV")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out-csv", required=True)
    input_flags(pr)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("ensemble", help="mean-logit ensemble predictions CSV")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--out-csv", required=True)
    input_flags(e)
    e.set_defaults(func=cmd_ensemble)

    ev = sub.add_parser("evaluate", help="confusion matrix, F1 and MCC report")
    who = ev.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--ensemble", nargs="+")
    ev.add_argument("--out", required=True)
    input_flags(ev)
    ev.set_defaults(func=cmd_evaluate)

    cf = sub.add_parser("config", help="print the resolved run configuration")
    cf.add_argument("--config")
    cf.add_argument("--out")
    cf.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (D.DataError, CheckpointError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
