"""Command-line entry point: ``cpdsense {gen,train,eval,infer}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as stdio
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .channel import ConfigError, Label, RecordingTooShort
from .features import WindowOutOfRange
from .io import FormatError, atomic_write_text, load_checkpoint
from .model import NonFiniteActivation, NonFiniteGradient
from .training import CheckpointMismatch, ClassMismatch, ShapeMismatch, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cpdsense")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpdsense", description="Simulated CSI presence classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML or JSON run configuration")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a single config value (YAML-parsed), repeatable")

    g = sub.add_parser("gen", help="simulate recordings and extract ACF features")
    common(g)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, help="number of training recordings")

    t = sub.add_parser("train", help="run stage-1 pretraining or stage-2 fine-tuning")
    common(t)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--stage1-checkpoint", type=Path)
    t.add_argument("--from-scratch", action="store_true",
                   help="stage 2 from random initialisation (ablation)")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a feature split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--window", type=int, default=15, help="smoothing window (decisions)")

    i = sub.add_parser("infer", help="per-window probabilities for one recording")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--recording", type=Path, required=True)
    i.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    i.add_argument("--window", type=int, default=15)
    return p


def _overrides(args) -> dict:
    over: dict = {}
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        section, name = key.split(".", 1)
        over.setdefault(section, {})[name] = pipeline.yaml.safe_load(raw)
    if args.seed is not None:
        over["seed"] = args.seed
        over.setdefault("train", {})["seed"] = args.seed
    return over


def _config(args, extra: dict | None = None) -> dict:
    try:
        user = pipeline.load_config_file(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    user = pipeline._merge(user, _overrides(args))
    user = pipeline._merge(user, extra or {})
    try:
        return pipeline.resolve_config(user)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_gen(args) -> int:
    extra = {"data": {"train_count": args.count}} if args.count is not None else {}
    cfg = _config(args, extra)
    splits = pipeline.generate_dataset(cfg, args.out)
    for name, samples in splits.items():
        counts = pipeline.class_counts(samples)
        print(f"{name}: {len(samples)} samples " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.stage == 2 and args.stage1_checkpoint is None and not args.from_scratch:
        raise UsageError("stage 2 needs --stage1-checkpoint (or --from-scratch)")
    if args.stage == 1 and (args.stage1_checkpoint or args.from_scratch):
        raise UsageError("--stage1-checkpoint/--from-scratch only apply to stage 2")
    extra = {"train": {"epochs": args.epochs}} if args.epochs is not None else {}
    cfg = _config(args, extra)
    splits = {"train": pipeline.load_split(args.data, "train"),
              "val": pipeline.load_split(args.data, "val")}
    if args.stage == 1:
        pre = Path(args.data) / "features" / "pretrain.acf"
        if pre.exists():
            splits["pretrain"] = pipeline.load_split(args.data, "pretrain")
        result = pipeline.run_stage1(cfg, splits, args.out)
    else:
        stage1 = None
        if args.stage1_checkpoint is not None:
            stage1, _, _ = load_checkpoint(args.stage1_checkpoint)
        result = pipeline.run_stage2(cfg, splits, stage1, args.out)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"epochs": len(result.history), **{k: last[k] for k in last if k != "epoch"}}))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, mconf, _ = load_checkpoint(args.checkpoint)
    if mconf.num_classes != 3:
        raise pipeline.DataError("evaluation needs a three-class (stage-2) checkpoint")
    samples = pipeline.load_split(args.data, args.split)
    if not samples:
        raise pipeline.DataError(f"split {args.split!r} is empty")
    report = pipeline.evaluate_samples(samples, params, mconf, args.window)
    pipeline.write_eval_report(report, args.out, args.window)
    pipeline.write_snapshot(args.out, {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                       "split": args.split, "smoothing_window": args.window})
    m, s = report["unsmoothed"], report["smoothed"]
    print(f"accuracy={m.accuracy:.4f} child_tpr={m.tpr:.4f} child_fpr={m.fpr:.4f} "
          f"smoothed_accuracy={s.accuracy:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    starts, probs, decisions = pipeline.infer_recording(args.recording, args.checkpoint, args.window)
    rows = [["window_start_s", "p_empty", "p_adult", "p_child", "decision"]]
    for t, p, d in zip(starts, probs, decisions):
        rows.append([f"{t:.3f}", f"{p[0]:.6f}", f"{p[1]:.6f}", f"{p[2]:.6f}", Label(int(d)).name])
    if args.out is None:
        csv.writer(sys.stdout).writerows(rows)
    else:
        buf = stdio.StringIO()
        csv.writer(buf).writerows(rows)
        atomic_write_text(args.out, buf.getvalue())
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cpdsense: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteActivation, NonFiniteGradient, FloatingPointError) as exc:
        print(f"cpdsense: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.DataError, FormatError, CheckpointMismatch, ClassMismatch, ShapeMismatch,
            RecordingTooShort, WindowOutOfRange, ConfigError, FileNotFoundError) as exc:
        print(f"cpdsense: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
