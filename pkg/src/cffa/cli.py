"""Command-line entry point.

    cffa generate  --config run.cfg --out data/
    cffa pretrain  --config run.cfg --data data/ --out runs/pre/
    cffa adapt     --config run.cfg --data data/ --checkpoint runs/pre/checkpoint.ckpt --out runs/ad/
    cffa eval      --config run.cfg --data data/ --checkpoint runs/ad/checkpoint.ckpt \\
                   --baseline runs/pre/checkpoint.ckpt --out runs/ad/
    cffa adistance | errors | attention  (same --data/--checkpoint/--out flags)

Exit status: 0 on success, 1 on a usage or configuration error, 2 when a
dataset or checkpoint cannot be used.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, parse_config, write_resolved
from .domains import DatasetError, read_dataset, write_dataset
from .evaluation import (
    error_analysis,
    evaluate,
    export_attention,
    per_class_a_distance,
    write_errors_csv,
    write_eval_csv,
)
from .experiment import build_domains, seeded
from .trainer import METRICS_HEADER, TrainingError, adapt, load_state, pretrain, resume, save_state

log = logging.getLogger("cffa")

SPLITS = ("source_train", "target_train", "target_test")
CHECKPOINT_NAME = "checkpoint.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(parser: argparse.ArgumentParser, data: bool = True, checkpoint: bool = False):
    parser.add_argument("--config", required=True, help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    if data:
        parser.add_argument("--data", default="data", help="dataset root written by 'generate'")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True, help="model checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cffa", description="Coarse-to-fine cross-domain detection on synthetic domains.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("generate", help="write source/target datasets"), data=False)

    p = sub.add_parser("pretrain", help="supervised training on the source domain")
    _common(p)
    p.add_argument("--checkpoint", help="continue an interrupted pretraining run")
    p.add_argument("--stop-at", type=int, help="stop after this iteration")

    p = sub.add_parser("adapt", help="adaptation from a pretrained (or partly adapted) checkpoint")
    _common(p, checkpoint=True)
    p.add_argument("--stop-at", type=int, help="stop after this iteration")

    p = sub.add_parser("eval", help="mAP@0.5 on the target test split")
    _common(p, checkpoint=True)
    p.add_argument("--baseline", help="checkpoint whose mAP is subtracted into a gain row")

    p = sub.add_parser("adistance", help="per-class proxy A-distance of foreground features")
    _common(p, checkpoint=True)
    p.add_argument("--probe", choices=("logistic", "hinge"), default="logistic")

    p = sub.add_parser("errors", help="correct / mislocalized / background error profile")
    _common(p, checkpoint=True)

    p = sub.add_parser("attention", help="export attention maps as PGM images")
    _common(p, checkpoint=True)
    p.add_argument("--split", choices=SPLITS, default="target_test")
    p.add_argument("--count", type=int, default=4, help="number of images to export")
    return parser


def _config(args) -> RunConfig:
    config = parse_config(args.config)
    return config if args.seed is None else seeded(config, args.seed)


def _out(args, config: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(config, out)
    return out


def _split(args, name: str):
    return read_dataset(Path(args.data) / name)


def _model(path):
    return load_state(path).model


def _fresh_metrics(path: Path) -> Path:
    path.write_text(METRICS_HEADER + "\n")
    return path


def cmd_generate(args, config):
    out = _out(args, config)
    domains = build_domains(config)
    for name in SPLITS:
        write_dataset(domains[name], out / name)
    print(f"wrote {', '.join(f'{len(domains[n])} {n}' for n in SPLITS)} to {out}")


def cmd_pretrain(args, config):
    out = _out(args, config)
    source = _split(args, "source_train")
    metrics = out / "metrics.csv"
    if args.checkpoint:
        state = load_state(args.checkpoint)
        if state.phase != "pretrain":
            raise ckpt.CheckpointError(f"{args.checkpoint} is not a pretraining checkpoint")
        if not metrics.exists():
            _fresh_metrics(metrics)
        state = resume(state, config, source, None, args.stop_at, metrics)
    else:
        n_target = len(read_dataset(Path(args.data) / "target_train")) if (Path(args.data) / "target_train").exists() else 1
        state = pretrain(config, source, args.stop_at, _fresh_metrics(metrics), n_target=n_target)
    path = save_state(state, out / CHECKPOINT_NAME)
    print(f"pretrain: iteration {state.iteration}, checkpoint {path}")


def cmd_adapt(args, config):
    out = _out(args, config)
    source, target = _split(args, "source_train"), _split(args, "target_train")
    state = load_state(args.checkpoint)
    metrics = out / "metrics.csv"
    if state.phase == "pretrain":
        state = adapt(config, state, source, target, args.stop_at, _fresh_metrics(metrics))
    else:
        if not metrics.exists():
            _fresh_metrics(metrics)
        state = resume(state, config, source, target, args.stop_at, metrics)
    path = save_state(state, out / CHECKPOINT_NAME)
    print(f"adapt: iteration {state.iteration}, checkpoint {path}")


def cmd_eval(args, config):
    out = _out(args, config)
    test = _split(args, "target_test")
    report, _ = evaluate(_model(args.checkpoint), test)
    if args.baseline:
        baseline, _ = evaluate(_model(args.baseline), test)
        report = report.with_baseline(baseline.mAP)
    write_eval_csv(report, out / "eval.csv")
    gain = "" if report.gain is None else f", gain {100 * report.gain:+.1f}"
    print(f"mAP@0.5 {100 * report.mAP:.1f}{gain}")


def cmd_adistance(args, config):
    out = _out(args, config)
    per_class, pooled = per_class_a_distance(
        _model(args.checkpoint), _split(args, "source_train"), _split(args, "target_test"), loss=args.probe
    )
    lines = ["class,d_a"] + [f"{k},{v!r}" for k, v in sorted(per_class.items())] + [f"pooled,{pooled!r}"]
    with open(out / "adistance.csv", "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    print(" ".join(f"{k}:{v:.3f}" for k, v in sorted(per_class.items())) + f" pooled:{pooled:.3f}")


def cmd_errors(args, config):
    out = _out(args, config)
    test = _split(args, "target_test")
    model = _model(args.checkpoint)
    _, detections = evaluate(model, test)
    profile = error_analysis(detections, [s.annotations for s in test], model.config.num_classes)
    write_errors_csv(profile, out / "errors.csv")
    print(f"correct {profile.correct:.1f}% misloc {profile.mislocalization:.1f}% "
          f"background {profile.background:.1f}%")


def cmd_attention(args, config):
    out = _out(args, config)
    model = _model(args.checkpoint)
    samples = _split(args, args.split)[: max(args.count, 0)]
    for s in samples:
        export_attention(model, s.image, out / f"attention_{s.id}.pgm")
    print(f"wrote {len(samples)} attention maps to {out}")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "adistance": cmd_adistance,
    "errors": cmd_errors,
    "attention": cmd_attention,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _config(args)
        COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"cffa: config error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ckpt.CheckpointError, TrainingError, OSError) as exc:
        print(f"cffa: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())
