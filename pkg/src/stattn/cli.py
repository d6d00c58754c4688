"""``stattn`` command line: data generation, training, evaluation and diagnostics.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 failed check.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .autodiff import NumericError, UsageError
from .config import coerce, parse_config_text
from .gradcheck import GradcheckConfig, gradcheck
from .localization import write_map_table
from .synthetic import SynthConfig, generate_dataset, read_split, read_video, write_dataset
from .train import TrainConfig, emit_heatmaps, evaluate, load_checkpoint, train
from .unimodality import is_log_concave, is_unimodal, logconcave_penalty, parse_sequence

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_fields(parser: argparse.ArgumentParser, cls) -> None:
    """One ``--field-name`` flag per dataclass field; values are coerced later."""
    for f in fields(cls):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())


def _build_config(cls, args: argparse.Namespace, config_file: str | None):
    """Defaults, then ``--config`` file, then explicit flags."""
    base = parse_config_text(Path(config_file).read_text(), cls) if config_file else cls()
    values = {f.name: getattr(base, f.name) for f in fields(cls)}
    for f in fields(cls):
        raw = getattr(args, f.name, None)
        if raw is not None:
            try:
                values[f.name] = coerce(raw, f.type)
            except ValueError as exc:
                raise UsageError(f"--{f.name.replace('_', '-')}: {exc}") from None
    return cls(**values)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stattn", description="Spatio-temporal attention video classifier")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic moving-sprite dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=70)
    g.add_argument("--test-per-class", type=int, default=20)
    g.add_argument("--config")
    _add_fields(g, SynthConfig)

    t = sub.add_parser("train", help="train on <data>/train, write metrics.csv and checkpoint.bin")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    _add_fields(t, TrainConfig)

    e = sub.add_parser("eval", help="accuracy and localization mAP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--dump", help="directory for attention CSVs, mask PGMs and detections")
    e.add_argument("--min-accuracy", type=float, help="exit 3 if accuracy falls below this")

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient on a toy model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--threshold", type=float, default=1e-3)
    _add_fields(c, GradcheckConfig)

    h = sub.add_parser("heatmap", help="mask images and a temporal importance strip for one video")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--video", required=True, help="a .stav file")
    h.add_argument("--out", required=True)
    h.add_argument("--cell", type=int, default=8)

    sub.add_parser("check-sequence", help="read reals from stdin, report log-concavity and unimodality")
    return p


def _gen_data(args) -> int:
    cfg = _build_config(SynthConfig, args, args.config)
    data = generate_dataset(cfg, args.per_class, test_per_class=args.test_per_class)
    write_dataset(args.out, cfg, data)
    print(f"wrote {len(data.train)} train / {len(data.test)} test videos to {args.out}")
    return EXIT_OK


def _train(args) -> int:
    cfg = _build_config(TrainConfig, args, args.config)
    videos = read_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.cfg").write_text(cfg.to_text())
    result = train(cfg, videos, out, log=print)
    print(f"checkpoint {out / 'checkpoint.bin'} after {result.checkpoint.step} steps")
    return EXIT_OK


def _eval(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    videos = read_split(args.data, args.split)
    report = evaluate(model, videos, args.dump)
    print("\n".join(report.lines()))
    if args.dump:
        write_map_table(Path(args.dump) / "spatial_map.csv", report.spatial)
        write_map_table(Path(args.dump) / "temporal_map.csv", report.temporal)
    if args.min_accuracy is not None and report.accuracy < args.min_accuracy:
        return EXIT_CHECK
    return EXIT_OK


def _gradcheck(args) -> int:
    cfg = _build_config(GradcheckConfig, args, None)
    report = gradcheck(cfg, args.seed, args.threshold)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_CHECK


def _heatmap(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    for path in emit_heatmaps(model, read_video(args.video), args.out, args.cell):
        print(path)
    return EXIT_OK


def _check_sequence(args) -> int:
    try:
        seq = parse_sequence(sys.stdin.read())
    except ValueError as exc:
        raise UsageError(f"not a list of reals: {exc}") from None
    lc = is_log_concave(seq)
    print(f"log_concave={str(lc).lower()} unimodal={str(is_unimodal(seq)).lower()} "
          f"penalty={logconcave_penalty(seq)!r}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _gen_data,
    "train": _train,
    "eval": _eval,
    "gradcheck": _gradcheck,
    "heatmap": _heatmap,
    "check-sequence": _check_sequence,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
