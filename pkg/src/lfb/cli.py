"""``lfb`` command-line entry point."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, gradcheck, runner
from .bank import BankFormatError, bank_from_stream
from .config import ConfigError, RunConfig, dumps, load as load_config
from .metrics import InterchangeError, load_records, per_class_ap
from .synthetic import write_dataset
from .tensor import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_FORMAT = 5
EXIT_GRADCHECK = 6
EXIT_MISSING_CHECKPOINT = 7
EXIT_DIVERGED = 8

EPILOG = """\
exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  invalid configuration (every violated key is listed)
  4  I/O error (missing input, unwritable output)
  5  malformed file (.lfbk bank, .lfbp checkpoint, detection/GT text, stream .npz)
  6  gradient check failed
  7  required checkpoint missing (eval --checkpoint, train --stage1)
  8  training produced non-finite values
"""


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfb", description="Long-term feature bank: data, training and evaluation.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="run configuration (.ini); defaults apply without it")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", type=Path, required=True, help=out_help)

    def model_flags(p):
        p.add_argument("--window", help="half-window w; a comma list runs one setting per value")
        p.add_argument("--causal", choices=("on", "off", "both"),
                       help="causal windows (on), centred windows (off) or one run of each (both)")
        p.add_argument("--fbo", choices=("nl", "avg", "max", "none", "sto"), help="feature bank operator")
        p.add_argument("--layers", type=int, choices=(1, 2, 3), help="NL blocks in the stack")
        p.add_argument("--act", choices=("pre", "post"), help="activation order in each NL block")
        p.add_argument("--data", type=Path, help="dataset directory from gen-synthetic "
                                                 "(default: generate in memory from the seed)")

    p = sub.add_parser("gen-synthetic", help="write the synthetic long-range task",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, "dataset directory")

    p = sub.add_parser("build-bank", help="sample a .lfbk bank from a feature stream (.npz)",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--input", type=Path, required=True,
                   help=".npz with frame_times, frame_index, features (R x d) and duration")
    p.add_argument("--steps-per-second", type=float, default=1.0)
    p.add_argument("--out", type=Path, required=True, help="output .lfbk path")

    p = sub.add_parser("train", help="train one model or a sweep",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, "run directory")
    model_flags(p)
    p.add_argument("--two-stage", action="store_true", help="freeze-then-add-FBO training")
    p.add_argument("--stage1", type=Path, help="existing stage-1 checkpoint (implies --two-stage)")

    p = sub.add_parser("eval", help="evaluate a checkpoint, or score detections against GT",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, "report directory")
    model_flags(p)
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (.lfbp)")
    p.add_argument("--detections", type=Path, help="detection interchange file (frame mAP mode)")
    p.add_argument("--gt", type=Path, help="ground-truth interchange file (frame mAP mode)")
    p.add_argument("--iou", type=float, default=0.5)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", type=Path, help="also write the table here")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    run, model, fbo = {}, {}, {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "two_stage", False) or getattr(args, "stage1", None):
        run["stage"] = "two-stage"
    if getattr(args, "fbo", None):
        model["kind"] = args.fbo
    if getattr(args, "causal", None) in ("on", "off"):
        model["mode"] = "causal" if args.causal == "on" else "batch"
    if getattr(args, "layers", None):
        fbo["layers"] = args.layers
    if getattr(args, "act", None):
        fbo["activation_order"] = args.act
    cfg = cfg.with_overrides(run=run, model=model, fbo=fbo)
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def _settings(args, cfg: RunConfig) -> tuple[list[int], tuple[str, ...]]:
    windows = [cfg.model.window]
    if args.window:
        try:
            windows = [int(v) for v in args.window.split(",") if v.strip()]
        except ValueError:
            raise ConfigError([f"--window: expected comma-separated integers, got {args.window!r}"]) from None
        if not windows or any(w < 0 for w in windows):
            raise ConfigError(["--window: values must be non-negative integers"])
    modes = ("batch", "causal") if args.causal == "both" else (cfg.model.mode,)
    return windows, modes


def cmd_gen_synthetic(args) -> int:
    cfg = _config(args)
    ds = runner.load_data(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.ini").write_text(dumps(cfg))
    written = write_dataset(ds, args.out) + [args.out / "config.ini"]
    runner.write_manifest(args.out / "manifest.json", "gen-synthetic", cfg, written)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test episodes to {args.out}")
    return EXIT_OK


def cmd_build_bank(args) -> int:
    if args.steps_per_second <= 0:
        raise ConfigError(["--steps-per-second: must be > 0"])
    try:
        with np.load(args.input) as data:
            stream = {k: data[k] for k in ("frame_times", "frame_index", "features", "duration")}
    except KeyError as exc:
        raise BankFormatError(f"{args.input}: missing array {exc}") from None
    except ValueError as exc:
        raise BankFormatError(f"{args.input}: not a readable .npz ({exc})") from None
    bank = bank_from_stream(stream["frame_times"], stream["frame_index"], stream["features"],
                            float(stream["duration"]), args.steps_per_second)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(args.out)
    runner.write_manifest(args.out.with_name(args.out.stem + ".manifest.json"), "build-bank", None,
                          [args.out])
    print(f"wrote bank T={bank.T} d={bank.d} rows={int(bank.counts().sum())} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    windows, modes = _settings(args, cfg)
    ds = runner.load_data(cfg, args.data)
    if len(windows) == 1 and len(modes) == 1:
        cfg = cfg.with_overrides(model={"window": windows[0], "mode": modes[0]})
        if cfg.run.stage == "two-stage":
            res = runner.two_stage_train(cfg, ds, args.out, stage1_checkpoint=args.stage1)
        else:
            res = runner.train_run(cfg, ds, args.out)
        print(runner.format_row({"kind": cfg.model.kind, "mode": modes[0], "window": windows[0],
                                 **res.metrics}))
        return EXIT_OK
    if args.stage1:
        raise ConfigError(["--stage1 applies to a single setting, not a sweep"])
    rows = runner.window_sweep(cfg, windows, modes, ds, args.out, progress=print)
    keys = [k for k in rows[0] if k not in ("kind", "mode", "window")]
    lines = ["kind\tmode\twindow\t" + "\t".join(keys) + "\n"]
    lines += [f"{r['kind']}\t{r['mode']}\t{r['window']}\t" + "\t".join(f"{r[k]:.6f}" for k in keys) + "\n"
              for r in rows]
    (args.out / "sweep.tsv").write_text("".join(lines))
    runner.write_manifest(args.out / "manifest.json", "train", cfg, [args.out / "sweep.tsv"])
    return EXIT_OK


def cmd_eval(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    report = args.out / "eval.log"
    if args.detections or args.gt:
        if not (args.detections and args.gt):
            raise ConfigError(["frame mAP needs both --detections and --gt"])
        records = load_records(args.detections, args.gt)
        classes = sorted({c for r in records for g in r.ground_truth for c in g.labels}
                         | {c for r in records for d in r.detections for c in d.scores})
        aps = per_class_ap(records, classes, args.iou)
        lines = [f"0 eval ap_class_{c} {ap:.6f}\n" for c, ap in aps.items()]
        lines.append(f"0 eval mAP {float(np.mean(list(aps.values()))) if aps else 0.0:.6f}\n")
        report.write_text("".join(lines))
        runner.write_manifest(args.out / "manifest.json", "eval", None, [report], seed=args.seed)
        sys.stdout.write("".join(lines))
        return EXIT_OK

    if args.checkpoint is None:
        raise ConfigError(["eval needs --checkpoint (or --detections and --gt)"])
    if not args.checkpoint.is_file():
        raise runner.MissingCheckpointError(f"checkpoint {args.checkpoint} not found")
    cfg = _config(args)
    windows, modes = _settings(args, cfg)
    if len(windows) != 1 or len(modes) != 1:
        raise ConfigError(["eval takes a single --window and --causal on|off"])
    cfg = cfg.with_overrides(model={"window": windows[0], "mode": modes[0]})
    ds = runner.load_data(cfg, args.data)
    model = runner.build_model(cfg, ds)
    try:
        model.load_state_dict(checkpoint.load(args.checkpoint))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, BankFormatError):
            raise
        raise ConfigError([f"checkpoint {args.checkpoint} does not fit the configured model: {exc}"]) from None
    _, test_split = runner.splits(cfg, ds)
    metrics = runner.evaluate(model, test_split, dtype=runner._dtype(cfg))
    log = runner.MetricsLog()
    for name, value in metrics.items():
        log.add(0, "test", name, value)
    log.write(report)
    runner.write_manifest(args.out / "manifest.json", "eval", cfg, [report])
    sys.stdout.write(log.text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(seeds=args.seeds, base_seed=args.seed)
    table = report.table()
    print(table)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table + "\n")
    return EXIT_OK if report.ok else EXIT_GRADCHECK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-bank": cmd_build_bank,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"lfb: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except runner.MissingCheckpointError as exc:
        print(f"lfb: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except (BankFormatError, InterchangeError) as exc:
        print(f"lfb: malformed file: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NonFiniteError as exc:
        print(f"lfb: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"lfb: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
