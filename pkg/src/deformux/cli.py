"""deformux command-line entry point.

Exit codes: 0 success, 1 numeric or assertion failure, 2 usage or input error.
Every command that writes files puts them under a single ``--out`` directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, deform


class UsageError(Exception):
    """Bad input: missing files, unknown names, malformed configs (exit 2)."""


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_common(p, seed=True, out=True, threads=True):
    if seed:
        p.add_argument("--seed", type=int, default=1, help="random seed")
    if out:
        p.add_argument("--out", type=Path, default=None, help="run directory for all outputs")
    if threads:
        p.add_argument("--threads", type=int, default=None,
                       help="kernel threads; None means DEFORMUX_THREADS or the core count")


def build_parser() -> argparse.ArgumentParser:
    from .ablate import AXES
    from .gradcheck import CLI_MODULES

    parser = argparse.ArgumentParser(prog="deformux", description=__doc__, formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"deformux {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites", formatter_class=_Formatter)
    p.add_argument("--module", required=True, choices=CLI_MODULES, help="suite to run")
    p.add_argument("--trials", type=int, default=20, help="random instances")
    p.add_argument("--precision", choices=("double", "single"), default="double",
                   help="dtype of the analytic path; bar is 1e-4 (double) or 1e-2 (single)")
    _add_common(p, out=False)

    p = sub.add_parser("bench", help="naive vs optimized kernel timings and accounting",
                       formatter_class=_Formatter)
    p.add_argument("--config", default="desk", help="preset name or JSON config file")
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions (best is reported)")
    p.add_argument("--size", type=int, default=32, help="cubic workload extent")
    p.add_argument("--channels", type=int, default=16, help="workload channels")
    p.add_argument("--no-naive", action="store_true", help="skip timing the naive path")
    _add_common(p)

    p = sub.add_parser("generate", help="write a synthetic dataset and its manifest", formatter_class=_Formatter)
    p.add_argument("--kind", choices=("spheres", "tubes", "mixed"), default="spheres", help="generator")
    p.add_argument("--count", type=int, default=40, help="number of volumes (split 80/10/10)")
    p.add_argument("--size", type=int, default=32, help="cubic volume extent")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=1, help="random seed")

    for name, text in (("train", "train a model"), ("eval", "evaluate a checkpoint or saved predictions"),
                       ("infer", "write predicted label volumes")):
        p = sub.add_parser(name, help=text, formatter_class=_Formatter)
        p.add_argument("--config", default="desk-spheres", help="preset name or JSON config file")
        p.add_argument("--data", type=Path, required=True, help="dataset manifest (JSON list of {path, split})")
        _add_common(p)
        if name == "train":
            p.add_argument("--steps", type=int, default=None, help="override train.steps")
        else:
            p.add_argument("--checkpoint", type=Path, default=None, help="checkpoint file")
            p.add_argument("--split", choices=("train", "val", "test"), default="test", help="dataset split")
        if name == "eval":
            p.add_argument("--predictions", type=Path, default=None,
                           help="prediction manifest written by infer (used instead of a checkpoint)")

    p = sub.add_parser("ablate", help="train every variant along one design axis", formatter_class=_Formatter)
    p.add_argument("--axis", required=True, choices=sorted(AXES), help="ablation axis")
    p.add_argument("--config", default="desk-spheres", help="preset name or JSON config file")
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------
# commands


def _emit(out, name, payload, text):
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    res = run_suite(args.module, args.trials, args.seed, args.precision)
    print(f"gradcheck {args.module}")
    print(res.table())
    print("PASS" if res.passed else "FAIL")
    return 0 if res.passed else 1


def cmd_bench(args) -> int:
    from . import bench

    cfg = config.network_config(config.resolve(args.config))
    threads = args.threads or deform.default_threads()
    try:
        report = bench.run(cfg, threads, args.repeat, args.size, args.channels, args.seed, naive=not args.no_naive)
    except bench.AgreementError as e:
        print(f"bench: {e}", file=sys.stderr)
        for k, v in e.diffs.items():
            print(f"  {k:<14}{v:.3e}", file=sys.stderr)
        return 1
    if args.out is not None:
        config.write_manifest(args.out, config.resolve(args.config), "bench", args.seed)
    _emit(args.out, "bench.json", report, bench.format_report(report))
    return 0 if report["threads_bit_identical"] else 1


def cmd_generate(args) -> int:
    from .data import SynthSpec, generate_dataset

    f = args.size / 32.0  # default radii and counts are tuned for 32^3
    base = SynthSpec()
    spec = SynthSpec(kind=args.kind, shape=(args.size,) * 3, seed=args.seed,
                     radius=(base.radius[0] * f, base.radius[1] * f),
                     count=(1, max(1, min(base.count[1], round(base.count[1] * f)))))
    manifest = generate_dataset(args.out, spec, args.count)
    print(f"wrote {args.count} volumes and {manifest}")
    return 0


def _dataset(args, workers=2):
    from .data import VolumeFormatError
    from .train import Dataset

    if not args.data.exists():
        raise UsageError(f"dataset manifest not found: {args.data}")
    try:
        return Dataset.from_manifest(args.data, workers)
    except (FileNotFoundError, VolumeFormatError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot load dataset: {e}") from None


def _resolve(args, **over):
    try:
        return config.resolve(args.config, **over)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise UsageError(f"bad config: {e}") from None


def _log(rec):
    if rec["event"] == "val":
        print(f"step {rec['step']:>6}  val dice {rec.get('dice', float('nan')):.4f}  lr {rec['lr']:.3g}", flush=True)
    elif rec["event"] == "test":
        print(f"test dice {rec['dice']:.4f}", flush=True)
    elif rec["event"] == "step" and rec["step"] % 50 == 0:
        print(f"step {rec['step']:>6}  loss {rec['loss']:.4f}", flush=True)


def cmd_train(args) -> int:
    from .network import build_network
    from .train import TrainingDiverged, train

    over = {"train": {"seed": args.seed}}
    if args.steps is not None:
        over["train"]["steps"] = args.steps
    cfg = _resolve(args, **over)
    out = args.out or Path("runs") / f"train-{config.config_hash(cfg)[:12]}"
    data = _dataset(args, config.train_config(cfg).workers)
    config.write_manifest(out, cfg, "train", args.seed)
    model = build_network(config.network_config(cfg), seed=args.seed)
    try:
        report = train(model, data, config.train_config(cfg), out, log=_log)
    except TrainingDiverged as e:
        print(f"train: {e}", file=sys.stderr)
        return 1
    if report["test"] is not None:
        print(f"final test mean dice {report['test']['mean']:.4f}  ({report['wall_clock_s']:.1f} s)")
    return 0


def _checkpoint(args):
    from .checkpoint import CheckpointError, load_checkpoint

    path = args.checkpoint or (args.out / "final.bin" if args.out else None)
    if path is None or not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)[0]
    except CheckpointError as e:
        raise UsageError(str(e)) from None


def cmd_eval(args) -> int:
    from .data import load_volume, read_manifest
    from .train import dice_table, evaluate

    cfg = _resolve(args)
    data = _dataset(args)
    samples = data[args.split]
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    if args.predictions is not None:
        if not args.predictions.exists():
            raise UsageError(f"prediction manifest not found: {args.predictions}")
        preds = [load_volume(p).labels for p in read_manifest(args.predictions)[args.split]]
        if len(preds) != len(samples):
            raise UsageError(f"{len(preds)} predictions for {len(samples)} {args.split} samples")
        table = dice_table(preds, [s.labels for s in samples], samples[0].classes)
    else:
        model = _checkpoint(args)
        tcfg = config.train_config(cfg)
        table = evaluate(model, samples, tcfg.patch, tcfg.overlap)
    text = "\n".join([f"class {c}: dice {v:.4f}" for c, v in table["per_class"].items()]
                     + [f"mean foreground dice {table['mean']:.4f} over {table['cases']} cases"])
    if args.out is not None:
        config.write_manifest(args.out, cfg, "eval", args.seed)
    _emit(args.out, "eval.json", table, text)
    return 0


def cmd_infer(args) -> int:
    from .data import SegmentationSample, read_manifest, save_volume
    from .train import predict

    cfg = _resolve(args)
    if args.out is None:
        raise UsageError("infer needs --out")
    model = _checkpoint(args)
    data = _dataset(args)
    tcfg = config.train_config(cfg)
    sources = read_manifest(args.data)[args.split]
    pred_dir = args.out / "predictions"
    entries = []
    for src, s in zip(sources, data[args.split]):
        labels = predict(model, s.image, tcfg.patch, tcfg.overlap)
        pred = SegmentationSample(s.image, labels, model.cfg.num_classes, {"source": str(src), "kind": "prediction"})
        path = save_volume(pred, pred_dir / src.name)
        entries.append({"path": path.name, "split": args.split})
    (pred_dir / "manifest.json").write_text(json.dumps(entries, indent=1) + "\n")
    config.write_manifest(args.out, cfg, "infer", args.seed)
    print(f"wrote {len(entries)} predictions to {pred_dir}")
    return 0


def cmd_ablate(args) -> int:
    from . import ablate
    from .train import TrainingDiverged

    over = {"train": {"seed": args.seed}}
    if args.steps is not None:
        over["train"]["steps"] = args.steps
    cfg = _resolve(args, **over)
    data = _dataset(args)
    out = args.out or Path("runs") / f"ablate-{args.axis}-{config.config_hash(cfg)[:12]}"
    config.write_manifest(out, cfg, f"ablate --axis {args.axis}", args.seed)
    try:
        table = ablate.run(args.axis, config.network_config(cfg), config.train_config(cfg), data, out,
                           model_seed=args.seed)
    except TrainingDiverged as e:
        print(f"ablate: {e}", file=sys.stderr)
        return 1
    print(ablate.format_table(table))
    return 0


COMMANDS = {"gradcheck": cmd_gradcheck, "bench": cmd_bench, "generate": cmd_generate, "train": cmd_train,
            "eval": cmd_eval, "infer": cmd_infer, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        deform.set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"deformux {args.command}: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"deformux {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
