"""``fpcd`` command line: dataset generation, training, evaluation, analysis."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import analysis, data, train
from .losses import ConfigurationError
from .models import StagedBackbone
from .tensorio import TensorFormatError

log = logging.getLogger("fpcd")

TRAIN_MODES = {
    "train-teacher": "train-teacher",
    "train-baseline": "train-student-baseline",
    "distill": "distill-fpcd",
}


def _coerce(text):
    """``--set`` values: JSON when it parses (numbers, bools, lists), else a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = _coerce(value)
    return out


def load_config(path, overrides=()):
    values = {}
    if path:
        try:
            with open(path) as fh:
                values = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
    values.update(parse_overrides(overrides))
    return values


def _run_config(args, mode):
    values = load_config(args.config, args.set)
    values["seed"] = args.seed
    if mode == "distill-fpcd" and values.get("mode") == "distill-simple-kd":
        mode = "distill-simple-kd"
    values["mode"] = mode
    for key in ("data_dir", "out_dir", "teacher_dir"):
        if getattr(args, key, None):
            values[key] = getattr(args, key)
    cfg = train.RunConfig.from_dict(values)
    if not cfg.data_dir:
        raise ConfigurationError("no dataset given (--data-dir or data_dir in the config)")
    if not cfg.out_dir:
        raise ConfigurationError("no output directory given (--out-dir or out_dir in the config)")
    return cfg


def cmd_gen_data(args):
    values = load_config(args.config, args.set)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = data.DatasetConfig(**values)
    manifest = data.generate_dataset(cfg, args.out_dir)
    print(f"wrote {manifest}")


def cmd_train(args):
    cfg = _run_config(args, TRAIN_MODES[args.command])
    dataset = data.load_dataset(cfg.data_dir)
    result = train.run(cfg, dataset)
    print(f"final val top1 {result.final_val_top1:.4f}; outputs in {cfg.out_dir}")


def cmd_eval(args):
    model = StagedBackbone.load(_checkpoint_dir(args.checkpoint))
    dataset = data.load_dataset(args.data_dir, splits=(args.split,))
    if args.split not in dataset:
        raise ConfigurationError(f"split {args.split!r} is empty in {args.data_dir}")
    report = train.evaluate(model, *dataset[args.split])
    out = args.out or os.path.join(args.checkpoint, f"eval_{args.split}.csv")
    analysis.write_eval_csv(out, report)
    print(f"top1 {report['top1']:.4f} top5 {report['top5']:.4f}; wrote {out}")


def cmd_analyze_spectrum(args):
    model = StagedBackbone.load(_checkpoint_dir(args.checkpoint))
    paths = analysis.analyze_spectrum(model, args.clip, args.out_dir)
    print("wrote " + ", ".join(paths))


def cmd_analyze_params(args):
    teacher = StagedBackbone.load(_checkpoint_dir(args.teacher))
    student = StagedBackbone.load(_checkpoint_dir(args.student))
    baseline = StagedBackbone.load(_checkpoint_dir(args.baseline)) if args.baseline else None
    kls = analysis.analyze_params(teacher, student, args.out_dir, baseline, bins=args.bins, seed=args.seed)
    for name, value in kls.items():
        print(f"{name} {value:.6g}")


def _checkpoint_dir(path):
    """Accept either a run directory or its ``checkpoint`` subdirectory."""
    sub = os.path.join(path, "checkpoint")
    return sub if os.path.isdir(sub) else path


def build_parser():
    p = argparse.ArgumentParser(prog="fpcd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file with settings")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    g = sub.add_parser("gen-data", help="write a synthetic video dataset")
    with_config(g)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    for name in TRAIN_MODES:
        t = sub.add_parser(name, help=f"{name.replace('-', ' ')} run")
        with_config(t)
        t.add_argument("--seed", type=int, required=True)
        t.add_argument("--data-dir")
        t.add_argument("--out-dir")
        if name == "distill":
            t.add_argument("--teacher-dir", help="run directory of a trained teacher")
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--split", default="test", choices=data.SPLITS)
    e.add_argument("--out", help="CSV path (default: <checkpoint>/eval_<split>.csv)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze-spectrum", help="band energies and low/high reconstructions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True, help="FPCD tensor file of one clip [T, H, W, C]")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_analyze_spectrum)

    a = sub.add_parser("analyze-params", help="kernel spectral-energy distributions and their KL")
    a.add_argument("--teacher", required=True)
    a.add_argument("--student", required=True)
    a.add_argument("--baseline")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--bins", type=int, default=32)
    a.add_argument("--seed", type=int, default=0, help="teacher kernel sampling seed")
    a.set_defaults(func=cmd_analyze_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, TensorFormatError, OSError, KeyError, ValueError, train.TrainingAborted) as exc:
        print(f"fpcd {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
