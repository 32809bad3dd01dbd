"""Command line: ``moby {pretrain,eval,sweep,inspect-checkpoint}``.

Exit status is 0 on success, 2 for invalid configuration or input files,
3 when training aborts on a non-finite value.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .data import NormStats
from .evaluation import knn_probe, parameter_digest
from .experiment import (
    ExperimentConfig, backbone_from_checkpoint, evaluate, load_checkpoint, load_config,
    parse_sweep_values, prepare_data, run_pretrain, run_sweep,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _overrides(args):
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key, attr in (("seed", "seed"), ("output_dir", "out"), ("precision", "precision")):
        if getattr(args, attr, None) is not None:
            values[key] = getattr(args, attr)
    return values


def _config(args, base=None):
    overrides = _overrides(args)
    if args.config:
        return load_config(args.config, **overrides)
    if base is not None:
        text = base.to_text()
        return ExperimentConfig.from_text(text, **overrides)
    return ExperimentConfig.from_dict(overrides)


def _progress(trainer_steps):
    def log(m):
        step = m["step"] + 1
        if step % trainer_steps == 0 or step == 1:
            print(f"step {step:>6}  loss {m['loss']:.4f}  m {m['momentum']:.5f}  "
                  f"queue {m['queue_fill']}", flush=True)
    return log


def cmd_pretrain(args):
    base = load_checkpoint(args.resume).config if args.resume and not args.config else None
    config = _config(args, base)
    data = prepare_data(config)
    every = max(1, len(data[0]) // config.batch_size)
    trainer = run_pretrain(config, resume=args.resume, data=data, log=_progress(every))
    print(f"finished at step {trainer.step}; outputs in {config.output_dir}")
    if args.eval:
        report = evaluate(config, trainer.pair.online.backbone, data, trainer.stats)
        report.to_csv(Path(config.output_dir) / "eval.csv")
        print(report.summary())
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out or Path(args.checkpoint).parent)
    args.out = None  # keep the checkpoint's output_dir in the resolved config
    config = _config(args, ckpt.config)
    backbone = backbone_from_checkpoint(ckpt)
    train, test, _ = prepare_data(config)
    stats = NormStats(tuple(float(v) for v in ckpt.arrays["norm.mean"]),
                      tuple(float(v) for v in ckpt.arrays["norm.std"]))
    if args.knn_only:
        acc = knn_probe(backbone, train, test, stats, config.knn_k, config.knn_tau)
        print(f"  k-NN top1={acc * 100:.2f}%")
        return EXIT_OK
    report = evaluate(config, backbone, (train, test, stats), stats)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "eval.csv")
    print(report.summary())
    return EXIT_OK


def cmd_sweep(args):
    config = _config(args)
    axis, values = parse_sweep_values(args.axis, args.values)
    report = run_sweep(config, axis, values, out_dir=config.output_dir, linear=not args.knn_only)
    print(report.table())
    failures = [r.error for r in report.rows if r.error]
    if not failures:
        return EXIT_OK
    return EXIT_NUMERICAL if any(f.startswith("NumericalError") for f in failures) else EXIT_INVALID


def cmd_inspect(args):
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"  step {ckpt.step}, {len(ckpt.arrays)} entries")
    groups = {}
    for name, arr in ckpt.arrays.items():
        group = name.split(".", 1)[0]
        count, nbytes = groups.get(group, (0, 0))
        groups[group] = (count + arr.size, nbytes + arr.nbytes)
    for group, (count, nbytes) in groups.items():
        print(f"  {group:<10}{count:>12,d} values {nbytes / 1024:>10.1f} KiB")
    if args.entries:
        for name, arr in ckpt.arrays.items():
            print(f"    {name:<60}{str(arr.dtype):>9}  {tuple(arr.shape)}")
    try:
        digest = parameter_digest(backbone_from_checkpoint(ckpt))
        print(f"  online backbone sha256 {digest[:16]}")
    except ShapeError as exc:
        print(f"  online backbone unavailable: {exc}")
    print("config:")
    print("".join(f"  {line}\n" for line in ckpt.config.to_text().splitlines()), end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="moby", description="MoBY self-supervised pre-training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=out_help)
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("pretrain", help="pre-train online and target encoders")
    common(p, "output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval", action="store_true", help="probe the backbone after training")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="linear and k-NN probe of a checkpoint's online backbone")
    common(p, "where eval.csv goes (default: next to the checkpoint)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--knn-only", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one pre-train and probe per value of one hyper-parameter")
    common(p, "sweep directory (one subdirectory per cell)")
    p.add_argument("--axis", required=True, help="tau, queue_size (K), momentum_start (m0), "
                                                 "drop_path (online/target pairs) or norm_before_mlp")
    p.add_argument("--values", required=True, help="comma-separated, e.g. 0.07,0.1,0.2,0.3")
    p.add_argument("--knn-only", action="store_true", help="skip the linear probe")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint file")
    p.add_argument("checkpoint")
    p.add_argument("--entries", action="store_true", help="list every stored array")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        # overflow is reported by our own finiteness checks, naming the op
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
