"""Command-line surface: train, fit, gabor-train, prune, eval, report.

`train` runs any staged experiment from a config file; the other
subcommands are one-off operations on checkpoints.  Config files are the
source of truth and `--set section.key=value` overrides individual keys.
Output locations resolve, in order: `--out`, the GABORPRESS_OUTPUT_ROOT
environment variable, the current directory.

Exit codes: 0 success, 2 config/usage errors, 3 runtime failures
(shape, structure, integrity, divergence), 4 file-format and I/O errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_checkpoint
from .config import ExperimentConfig
from .engine.train import evaluate, train
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    IntegrityError,
    InvalidParameterError,
    StructureError,
    TrainingDivergedError,
)
from .pipeline import (
    _SCALE_MODES,
    _train_csv,
    aggregate_report,
    build_datasets,
    convert_layer_to_gabor,
    fit_residuals_csv,
    run_experiment,
)
from .pruning import PruneSpec, compact, prune_greedy

ENV_OUTPUT_ROOT = "GABORPRESS_OUTPUT_ROOT"

_RUNTIME_ERRORS = (
    DimensionError,
    StructureError,
    IntegrityError,
    TrainingDivergedError,
    InvalidParameterError,
)


def _load_config(args, require_stages: bool) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this subcommand requires --config")
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from None
    return ExperimentConfig.from_text(text, overrides=args.set, require_stages=require_stages)


def _output_root() -> Path:
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "."))


def _log(args):
    return None if args.quiet else print


def _out_dir_for(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args) -> int:
    config = _load_config(args, require_stages=True)
    out_dir = Path(args.out) if args.out else _output_root() / config.out
    only = [args.seed] if args.seed is not None else None
    run_experiment(config, out_dir, log=_log(args), only_seeds=only)
    return 0


def _cmd_fit(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_model(str(ckpt))
    out = _out_dir_for(args, ckpt.parent)
    results = convert_layer_to_gabor(
        model, args.layer, _SCALE_MODES[args.scale], workers=args.workers
    )
    save_checkpoint(model, str(out / f"{ckpt.stem}.fitted.ckpt"))
    (out / f"{ckpt.stem}.residuals.csv").write_text(fit_residuals_csv(results))
    if not args.quiet:
        dists = [r.l2_distance for row in results for r in row]
        print(f"fitted layer {args.layer}: {len(dists)} kernels, "
              f"mean residual {float(np.mean(dists)):.4f}")
        print(out / f"{ckpt.stem}.fitted.ckpt")
    return 0


def _cmd_gabor_train(args) -> int:
    config = _load_config(args, require_stages=False)
    ckpt = Path(args.checkpoint)
    model = load_model(str(ckpt))
    from .engine.layers import Conv2d

    if not any(model.conv(i).mode == Conv2d.GABOR for i in range(len(model.conv_indices()))):
        raise StructureError("gabor-train requires at least one Gabor-parameterized layer")
    train_set, test_set = build_datasets(config.data)
    rng = np.random.default_rng(args.seed if args.seed is not None else config.optim.seed)
    log = _log(args)
    history = train(model, train_set, config.optim, eval_set=test_set, rng=rng, log=log)
    out = _out_dir_for(args, ckpt.parent)
    save_checkpoint(model, str(out / f"{ckpt.stem}.gabor-trained.ckpt"), rng=rng)
    (out / f"{ckpt.stem}.gabor-train.csv").write_text(_train_csv(history))
    if not args.quiet:
        print(out / f"{ckpt.stem}.gabor-trained.ckpt")
    return 0


def _cmd_prune(args) -> int:
    config = _load_config(args, require_stages=False)
    ckpt = Path(args.checkpoint)
    model = load_model(str(ckpt))
    train_set, test_set = build_datasets(config.data)
    spec = PruneSpec(
        layer_index=args.layer,
        granularity=args.granularity,
        tolerance=args.tolerance,
        batch_size=config.data.eval_batch,
        stop_on_first_failure=args.mode == "stop",
    )
    _, report = prune_greedy(model, spec, test_set)
    model = compact(model)
    out = _out_dir_for(args, ckpt.parent)
    (out / f"{ckpt.stem}.prune.csv").write_text(report.to_csv())
    save_checkpoint(model, str(out / f"{ckpt.stem}.pruned.ckpt"))
    if not args.quiet:
        print(f"pruned {report.pruned}/{report.total} {report.granularity}s "
              f"(baseline {report.baseline_accuracy:.2f}%)")
        print(out / f"{ckpt.stem}.pruned.ckpt")
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args, require_stages=False)
    model = load_model(args.checkpoint)
    _, test_set = build_datasets(config.data)
    acc = evaluate(model, test_set, config.data.eval_batch)
    print(f"{100.0 * acc:.2f}")
    return 0


def _cmd_report(args) -> int:
    lines = ["label,metric,layer,granularity,mean,sd,n,total"]
    for run_dir in args.run_dirs:
        rows = aggregate_report(run_dir)
        lines += [
            f"{r['label']},{r['metric']},{r['layer']},{r['granularity']},"
            f"{r['mean']:.2f},{r['sd']:.2f},{r['n']},{r['total']}"
            for r in rows
        ]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        if not args.quiet:
            print(args.out)
    else:
        sys.stdout.write(text)
    return 0


def _add_common(p: argparse.ArgumentParser, config_flag: bool = True) -> None:
    if config_flag:
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
    p.add_argument("--out", help="output directory (default: config/checkpoint location)")
    p.add_argument("--seed", type=int, help="single seed override")
    q = p.add_mutually_exclusive_group()
    q.add_argument("--quiet", action="store_true", help="suppress progress logs")
    q.add_argument("--verbose", action="store_true", help="full progress logs (default)")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gaborpress",
        description="Train, fit, Gabor-retrain, and structurally prune small CNNs.",
    )
    sub = p.add_subparsers(dest="subcommand", required=True)

    t = sub.add_parser("train", help="run a staged experiment from a config file")
    _add_common(t)
    t.set_defaults(func=_cmd_train)

    f = sub.add_parser("fit", help="fit one layer's kernels to Gabor parameters")
    f.add_argument("checkpoint")
    f.add_argument("layer", type=int)
    f.add_argument("--scale", choices=sorted(_SCALE_MODES), default="unit")
    f.add_argument("--workers", type=int, default=1)
    _add_common(f, config_flag=False)
    f.set_defaults(func=_cmd_fit)

    g = sub.add_parser("gabor-train", help="train a checkpoint that has Gabor layers")
    g.add_argument("checkpoint")
    _add_common(g)
    g.set_defaults(func=_cmd_gabor_train)

    r = sub.add_parser("prune", help="L1-greedy prune one layer, then compact")
    r.add_argument("checkpoint")
    r.add_argument("--layer", type=int, required=True)
    r.add_argument("--granularity", choices=("kernel", "channel"), required=True)
    r.add_argument("--tolerance", type=float, default=0.2, help="allowed drop, percentage points")
    r.add_argument("--mode", choices=("stop", "continue"), default="stop")
    _add_common(r)
    r.set_defaults(func=_cmd_prune)

    e = sub.add_parser("eval", help="print test accuracy of a checkpoint, percent")
    e.add_argument("checkpoint")
    _add_common(e)
    e.set_defaults(func=_cmd_eval)

    rep = sub.add_parser("report", help="recompute and combine run-directory reports")
    rep.add_argument("run_dirs", nargs="+")
    _add_common(rep, config_flag=False)
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as e:
        print(f"error[runtime]: {e}", file=sys.stderr)
        return 3
    except FormatError as e:
        print(f"error[format]: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
