"""Model transforms and staged, resumable experiment runs.

A run executes a stage list per seed under its own output directory:

    <out>/config.resolved
    <out>/seed000/stage00-pretrain.ckpt        model + rng after the stage
    <out>/seed000/stage00-pretrain.train.csv   per-epoch metrics
    <out>/seed000/records.csv                  per-stage test accuracy
    <out>/report.csv                           across-seed aggregate

Every stage ends in a checkpoint carrying the generator state, so an
interrupted run resumed from disk replays the remaining stages with the
exact arithmetic of an uninterrupted one.  A run can also chain from the
final checkpoint of a previous run ("init_run"), which is how fit /
prune / retrain variants of one pretrained model are expressed.

Timing appears in log lines only; every file an experiment writes is a
pure function of config and seed, so reruns are byte-comparable.
"""

from __future__ import annotations

import copy
import dataclasses
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_model, restore_rng, save_checkpoint
from .config import DataSpec, ExperimentConfig, StageSpec
from .data import Dataset, load_cifar10, synth_textures
from .engine.layers import BatchNorm2d, Conv2d, Dense, GlobalAvgPool, MaxPool2d, ReLU, ResidualBlock
from .engine.model import Model
from .engine.train import evaluate, train
from .errors import ConfigError, IntegrityError, StructureError
from .fitting import PER_KERNEL_MAX_ABS, UNIT, default_grid, fit_layer, params_grid
from .models import build_model, init_model
from .pruning import CHANNEL, KERNEL, PruneSpec, compact, prune_greedy

_SCALE_MODES = {"unit": UNIT, "max-abs": PER_KERNEL_MAX_ABS}


# ---------------------------------------------------------------- transforms

def receptive_field(layers) -> int:
    """Receptive field, in input pixels, of one unit after `layers`.

    Walks convolutions and pooling in order, accumulating kernel extents
    scaled by the running stride product.  Stops at global pooling or a
    dense layer, where spatial locality ends.
    """
    r, jump = 1, 1
    for layer in layers:
        if isinstance(layer, Conv2d):
            r += (layer.k - 1) * jump
            jump *= layer.stride
        elif isinstance(layer, MaxPool2d):
            r += (layer.size - 1) * jump
            jump *= layer.stride
        elif isinstance(layer, ResidualBlock):
            r += 2 * jump
            jump *= layer.stride
            r += 2 * jump
        elif isinstance(layer, (GlobalAvgPool, Dense)):
            break
    return r


def expand_first_layer(model: Model, new_k: int, rng: np.random.Generator, embed: bool = False) -> Model:
    """Replace the first convolution with a new_k x new_k one, same-padded.

    The new layer is He-initialized; with embed=True the old kernels are
    centered inside zero kernels instead, preserving the layer's function.
    Parity of new_k must match the old kernel so padding can keep the
    spatial output size (anything after a flatten depends on it).
    """
    idxs = model.conv_indices()
    if not idxs:
        raise StructureError("model has no plain convolution layer to expand")
    pos = idxs[0]
    old = model.layers[pos]
    if int(new_k) != new_k or new_k < 1:
        raise StructureError(f"kernel size must be a positive integer, got {new_k!r}")
    new_k = int(new_k)
    if (new_k - old.k) % 2 != 0:
        raise StructureError(
            f"cannot keep the output size going from {old.k}x{old.k} to {new_k}x{new_k}: parity differs"
        )
    new_pad = old.pad + (new_k - old.k) // 2
    if new_pad < 0:
        raise StructureError(f"shrinking to {new_k}x{new_k} would need negative padding {new_pad}")
    new = Conv2d(
        old.n_in, old.n_out, new_k,
        stride=old.stride, pad=new_pad, bias=old.bias is not None, dtype=old.dtype,
    )
    new.init_he(rng)
    if embed:
        if old.mode != Conv2d.STANDARD:
            raise StructureError("embed expansion requires a standard-weight layer")
        if new_k < old.k:
            raise StructureError("embed expansion cannot shrink the kernel")
        off = (new_k - old.k) // 2
        new.weight.data[...] = 0.0
        new.weight.data[:, :, off:off + old.k, off:off + old.k] = old.weight.data
        if old.bias is not None:
            new.bias.data[...] = old.bias.data
    model.layers[pos] = new
    model.check_shapes()
    return model


def alter_resnet_head(model: Model, k1: int, k2: int, rng: np.random.Generator) -> Model:
    """Swap the residual stem (conv3-bn-relu + two identity blocks) for two
    plain convolutions of sizes k1 and k2 with batch norm, shortcut-free.

    Sizes must be odd so same-padding preserves the feature map.  The
    replacement keeps the receptive field when k1 + k2 = 12 (five 3x3
    convolutions reach 11 pixels, as do e.g. 7x7 then 5x5).
    """
    L = model.layers
    ok = (
        len(L) >= 5
        and isinstance(L[0], Conv2d) and L[0].stride == 1 and L[0].mode == Conv2d.STANDARD
        and isinstance(L[1], BatchNorm2d) and isinstance(L[2], ReLU)
        and isinstance(L[3], ResidualBlock) and not L[3].projecting
        and isinstance(L[4], ResidualBlock) and not L[4].projecting
    )
    if not ok:
        raise StructureError("expected a stem of conv-bn-relu followed by two identity residual blocks")
    for k in (k1, k2):
        if int(k) != k or k < 1 or k % 2 == 0:
            raise StructureError(f"head kernel sizes must be odd positive integers, got {k!r}")
    width = L[0].n_out
    conv_a = Conv2d(L[0].n_in, width, int(k1), pad=(int(k1) - 1) // 2, bias=False, dtype=L[0].dtype)
    conv_b = Conv2d(width, width, int(k2), pad=(int(k2) - 1) // 2, bias=False, dtype=L[0].dtype)
    conv_a.init_he(rng)
    conv_b.init_he(rng)
    model.layers = [
        conv_a, BatchNorm2d(width, dtype=L[0].dtype), ReLU(),
        conv_b, BatchNorm2d(width, dtype=L[0].dtype), ReLU(),
    ] + L[5:]
    model.check_shapes()
    return model


def convert_layer_to_gabor(model: Model, conv_index: int, scale_mode: str = UNIT, workers: int = 1) -> list:
    """Fit every kernel of one convolution and switch it to Gabor mode.

    Returns the per-kernel fit results (nested [out][in] lists) so callers
    can report residuals.  Fitting a layer already in Gabor mode refits
    its synthesized kernels.
    """
    conv = model.conv(conv_index)
    weights = conv.synthesize() if conv.mode == Conv2d.GABOR else conv.weight.data
    grid = default_grid(conv.k, scale_mode)
    results = fit_layer(np.asarray(weights, dtype=np.float64), grid, workers=workers)
    conv.to_gabor(params_grid(results))
    return results


def fit_residuals_csv(results: list) -> str:
    lines = ["out_channel,in_channel,l2_distance,candidate_index"]
    for o, row in enumerate(results):
        for i, r in enumerate(row):
            lines.append(f"{o},{i},{r.l2_distance!r},{r.candidate_index}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ datasets

def build_datasets(data: DataSpec) -> tuple[Dataset, Dataset]:
    """Train/test pair for a data spec.

    Textures draw the test split from seed+1 so the two sets are disjoint
    samples of the same distribution.
    """
    if data.kind == "cifar10":
        if data.classes != 10:
            raise ConfigError(f"cifar10 has 10 classes, config says {data.classes}")
        return load_cifar10(data.directory)
    common = dict(num_classes=data.classes, image_size=data.image_size, noise=data.noise)
    train_set = synth_textures(data.seed, data.train_per_class, split="train", **common)
    test_set = synth_textures(data.seed + 1, data.test_per_class, split="test", **common)
    return train_set, test_set


# ------------------------------------------------------------ staged running

def stage_stem(index: int, spec: StageSpec) -> str:
    return f"stage{index:02d}-{spec.name}"


def stage_outputs(seed_dir: Path, index: int, spec: StageSpec) -> list[Path]:
    """Every file the stage must produce; the stage counts as complete
    only when all of them exist."""
    stem = stage_stem(index, spec)
    out = [seed_dir / f"{stem}.ckpt"]
    if spec.name in ("pretrain", "retrain", "gabor-learn"):
        out.append(seed_dir / f"{stem}.train.csv")
    elif spec.name == "fit":
        out.append(seed_dir / f"{stem}.residuals.csv")
    elif spec.name == "prune":
        out.append(seed_dir / f"{stem}.prune.csv")
    elif spec.name == "prune-report":
        out.append(seed_dir / f"{stem}.summary.csv")
        for layer in spec.int_list_arg("layers"):
            for gran in (KERNEL, CHANNEL):
                out.append(seed_dir / f"{stem}.layer{layer}.{gran}.csv")
    return out


def _train_config(base, spec: StageSpec):
    """Stage-level optimizer overrides (lr, epochs, ...) applied to [optim]."""
    changes = {}
    for key in ("lr", "weight_decay", "amplitude_decay", "momentum"):
        if spec.arg(key) is not None:
            changes[key] = spec.float_arg(key, None)
    for key in ("epochs", "batch_size"):
        if spec.arg(key) is not None:
            changes[key] = spec.int_arg(key)
    return dataclasses.replace(base, **changes) if changes else base


def _train_csv(history: list) -> str:
    lines = ["epoch,lr,train_loss,eval_acc"]
    for h in history:
        acc = repr(h["eval_acc"]) if "eval_acc" in h else ""
        lines.append(f"{h['epoch']},{h['lr']!r},{h['train_loss']!r},{acc}")
    return "\n".join(lines) + "\n"


def _gabor_layers(model: Model) -> list[int]:
    return [i for i in range(len(model.conv_indices())) if model.conv(i).mode == Conv2d.GABOR]


def _execute_stage(
    model: Model,
    rng: np.random.Generator,
    spec: StageSpec,
    config: ExperimentConfig,
    train_set: Dataset,
    test_set: Dataset,
    seed_dir: Path,
    stem: str,
    log,
) -> Model:
    name = spec.name
    if name in ("pretrain", "retrain", "gabor-learn"):
        if name == "retrain":
            for i in _gabor_layers(model):
                model.conv(i).to_standard()
        if name == "gabor-learn" and not _gabor_layers(model):
            raise StructureError("gabor-learn requires at least one Gabor-parameterized layer")
        opt = _train_config(config.optim, spec)
        history = train(model, train_set, opt, eval_set=test_set, rng=rng,
                        log=(lambda msg: log(f"{stem}: {msg}")) if log else None)
        (seed_dir / f"{stem}.train.csv").write_text(_train_csv(history))

    elif name == "expand-first-layer":
        expand_first_layer(model, spec.int_arg("k"), rng,
                           embed=str(spec.arg("embed", "false")).lower() in ("1", "true", "yes"))

    elif name == "alter-head":
        alter_resnet_head(model, spec.int_arg("k1"), spec.int_arg("k2"), rng)

    elif name == "fit":
        scale = spec.arg("scale", "unit")
        if scale not in _SCALE_MODES:
            raise ConfigError(f"fit scale must be one of {sorted(_SCALE_MODES)}, got {scale!r}")
        results = convert_layer_to_gabor(
            model, spec.int_arg("layer"), _SCALE_MODES[scale], workers=spec.int_arg("workers", 1)
        )
        (seed_dir / f"{stem}.residuals.csv").write_text(fit_residuals_csv(results))
        dists = np.array([r.l2_distance for row in results for r in row])
        if log:
            log(f"{stem}: fitted {dists.size} kernels, residual mean={dists.mean():.4f} max={dists.max():.4f}")

    elif name == "to-standard":
        for layer in spec.int_list_arg("layers"):
            conv = model.conv(layer)
            if conv.mode != Conv2d.GABOR:
                raise StructureError(f"to-standard: layer {layer} is not Gabor-parameterized")
            conv.to_standard()

    elif name == "prune":
        pspec = PruneSpec(
            layer_index=spec.int_arg("layer"),
            granularity=spec.arg("granularity"),
            tolerance=spec.float_arg("tolerance", 0.2),
            batch_size=config.data.eval_batch,
            stop_on_first_failure=spec.arg("mode", "stop") == "stop",
        )
        _, report = prune_greedy(model, pspec, test_set)
        (seed_dir / f"{stem}.prune.csv").write_text(report.to_csv())
        if log:
            log(f"{stem}: pruned {report.pruned}/{report.total} {report.granularity}s "
                f"(baseline {report.baseline_accuracy:.2f}%)")

    elif name == "compact":
        model = compact(model)

    elif name == "prune-report":
        tol = spec.float_arg("tolerance", 0.2)
        stop = spec.arg("mode", "stop") == "stop"
        summary = ["layer,granularity,baseline_accuracy,final_accuracy,pruned,total"]
        for layer in spec.int_list_arg("layers"):
            for gran in (KERNEL, CHANNEL):
                probe = copy.deepcopy(model)
                pspec = PruneSpec(layer, gran, tol, config.data.eval_batch, stop)
                _, report = prune_greedy(probe, pspec, test_set)
                (seed_dir / f"{stem}.layer{layer}.{gran}.csv").write_text(report.to_csv())
                final = report.steps[-1].accuracy if report.steps else report.baseline_accuracy
                summary.append(
                    f"{layer},{gran},{report.baseline_accuracy!r},{final!r},{report.pruned},{report.total}"
                )
                if log:
                    log(f"{stem}: layer={layer} {gran}s prunable {report.pruned}/{report.total}")
        (seed_dir / f"{stem}.summary.csv").write_text("\n".join(summary) + "\n")

    else:  # pragma: no cover - config validation rejects unknown stages
        raise ConfigError(f"unknown stage {name!r}")
    return model


def _initial_model(config: ExperimentConfig, seed: int, out_dir: Path, rng: np.random.Generator) -> Model:
    if config.init_run:
        parent = Path(config.init_run)
        if not parent.is_absolute():
            parent = out_dir.parent / parent
        seed_dir = parent / f"seed{seed:03d}"
        ckpts = sorted(seed_dir.glob("stage??-*.ckpt"))
        if not ckpts:
            raise ConfigError(f"init_run {config.init_run!r} has no checkpoints under {seed_dir}")
        return load_model(str(ckpts[-1]))
    model = build_model(config.family, config.classes, **config.model_args)
    return init_model(model, rng)


def run_seed(
    config: ExperimentConfig,
    seed: int,
    out_dir: Path,
    train_set: Dataset,
    test_set: Dataset,
    log=None,
) -> list[dict]:
    """All stages for one seed; resumes from existing stage checkpoints.

    Chained runs (init_run) start from the parent's final checkpoint but a
    fresh generator seeded with this run's seed, so sibling legs diverge
    only by their own stages.
    """
    seed_dir = out_dir / f"seed{seed:03d}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = _initial_model(config, seed, out_dir, rng)
    slog = (lambda msg: log(f"seed{seed:03d} {msg}")) if log else None

    records = []
    for index, spec in enumerate(config.stages):
        stem = stage_stem(index, spec)
        outputs = stage_outputs(seed_dir, index, spec)
        if all(p.exists() for p in outputs):
            ck = load_checkpoint(str(outputs[0]))
            model = ck.model
            if ck.rng_state is not None:
                rng = restore_rng(ck.rng_state)
            if slog:
                slog(f"{stem}: complete, loaded checkpoint")
        else:
            t0 = time.monotonic()
            model = _execute_stage(
                model, rng, spec, config, train_set, test_set, seed_dir, stem, slog
            )
            save_checkpoint(model, str(outputs[0]), rng=rng)
            if slog:
                slog(f"{stem}: done in {time.monotonic() - t0:.1f}s")
        acc = 100.0 * evaluate(model, test_set, config.data.eval_batch)
        records.append({"stage": index, "name": spec.name, "accuracy": acc, "params": model.param_count()})

    lines = ["stage,name,accuracy,params"]
    lines += [f"{r['stage']},{r['name']},{r['accuracy']!r},{r['params']}" for r in records]
    (seed_dir / "records.csv").write_text("\n".join(lines) + "\n")
    return records


def run_experiment(config: ExperimentConfig, out_dir, log=None, only_seeds=None) -> dict:
    """Execute the configured seeds and aggregate the report.

    The resolved config is persisted in the run directory; resuming with a
    config that resolves differently is refused.  `only_seeds` restricts
    execution to a subset (for fanning seeds out across processes); the
    aggregate is then written only once every configured seed has records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = config.resolved_text or config.render()
    resolved = out_dir / "config.resolved"
    if resolved.exists():
        if resolved.read_text() != text:
            raise ConfigError(f"{resolved} was written by a different configuration; refusing to resume")
    else:
        resolved.write_text(text)

    seeds = config.seeds if only_seeds is None else list(only_seeds)
    unknown = [s for s in seeds if s not in config.seeds]
    if unknown:
        raise ConfigError(f"seeds {unknown} are not in the configured set {config.seeds}")
    train_set, test_set = build_datasets(config.data)
    for seed in seeds:
        run_seed(config, seed, out_dir, train_set, test_set, log=log)
    if any(not (out_dir / f"seed{s:03d}" / "records.csv").exists() for s in config.seeds):
        if log:
            log("partial run: not all seeds have records yet, skipping report aggregation")
        return {"out_dir": str(out_dir), "report": []}
    rows = aggregate_report(out_dir, config)
    return {"out_dir": str(out_dir), "report": rows}


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def aggregate_report(out_dir, config: ExperimentConfig | None = None) -> list[dict]:
    """Across-seed summary of a finished run, written to <out>/report.csv.

    One `accuracy` row (final test accuracy), and for the last
    prune-report stage one `pruned` and one `pruned_pct` row per layer and
    granularity.  Means and sample deviations use %.2f; counts are exact.
    """
    out_dir = Path(out_dir)
    if config is None:
        resolved = out_dir / "config.resolved"
        if not resolved.exists():
            raise ConfigError(f"{out_dir} has no config.resolved; not a run directory")
        config = ExperimentConfig.from_text(resolved.read_text())

    final_acc, per_key = [], {}
    report_stage = None
    for index, spec in enumerate(config.stages):
        if spec.name == "prune-report":
            report_stage = (index, spec)
    for seed in config.seeds:
        seed_dir = out_dir / f"seed{seed:03d}"
        rec = seed_dir / "records.csv"
        if not rec.exists():
            raise ConfigError(f"run is incomplete: {rec} is missing")
        last = rec.read_text().strip().splitlines()[-1].split(",")
        final_acc.append(float(last[2]))
        if report_stage is not None:
            index, spec = report_stage
            summary = seed_dir / f"{stage_stem(index, spec)}.summary.csv"
            for line in summary.read_text().strip().splitlines()[1:]:
                layer, gran, _base, _final, pruned, total = line.split(",")
                per_key.setdefault((int(layer), gran), []).append((int(pruned), int(total)))

    label = config.label
    rows = []
    mean, sd = _mean_sd(final_acc)
    rows.append({"label": label, "metric": "accuracy", "layer": "", "granularity": "",
                 "mean": mean, "sd": sd, "n": len(final_acc), "total": ""})
    for (layer, gran) in sorted(per_key):
        entries = per_key[(layer, gran)]
        totals = {t for _, t in entries}
        if len(totals) != 1:
            raise IntegrityError(f"layer {layer} {gran} totals differ across seeds: {sorted(totals)}")
        total = totals.pop()
        mean, sd = _mean_sd([p for p, _ in entries])
        rows.append({"label": label, "metric": "pruned", "layer": layer, "granularity": gran,
                     "mean": mean, "sd": sd, "n": len(entries), "total": total})
        pct_mean, pct_sd = _mean_sd([100.0 * p / total for p, _ in entries])
        rows.append({"label": label, "metric": "pruned_pct", "layer": layer, "granularity": gran,
                     "mean": pct_mean, "sd": pct_sd, "n": len(entries), "total": total})

    lines = ["label,metric,layer,granularity,mean,sd,n,total"]
    for r in rows:
        lines.append(
            f"{r['label']},{r['metric']},{r['layer']},{r['granularity']},"
            f"{r['mean']:.2f},{r['sd']:.2f},{r['n']},{r['total']}"
        )
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n")
    return rows
