"""Experiment configuration: file grammar, typed views, stage validation.

Config files are flat ``key = value`` lines grouped under ``[section]``
headers; ``#`` starts a comment.  The ``[stages]`` section is special: its
only key is ``stage``, repeatable, each value naming a stage followed by
space-separated ``key=value`` arguments, e.g.

    [stages]
    stage = pretrain
    stage = fit layer=0 scale=unit
    stage = gabor-learn
    stage = prune-report layers=0,1

Overrides arrive as dotted keys ("optim.lr=0.05") and are applied after
parsing.  Unknown sections, keys, or stage names are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine.optim import OptimizerConfig
from .errors import ConfigError

STAGE_NAMES = (
    "pretrain",
    "expand-first-layer",
    "alter-head",
    "fit",
    "to-standard",
    "retrain",
    "gabor-learn",
    "prune",
    "compact",
    "prune-report",
)

_TRAIN_OVERRIDES = {"lr", "epochs", "weight_decay", "amplitude_decay", "momentum", "batch_size"}

_STAGE_ARGS = {
    "pretrain": set(_TRAIN_OVERRIDES),
    "expand-first-layer": {"k", "embed"},
    "alter-head": {"k1", "k2"},
    "fit": {"layer", "scale", "workers"},
    "to-standard": {"layers"},
    "retrain": set(_TRAIN_OVERRIDES),
    "gabor-learn": set(_TRAIN_OVERRIDES),
    "prune": {"layer", "granularity", "tolerance", "mode"},
    "compact": set(),
    "prune-report": {"layers", "tolerance", "mode"},
}

_SECTION_KEYS = {
    "run": {"name", "out", "seeds", "init_run", "label"},
    "model": {"family", "classes", "width", "image_size", "blocks_per_stage", "base_width"},
    "data": {
        "kind", "dir", "seed", "classes", "train_per_class", "test_per_class",
        "noise", "image_size", "eval_batch",
    },
    "optim": {"lr", "momentum", "weight_decay", "amplitude_decay", "batch_size", "epochs", "lr_drops", "seed"},
    "stages": {"stage"},
}


@dataclass
class StageSpec:
    """One pipeline stage: a name plus its parsed arguments."""

    name: str
    args: dict = field(default_factory=dict)

    def arg(self, key, default=None):
        return self.args.get(key, default)

    def int_arg(self, key, default=None):
        v = self.args.get(key, default)
        if v is None:
            raise ConfigError(f"stage {self.name} requires argument {key}")
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"stage {self.name} argument {key}={v!r} is not an integer") from None

    def float_arg(self, key, default):
        try:
            return float(self.args.get(key, default))
        except ValueError:
            raise ConfigError(f"stage {self.name} argument {key} is not a number") from None

    def int_list_arg(self, key):
        raw = self.args.get(key)
        if raw is None:
            raise ConfigError(f"stage {self.name} requires argument {key}")
        try:
            return [int(v) for v in str(raw).split(",") if v != ""]
        except ValueError:
            raise ConfigError(f"stage {self.name} argument {key}={raw!r} is not an index list") from None

    def describe(self) -> str:
        if not self.args:
            return self.name
        return self.name + " " + " ".join(f"{k}={v}" for k, v in self.args.items())


def parse_stage_line(value: str) -> StageSpec:
    parts = value.split()
    if not parts:
        raise ConfigError("empty stage line")
    name, args = parts[0], {}
    if name not in STAGE_NAMES:
        raise ConfigError(f"unknown stage {name!r}; known: {', '.join(STAGE_NAMES)}")
    for tok in parts[1:]:
        if "=" not in tok:
            raise ConfigError(f"stage {name}: argument {tok!r} is not key=value")
        k, v = tok.split("=", 1)
        if k not in _STAGE_ARGS[name]:
            raise ConfigError(f"stage {name}: unknown argument {k!r}")
        args[k] = v
    return StageSpec(name, args)


def parse_config_text(text: str) -> dict:
    """Parse the file grammar into {section: {key: value}} plus stage list."""
    sections: dict = {name: {} for name in _SECTION_KEYS}
    stages: list[StageSpec] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTION_KEYS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SECTION_KEYS[current]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{current}]")
        if current == "stages":
            stages.append(parse_stage_line(value))
        elif key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        else:
            sections[current][key] = value
    sections["stages"] = stages
    return sections


def apply_overrides(sections: dict, overrides: list) -> dict:
    """Apply dotted-key overrides ("optim.lr=0.05") onto parsed sections."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, value = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if sec not in _SECTION_KEYS or sec == "stages":
            raise ConfigError(f"override {dotted!r}: unknown or non-overridable section")
        if key not in _SECTION_KEYS[sec]:
            raise ConfigError(f"override {dotted!r}: unknown key {key!r} in [{sec}]")
        sections[sec][key.strip()] = value.strip()
    return sections


def _get(sections, sec, key, default=None, cast=str):
    raw = sections[sec].get(key)
    if raw is None:
        if default is None and cast is not str:
            raise ConfigError(f"missing required config key {sec}.{key}")
        return default
    try:
        if cast is bool:
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        raise ConfigError(f"config key {sec}.{key}={raw!r} is not a valid {cast.__name__}") from None


@dataclass
class DataSpec:
    kind: str = "textures"
    directory: str = ""
    seed: int = 0
    classes: int = 4
    train_per_class: int = 250
    test_per_class: int = 125
    noise: float = 0.25
    image_size: int = 32
    eval_batch: int = 128


@dataclass
class ExperimentConfig:
    """Validated, typed view of one experiment config file."""

    name: str
    out: str
    seeds: list
    label: str
    init_run: str | None
    family: str
    classes: int
    model_args: dict
    data: DataSpec
    optim: OptimizerConfig
    stages: list
    resolved_text: str = ""

    @classmethod
    def from_text(
        cls, text: str, overrides: list | None = None, require_stages: bool = True
    ) -> "ExperimentConfig":
        sections = apply_overrides(parse_config_text(text), overrides or [])
        seeds_raw = _get(sections, "run", "seeds", default="0")
        try:
            seeds = [int(v) for v in seeds_raw.split(",") if v != ""]
        except ValueError:
            raise ConfigError(f"run.seeds={seeds_raw!r} is not a comma list of integers") from None
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("run.seeds must be a non-empty list of distinct integers")

        family = _get(sections, "model", "family", default="toy")
        if family not in ("toy", "vgg-style", "resnet-style"):
            raise ConfigError(f"model.family must be toy, vgg-style, or resnet-style, got {family!r}")
        classes = _get(sections, "model", "classes", default=4, cast=int)
        model_args = {}
        if family == "toy":
            model_args["width"] = _get(sections, "model", "width", default=8, cast=int)
            model_args["image_size"] = _get(sections, "model", "image_size", default=32, cast=int)
        elif family == "resnet-style":
            model_args["blocks_per_stage"] = _get(sections, "model", "blocks_per_stage", default=3, cast=int)
            model_args["base_width"] = _get(sections, "model", "base_width", default=16, cast=int)
            model_args["image_size"] = _get(sections, "model", "image_size", default=32, cast=int)
        else:
            model_args["image_size"] = _get(sections, "model", "image_size", default=32, cast=int)

        kind = _get(sections, "data", "kind", default="textures")
        if kind not in ("textures", "cifar10"):
            raise ConfigError(f"data.kind must be textures or cifar10, got {kind!r}")
        data = DataSpec(
            kind=kind,
            directory=_get(sections, "data", "dir", default=""),
            seed=_get(sections, "data", "seed", default=0, cast=int),
            classes=_get(sections, "data", "classes", default=classes, cast=int),
            train_per_class=_get(sections, "data", "train_per_class", default=250, cast=int),
            test_per_class=_get(sections, "data", "test_per_class", default=125, cast=int),
            noise=_get(sections, "data", "noise", default=0.25, cast=float),
            image_size=_get(sections, "data", "image_size", default=model_args.get("image_size", 32), cast=int),
            eval_batch=_get(sections, "data", "eval_batch", default=128, cast=int),
        )
        if kind == "cifar10" and not data.directory:
            raise ConfigError("data.kind=cifar10 requires data.dir")
        if data.classes != classes:
            raise ConfigError(f"data.classes={data.classes} does not match model.classes={classes}")

        drops_raw = _get(sections, "optim", "lr_drops", default="0.5:0.1,0.75:0.1")
        drops = []
        try:
            for part in str(drops_raw).split(","):
                if not part:
                    continue
                frac, factor = part.split(":")
                drops.append((float(frac), float(factor)))
        except ValueError:
            raise ConfigError(f"optim.lr_drops={drops_raw!r}; expected frac:factor,frac:factor") from None
        amp_decay = sections["optim"].get("amplitude_decay")
        optim = OptimizerConfig(
            lr=_get(sections, "optim", "lr", default=0.1, cast=float),
            momentum=_get(sections, "optim", "momentum", default=0.9, cast=float),
            weight_decay=_get(sections, "optim", "weight_decay", default=5e-4, cast=float),
            amplitude_decay=_get(sections, "optim", "amplitude_decay", default=0.0, cast=float) if amp_decay is not None else None,
            batch_size=_get(sections, "optim", "batch_size", default=128, cast=int),
            epochs=_get(sections, "optim", "epochs", default=10, cast=int),
            seed=_get(sections, "optim", "seed", default=0, cast=int),
            lr_drops=tuple(drops),
        )

        stages = sections["stages"]
        if not stages and require_stages:
            raise ConfigError("config declares no stages")
        init_run = sections["run"].get("init_run") or None
        if stages:
            validate_stages(stages, chained=init_run is not None, family=family)

        cfg = cls(
            name=_get(sections, "run", "name", default="experiment"),
            out=_get(sections, "run", "out", default="run"),
            seeds=seeds,
            label=_get(sections, "run", "label", default=""),
            init_run=init_run,
            family=family,
            classes=classes,
            model_args=model_args,
            data=data,
            optim=optim,
            stages=stages,
        )
        cfg.resolved_text = cfg.render()
        return cfg

    def render(self) -> str:
        """The exact resolved config, re-runnable as a config file."""
        lines = ["[run]", f"name = {self.name}", f"out = {self.out}",
                 f"seeds = {','.join(str(s) for s in self.seeds)}"]
        if self.label:
            lines.append(f"label = {self.label}")
        if self.init_run:
            lines.append(f"init_run = {self.init_run}")
        lines += ["", "[model]", f"family = {self.family}", f"classes = {self.classes}"]
        for k, v in self.model_args.items():
            lines.append(f"{k} = {v}")
        d = self.data
        lines += ["", "[data]", f"kind = {d.kind}"]
        if d.directory:
            lines.append(f"dir = {d.directory}")
        lines += [f"seed = {d.seed}", f"classes = {d.classes}",
                  f"train_per_class = {d.train_per_class}", f"test_per_class = {d.test_per_class}",
                  f"noise = {d.noise!r}", f"image_size = {d.image_size}",
                  f"eval_batch = {d.eval_batch}"]
        o = self.optim
        drops = ",".join(f"{f!r}:{m!r}" for f, m in o.lr_drops)
        lines += ["", "[optim]", f"lr = {o.lr!r}", f"momentum = {o.momentum!r}",
                  f"weight_decay = {o.weight_decay!r}"]
        if o.amplitude_decay is not None:
            lines.append(f"amplitude_decay = {o.amplitude_decay!r}")
        lines += [f"batch_size = {o.batch_size}", f"epochs = {o.epochs}", f"lr_drops = {drops}"]
        lines += ["", "[stages]"]
        lines += [f"stage = {s.describe()}" for s in self.stages]
        return "\n".join(lines) + "\n"


def validate_stages(stages: list, chained: bool, family: str) -> None:
    """Reject stage sequences that are not a path through the experiment DAG.

    Tracks an abstract model state: whether a trained model exists, which
    layers are Gabor-parameterized, and whether a structural or fitting
    change is pending a training stage.  Chained runs start from an already
    trained model whose Gabor layers are only known at load time, so
    Gabor-dependent stages are then deferred to runtime checks.
    """
    trained = chained
    pending = False          # structure/fit changed since the last training stage
    gabor: set = set()
    gabor_unknown = chained  # inherited model may hold Gabor layers

    def err(i, spec, why):
        raise ConfigError(f"stage {i} ({spec.describe()}): {why}")

    for i, spec in enumerate(stages):
        name = spec.name
        if name == "pretrain":
            if trained:
                err(i, spec, "pretrain must come before any training stage" if not chained
                    else "pretrain is invalid in a chained run (model already trained)")
            trained, pending = True, False
        elif name in ("expand-first-layer", "alter-head"):
            if name == "alter-head" and family != "resnet-style":
                err(i, spec, f"alter-head requires a resnet-style model, config says {family}")
            if name == "expand-first-layer":
                spec.int_arg("k")
            else:
                spec.int_arg("k1"), spec.int_arg("k2")
            trained, pending = False, False
            gabor.clear()
            gabor_unknown = False
        elif name == "fit":
            layer = spec.int_arg("layer")
            if not trained:
                err(i, spec, "fit requires a trained model")
            scale = spec.arg("scale", "unit")
            if scale not in ("unit", "max-abs"):
                err(i, spec, f"scale must be unit or max-abs, got {scale!r}")
            gabor.add(layer)
            pending = True
        elif name == "to-standard":
            layers = spec.int_list_arg("layers")
            if not trained:
                err(i, spec, "to-standard requires a trained model")
            for l in layers:
                if l not in gabor and not gabor_unknown:
                    err(i, spec, f"layer {l} is not Gabor-parameterized here")
                gabor.discard(l)
        elif name == "retrain":
            if not trained:
                err(i, spec, "retrain requires a previously trained model")
            gabor.clear()
            gabor_unknown = False
            pending = False
        elif name == "gabor-learn":
            if not trained:
                err(i, spec, "gabor-learn requires a trained model")
            if not gabor and not gabor_unknown:
                err(i, spec, "gabor-learn requires a preceding fit")
            pending = False
        elif name in ("prune", "prune-report"):
            if not trained:
                err(i, spec, f"{name} requires a trained model")
            if pending:
                err(i, spec, f"{name} requires a training stage after the last fit/transform")
            if name == "prune":
                spec.int_arg("layer")
                gran = spec.arg("granularity")
                if gran not in ("kernel", "channel"):
                    err(i, spec, f"granularity must be kernel or channel, got {gran!r}")
            else:
                spec.int_list_arg("layers")
            mode = spec.arg("mode", "stop")
            if mode not in ("stop", "continue"):
                err(i, spec, f"mode must be stop or continue, got {mode!r}")
        elif name == "compact":
            if not trained:
                err(i, spec, "compact requires a trained model")
        else:  # pragma: no cover - parse_stage_line already rejects unknown names
            err(i, spec, "unknown stage")
