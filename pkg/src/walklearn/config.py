"""Sectioned key-value run configuration and stage hashing."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field, replace

from .model import ModelSpec
from .pair_miner import MiningConfig
from .pipeline import EvalConfig, PipelineConfig
from .synthetic_world import WorldConfig
from .track_store import ContextLabelSpec, GeoRegionSet, default_regions
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IntrospectConfig:
    branch: str = "geo"
    layer: str = "s4"
    n: int = 9
    k: int = 1
    use_max: bool = False
    standardize: bool = False
    dump_images: bool = False

    def __post_init__(self):
        if self.branch not in ("id", "geo", "weather"):
            raise ConfigError(f"unknown branch {self.branch!r}")
        if self.n < 1 or self.k < 1:
            raise ConfigError("introspect n and k must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    introspect: IntrospectConfig = field(default_factory=IntrospectConfig)
    seed: int = 0
    ablation_seeds: tuple = (1, 2, 3)
    regions_file: str = ""
    out: str = "runs"

    def resolved(self):
        """Pipeline config with every stage seeded from the global seed."""
        return self.pipeline.with_seed(self.seed)


# section -> (attribute path on RunConfig, keys that are not plain dataclass fields)
_TRAIN_KEYS = ("lr_global", "lr_top_multiplier", "margin", "batch_size", "epochs", "momentum")
_WORLD_SKIP = ("regions", "seed")


def _fields(cls, skip=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(obj, items, section, skip=()):
    fields = _fields(type(obj), skip)
    updates = {}
    for key, raw in items:
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        updates[key] = _coerce(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _section_targets(cfg):
    p = cfg.pipeline
    return {
        "world": (p.world, _WORLD_SKIP),
        "labels": (p.labels, ("n_geo_classes",)),
        "mining": (p.mining, ("seed",)),
        "model": (p.model, ("n_geo_classes",)),
        "train.verification": (p.verification, tuple(set(_fields(TrainConfig)) - set(_TRAIN_KEYS))),
        "train.context": (p.context, tuple(set(_fields(TrainConfig)) - set(_TRAIN_KEYS))),
        "eval": (p.eval, ()),
        "introspect": (cfg.introspect, ()),
    }


def parse_config(text, base=None):
    """Parse INI text over ``base`` (defaults when None); unknown sections or keys raise."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    p = cfg.pipeline
    sections = {s: parser.items(s) for s in parser.sections()}
    known = set(_section_targets(cfg)) | {"run"}
    for s in sections:
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")

    run_updates = {}
    for key, raw in sections.get("run", []):
        if key == "seed":
            run_updates["seed"] = _coerce(raw, 0, "[run] seed")
        elif key == "ablation_seeds":
            run_updates["ablation_seeds"] = _coerce(raw, (), "[run] ablation_seeds")
        elif key == "regions_file":
            run_updates["regions_file"] = raw.strip()
        elif key == "out":
            run_updates["out"] = raw.strip()
        else:
            raise ConfigError(f"unknown key {key!r} in section [run]")

    world = _apply(p.world, sections.get("world", []), "world", _WORLD_SKIP)
    regions_file = run_updates.get("regions_file", cfg.regions_file)
    if regions_file:
        try:
            world = replace(world, regions=GeoRegionSet.read(regions_file))
        except OSError as exc:
            raise ConfigError(f"cannot read regions file: {exc}") from None
    n_geo = len(world.regions)
    labels = _apply(replace(p.labels, n_geo_classes=n_geo), sections.get("labels", []), "labels",
                    ("n_geo_classes",))
    mining = _apply(p.mining, sections.get("mining", []), "mining", ("seed",))
    model = _apply(replace(p.model, n_geo_classes=n_geo, image_shape=world.image_shape),
                   sections.get("model", []), "model", ("n_geo_classes",))
    if tuple(model.image_shape) != tuple(world.image_shape):
        raise ConfigError("model image_shape must match world image_shape")
    skip_train = tuple(set(_fields(TrainConfig)) - set(_TRAIN_KEYS))
    verification = _apply(p.verification, sections.get("train.verification", []),
                          "train.verification", skip_train)
    context = _apply(p.context, sections.get("train.context", []), "train.context", skip_train)
    ev = _apply(p.eval, sections.get("eval", []), "eval")
    intro = _apply(cfg.introspect, sections.get("introspect", []), "introspect")

    pipeline = PipelineConfig(world=world, labels=labels, mining=mining, model=model,
                              verification=verification, context=context, eval=ev)
    return replace(cfg, pipeline=pipeline, introspect=intro, **run_updates)


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


def config_dict(cfg):
    """Every resolved key by section, in a stable order."""
    out = {"run": {"seed": cfg.seed, "ablation_seeds": cfg.ablation_seeds,
                   "regions_file": cfg.regions_file, "out": cfg.out}}
    for section, (obj, skip) in _section_targets(cfg).items():
        out[section] = {k: getattr(obj, k) for k in _fields(type(obj), skip)}
    return out


def dump_config(cfg):
    """Resolved configuration as INI text; parsing it back yields an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config_dict(cfg).items():
        parser[section] = {k: _format(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    regions = cfg.pipeline.world.regions
    if regions != default_regions() and not cfg.regions_file:
        buf.write("# regions are not the defaults; pass them with [run] regions_file\n")
    return buf.getvalue()


# which sections each stage's artifacts depend on
STAGE_SECTIONS = {
    "world": ("world", "labels"),
    "pairs": ("world", "labels", "mining"),
    "verification": ("world", "labels", "mining", "model", "train.verification"),
    "context": ("world", "labels", "mining", "model", "train.verification", "train.context"),
    "finetune": ("world", "labels", "mining", "model", "train.verification", "train.context", "eval"),
    "evaluate": ("world", "labels", "mining", "model", "train.verification", "train.context", "eval"),
    "ablate": ("world", "labels", "mining", "model", "train.verification", "train.context", "eval"),
    "inspect": ("world", "labels", "mining", "model", "train.verification", "train.context",
                "introspect"),
}


def stage_hash(cfg, stage, extra=None):
    """Short content hash of the configuration a stage depends on."""
    d = config_dict(cfg)
    payload = {s: d[s] for s in STAGE_SECTIONS[stage]}
    payload["seed"] = cfg.seed
    payload["regions"] = cfg.pipeline.world.regions.to_csv()
    if stage == "ablate":
        payload["ablation_seeds"] = list(cfg.ablation_seeds)
    if extra:
        payload["extra"] = extra
    blob = json.dumps(payload, sort_keys=True, default=_format).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
