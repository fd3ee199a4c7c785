"""Experiment configuration: YAML tree, strict keys, dotted overrides.

The config has five sections (schedule, denoiser, objective, scene, run),
each a dataclass. Unknown keys fail loudly instead of being ignored, so a
typo in an override never silently runs the default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .distill import DEFAULT_GUIDANCE, OBJECTIVE_KINDS, DistillationObjective, GuidanceSpec
from .errors import ConfigurationError
from .schedule import AnnealPlan, ShiftPolicy, TimestepRange


@dataclass
class AnnealSection:
    """Linear drift of the timestep window over the run.

    Defaults follow the standard recipe: the upper end drops 980 -> 500
    while the lower end drops 500 -> 20.
    """

    t_min_start: int = 500
    t_max_start: int = 980
    t_min_end: int = 20
    t_max_end: int = 500


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_family: str = "linear"
    t_min: int = 20
    t_max: int = 980
    shift_mode: str = "uniform"
    eta: float = 0.1
    anneal: AnnealSection | None = None


@dataclass
class DenoiserTrainSection:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1


@dataclass
class DenoiserSection:
    kind: str = "point_mlp"  # point_mlp | image_conv | oracle
    hidden: int = 128
    depth: int = 3
    cond_dim: int = 16
    time_dim: int = 64
    prediction_type: str = "epsilon"
    checkpoint: str | None = None
    train: DenoiserTrainSection = field(default_factory=DenoiserTrainSection)


@dataclass
class AdapterSection:
    rank: int = 4
    lr: float = 1e-3
    steps_per_iter: int = 1


@dataclass
class ObjectiveSection:
    kind: str = "ASD"
    cfg_main: float | None = None    # None -> per-kind default guidance scale
    cfg_second: float | None = None  # None -> 1.0 (pure conditional second term)
    shift_mode: str | None = None    # None -> schedule section value
    eta: float | None = None         # None -> schedule section value
    omega: str = "one"
    adapter: AdapterSection = field(default_factory=AdapterSection)

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigurationError(
                f"objective.kind {self.kind!r} not one of {OBJECTIVE_KINDS}"
            )


@dataclass
class SceneSection:
    kind: str = "particles"  # particles | direct_mlp | hypernet
    num_particles: int = 1
    noise_dim: int = 0
    render_mode: str = "identity"
    spectral_norm: bool = False
    init_std: float = 2.0

    def __post_init__(self):
        if self.kind not in ("particles", "direct_mlp", "hypernet"):
            raise ConfigurationError(f"scene.kind {self.kind!r} unknown")


@dataclass
class OptimizerSection:
    family: str = "adam"
    lr: float | None = None  # None -> 1e-2 for particles, 1e-4 for generators
    decay: str = "cosine"    # none | cosine

    def __post_init__(self):
        if self.family not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer family {self.family!r} unknown")
        if self.decay not in ("none", "cosine"):
            raise ConfigurationError(f"lr decay {self.decay!r} not 'none' or 'cosine'")


@dataclass
class RunSection:
    corpus: str = "point"          # point | image
    class_ids: list[int] | None = None
    iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0      # 0 -> final checkpoint only
    shift_per: str = "sample"      # sample | batch: one dt draw per sample or per step
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)

    def __post_init__(self):
        if self.corpus not in ("point", "image"):
            raise ConfigurationError(f"run.corpus {self.corpus!r} not 'point' or 'image'")
        if self.shift_per not in ("sample", "batch"):
            raise ConfigurationError(f"run.shift_per {self.shift_per!r} unknown")


@dataclass
class RootConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    scene: SceneSection = field(default_factory=SceneSection)
    run: RunSection = field(default_factory=RunSection)


_OPTIONAL_NESTED = {"anneal": AnnealSection}


def _build_section(cls, data, path: str):
    """Construct a dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {path or cls.__name__!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(f"unknown config key {where!r}")
        sub = f"{path}.{key}" if path else key
        ftype = known[key].type
        if key in _OPTIONAL_NESTED:
            kwargs[key] = None if value is None else _build_section(_OPTIONAL_NESTED[key], value, sub)
        elif dataclasses.is_dataclass(_resolve_type(ftype)):
            kwargs[key] = _build_section(_resolve_type(ftype), value, sub)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _resolve_type(ftype):
    """Map a field's annotation to a dataclass, if it names one directly."""
    if isinstance(ftype, str):
        ftype = globals().get(ftype, ftype)
    return ftype if dataclasses.is_dataclass(ftype) else type(None)


def build_config(data: dict | None) -> RootConfig:
    return _build_section(RootConfig, data, "")


def load_config(path) -> RootConfig:
    """Parse a YAML config file into the full tree."""
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    with open(p) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {p} must hold a mapping at top level")
    return build_config(data)


def parse_override(pair: str):
    """Split 'a.b.c=value' into (['a','b','c'], parsed value)."""
    if "=" not in pair:
        raise ConfigurationError(f"override {pair!r} is not KEY=VALUE")
    key, raw = pair.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override {pair!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.split("."), value


def apply_overrides(cfg: RootConfig, pairs) -> RootConfig:
    """Apply dotted KEY=VALUE overrides on top of a parsed config.

    Overrides must name existing keys; they win over file values.
    """
    data = config_to_dict(cfg)
    for pair in pairs:
        keys, value = parse_override(pair)
        node = data
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigurationError(f"override targets unknown key {'.'.join(keys)!r}")
            if node[k] is None and k in _OPTIONAL_NESTED:
                node[k] = dataclasses.asdict(_OPTIONAL_NESTED[k]())
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigurationError(f"override targets unknown key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return build_config(data)


def config_to_dict(cfg: RootConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_to_yaml(cfg: RootConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def resolve_objective(cfg: RootConfig) -> DistillationObjective:
    """Concrete objective with all fallbacks applied.

    Guidance defaults are per-kind; shift mode and eta fall back to the
    schedule section when the objective section leaves them unset.
    """
    obj = cfg.objective
    main = DEFAULT_GUIDANCE[obj.kind] if obj.cfg_main is None else float(obj.cfg_main)
    second = 1.0 if obj.cfg_second is None else float(obj.cfg_second)
    mode = obj.shift_mode if obj.shift_mode is not None else cfg.schedule.shift_mode
    eta = obj.eta if obj.eta is not None else cfg.schedule.eta
    return DistillationObjective(
        kind=obj.kind,
        guidance_main=GuidanceSpec(main),
        guidance_second=GuidanceSpec(second),
        shift=ShiftPolicy(mode=mode, eta=eta),
        weight_fn=obj.omega,
    )


def resolve_range(cfg: RootConfig) -> TimestepRange:
    return TimestepRange(cfg.schedule.t_min, cfg.schedule.t_max)


def resolve_anneal(cfg: RootConfig, total_iters: int) -> AnnealPlan | None:
    a = cfg.schedule.anneal
    if a is None:
        return None
    return AnnealPlan(
        start=TimestepRange(a.t_min_start, a.t_max_start),
        end=TimestepRange(a.t_min_end, a.t_max_end),
        total_iters=max(total_iters, 1),
    )


def resolve_lr(cfg: RootConfig) -> float:
    lr = cfg.run.optimizer.lr
    if lr is not None:
        return float(lr)
    return 1e-2 if cfg.scene.kind == "particles" else 1e-4
