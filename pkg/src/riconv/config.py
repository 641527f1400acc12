"""Experiment configuration read from sectioned ``key = value`` files.

Every key is optional; omitted keys keep the defaults shown below::

    [experiment]
    command = grid            ; extract | train | eval | grid | noise | ablate | repeat
    seed = 0
    seeds = 0                 ; comma list, used by repeated runs
    out = results

    [dataset]
    kind = primitives         ; primitives | parts | files
    n_train = 100             ; per class for primitives, total for parts
    n_test = 50
    n_points = 512
    jitter = 0.004
    train_glob =              ; kind = files: label = parent directory name
    test_glob =

    [network]
    preset = desk             ; desk | desk-seg | full | full-seg
    axis_source = lra         ; lra | normals | pm
    features = irif           ; irif | xyz
    mask = A                  ; A | B | C | D or comma list of column names
    kernel_size = 1
    support_k = 16

    [train]
    epochs = 10
    batch = 16
    lr = 0.001
    train_mode = z            ; none | z | so3
    test_mode = so3
    train_modes = none, z, so3
    test_modes = none, z, so3
    trials = 1
    checkpoint =              ; eval: checkpoint to load

    [noise]
    sigmas = 0, 0.01, 0.02, 0.04, 0.08
    axis_sources = lra, pm

    [ablation]
    masks = A, B, C, D
    kernels = 1, 3, 5, 7
    train_kernels = false

    [repeat]
    shapes = sphere, cube, cylinder, cone, torus, plane
    n_points = 2048
    pairs = 1000
    noise_factor = 0.5
    subsample = 0.5
    support_k = 32

    [extract]
    input =                   ; point-cloud file
    reps = 64
    neighbors_k = 16
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .geometry import SHAPE_KINDS
from .irif import MODEL_MASKS, FeatureMask
from .model import (
    ConfigError,
    NetworkConfig,
    desk_classifier,
    desk_segmenter,
    full_classifier,
    full_segmenter,
)

COMMANDS = ("extract", "train", "eval", "grid", "noise", "ablate", "repeat")
MODES = ("none", "z", "so3")
PRESETS = {
    "desk": desk_classifier,
    "desk-seg": desk_segmenter,
    "full": full_classifier,
    "full-seg": full_segmenter,
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "primitives"
    n_train: int = 100
    n_test: int = 50
    n_points: int = 512
    jitter: float = 0.004
    train_glob: str = ""
    test_glob: str = ""


@dataclass(frozen=True)
class NetworkSpec:
    preset: str = "desk"
    axis_source: str = "lra"
    features: str = "irif"
    mask: str = "A"
    kernel_size: int = 1
    support_k: int = 16


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 10
    batch: int = 16
    lr: float = 1e-3
    train_mode: str = "z"
    test_mode: str = "so3"
    train_modes: tuple = MODES
    test_modes: tuple = MODES
    trials: int = 1
    checkpoint: str = ""


@dataclass(frozen=True)
class NoiseSpec:
    sigmas: tuple = (0.0, 0.01, 0.02, 0.04, 0.08)
    axis_sources: tuple = ("lra", "pm")


@dataclass(frozen=True)
class AblationSpec:
    masks: tuple = ("A", "B", "C", "D")
    kernels: tuple = (1, 3, 5, 7)
    train_kernels: bool = False


@dataclass(frozen=True)
class RepeatSpec:
    shapes: tuple = SHAPE_KINDS
    n_points: int = 2048
    pairs: int = 1000
    noise_factor: float = 0.5
    subsample: float = 0.5
    support_k: int = 32


@dataclass(frozen=True)
class ExtractSpec:
    input: str = ""
    reps: int = 64
    neighbors_k: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = "grid"
    seed: int = 0
    seeds: tuple = (0,)
    out: str = "results"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    repeat: RepeatSpec = field(default_factory=RepeatSpec)
    extract: ExtractSpec = field(default_factory=ExtractSpec)

    def __post_init__(self):
        validate(self)

    def with_network(self, **kw) -> "ExperimentConfig":
        return replace(self, network=replace(self.network, **kw))

    def with_train(self, **kw) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, **kw))

    def network_config(self, num_classes=None, seed=None) -> NetworkConfig:
        """Materialize the network preset with this experiment's overrides."""
        net = self.network
        kw = dict(axis_source=net.axis_source, features=net.features, mask=parse_mask(net.mask),
                  support_k=net.support_k, seed=self.seed if seed is None else seed)
        if num_classes is not None:
            kw["num_classes"] = num_classes
        if net.preset in ("desk", "desk-seg"):
            kw["in_points"] = self.dataset.n_points
        cfg = PRESETS[net.preset](**kw)
        return cfg.with_kernel(net.kernel_size) if cfg.task == "classify" else cfg


def parse_mask(text: str) -> FeatureMask:
    text = text.strip()
    if text in MODEL_MASKS:
        return FeatureMask.model(text)
    names = [t.strip() for t in text.split(",") if t.strip()]
    return FeatureMask.from_names(names)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}")
    t = cfg.train
    for mode in (t.train_mode, t.test_mode, *t.train_modes, *t.test_modes):
        if mode not in MODES:
            raise ConfigError(f"rotation mode {mode!r} not in {MODES}")
    s = cfg.noise.sigmas
    if any(x < 0 for x in s) or any(b < a for a, b in zip(s, s[1:])):
        raise ConfigError("sigmas must be non-negative and ascending")
    if cfg.network.preset not in PRESETS:
        raise ConfigError(f"preset must be one of {tuple(PRESETS)}")
    if cfg.dataset.kind not in ("primitives", "parts", "files"):
        raise ConfigError(f"unknown dataset kind {cfg.dataset.kind!r}")
    if t.epochs < 0 or t.batch < 2 or t.lr <= 0 or t.trials < 1:
        raise ConfigError("train section needs epochs >= 0, batch >= 2, lr > 0, trials >= 1")
    unknown = set(cfg.repeat.shapes) - set(SHAPE_KINDS)
    if unknown:
        raise ConfigError(f"unknown repeat shapes {sorted(unknown)}")
    if not 0 < cfg.repeat.subsample <= 1:
        raise ConfigError("subsample must lie in (0, 1]")
    if cfg.dataset.kind == "files" and not (cfg.dataset.train_glob and cfg.dataset.test_glob):
        raise ConfigError("dataset kind 'files' needs train_glob and test_glob")
    try:
        parse_mask(cfg.network.mask)
    except ValueError as err:
        raise ConfigError(f"mask: {err}") from None


def _coerce(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(v) for v in items)
    return type(default)(value.strip())


_SECTIONS = {
    "dataset": DatasetSpec, "network": NetworkSpec, "train": TrainSpec, "noise": NoiseSpec,
    "ablation": AblationSpec, "repeat": RepeatSpec, "extract": ExtractSpec,
}


def load_config(path=None, text=None, **overrides) -> ExperimentConfig:
    """Parse a config file (or string); keyword overrides apply to [experiment] keys."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        parser.read(path)
    if text is not None:
        parser.read_string(text)
    for section in parser.sections():
        if section != "experiment" and section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    top = {}
    if parser.has_section("experiment"):
        defaults = ExperimentConfig.__dataclass_fields__
        for key, value in parser.items("experiment"):
            if key not in ("command", "seed", "seeds", "out"):
                raise ConfigError(f"unknown key {key!r} in [experiment]")
            default = defaults[key].default
            try:
                top[key] = _coerce(value, default)
            except ValueError as err:
                raise ConfigError(f"[experiment] {key}: {err}") from None
    parts = {}
    for name, cls in _SECTIONS.items():
        if not parser.has_section(name):
            continue
        defaults = {f.name: f.default for f in fields(cls)}
        kw = {}
        for key, value in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                kw[key] = _coerce(value, defaults[key])
            except ValueError as err:
                raise ConfigError(f"[{name}] {key}: {err}") from None
        parts[name] = cls(**kw)
    top.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**top, **parts)

