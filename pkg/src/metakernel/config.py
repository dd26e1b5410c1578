"""
Run configuration: dataclass sections loaded from / dumped to TOML.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

OUTPUT_ENV = "METAKERNEL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class SpaceConfig:
    kernel_sizes: tuple = (3, 5, 7)
    include_none: bool = True
    share_alpha: bool = False
    alpha_init_std: float = 1e-3
    stem_channels: int = 8
    widths: tuple = (8, 16, 16, 32)
    out_channels: tuple = (4, 8, 8, 16)
    strides: tuple = (1, 2, 1, 2)


@dataclass
class BudgetConfig:
    # target = target_fraction * (cost with every filter at the largest kernel)
    # unless an absolute MAC count is given
    target_fraction: float = 0.5
    target: float = 0.0
    eta: float = 0.1
    lambda_cost: float = 2.0
    cost_from_gumbel: bool = False


@dataclass
class OptimConfig:
    lr_w: float = 0.02
    lr_alpha: float = 0.02
    alpha_optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    alpha_warmup_epochs: int = 0
    lr_schedule: str = "cosine"
    # large-scale reference values, kept for the record and not used by default
    reference_lr: float = 0.65
    reference_weight_decay: float = 3e-5


@dataclass
class GumbelSection:
    tau_start: float = 5.0
    tau_end: float = 0.5
    schedule: str = "linear"
    mode: str = "soft"


@dataclass
class TrainConfig:
    epochs: int = 30
    retrain_epochs: int = 30
    batch_size: int = 64
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"
    scale_mode: str = "large_structure"
    image_size: int = 24
    num_classes: int = 4
    n_train: int = 4000
    n_test: int = 1000
    noise: float = 0.1
    motifs: int = 6
    clutter: int = 0
    radius: int = 0
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class RunConfig:
    space: SpaceConfig = field(default_factory=SpaceConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    gumbel: GumbelSection = field(default_factory=GumbelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"

    def validate(self):
        if self.train.epochs < 0 or self.train.retrain_epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError("data.source must be 'synthetic' or 'idx'")
        if self.data.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self.data, name)
                if not path or not Path(path).is_file():
                    raise ConfigError(f"data.{name}: file not found: {path!r}")
        if self.optim.alpha_optimizer not in ("sgd", "adam"):
            raise ConfigError("optim.alpha_optimizer must be 'sgd' or 'adam'")
        if self.optim.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("optim.lr_schedule must be 'cosine' or 'constant'")
        if not (self.budget.target > 0 or 0 < self.budget.target_fraction <= 1):
            raise ConfigError("budget needs target > 0 or target_fraction in (0, 1]")
        return self

    def to_dict(self):
        def clean(v):
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return clean(asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, key)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key} must be an array")
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            kwargs[key] = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{key} must be an integer")
            kwargs[key] = value
        else:
            kwargs[key] = str(value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Defaults, then the TOML file, then ``overrides``, then the env output dir."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    cfg = config_from_dict(data)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg.output_dir = env
    return cfg
