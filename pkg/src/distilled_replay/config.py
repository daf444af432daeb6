"""Run configuration: INI files with one section per concern.

Schema (all keys optional unless noted)::

    [run]       name, seeds (list), strategies (list), output_dir, sequential, workers
    [scenario]  kind = split | permuted, dataset = mnist | fashion-mnist | blobs,
                data_dir, T, classes_per_exp, class_order (list), downscale,
                train_per_class, test_per_class, val_fraction,
                blob_classes, blob_train_per_class, blob_test_per_class, blob_dim, blob_spread
    [model]     kind = mlp | lenet5 | tiny-mlp, hidden (list), activation
    [train]     lr, batch_size, per_class, replay_weight, dtype
    [distill]   S, R, alpha, J, n, loss_mode, lr_mode, momentum, eta_alpha, seed,
                eta (must equal train.lr)
    [timing]    s_grid (list), r_grid (list), fixed_R, fixed_S, repeats, experience

``seeds`` is the list of repetitions; each seed drives the stream, the model
initialization, the minibatch order and the distillation.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .distillation import DistillConfig
from .strategies import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "split"
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    T: int = 5
    classes_per_exp: int = 2
    class_order: Optional[tuple] = None
    downscale: int = 1
    train_per_class: Optional[int] = None
    test_per_class: Optional[int] = None
    val_fraction: float = 0.05
    blob_classes: int = 4
    blob_train_per_class: int = 500
    blob_test_per_class: int = 200
    blob_dim: int = 2
    blob_spread: float = 0.3


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"
    hidden: tuple = (500,)
    activation: str = "relu"


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.1
    batch_size: int = 64
    per_class: int = 1
    replay_weight: float = 1.0
    dtype: str = "float64"


@dataclass(frozen=True)
class TimingConfig:
    s_grid: tuple = (2, 4, 8, 16)
    r_grid: tuple = (5, 10, 20)
    fixed_R: int = 10
    fixed_S: int = 10
    repeats: int = 3
    experience: int = 1


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seeds: tuple = (0,)
    strategies: tuple = ("distilled_replay",)
    output_dir: str = "runs/run"
    sequential: bool = True
    workers: int = 1
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    source_text: str = field(default="", compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_text")
        return d

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("output_dir", "workers", "sequential"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()

    def with_distill(self, **changes) -> "RunConfig":
        return replace(self, distill=replace(self.distill, **changes))


_LISTS = {"seeds", "strategies", "class_order", "hidden", "s_grid", "r_grid"}


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _LISTS:
            items = [s.strip() for s in raw.replace(",", " ").split()]
            return tuple(items) if key == "strategies" else tuple(int(s) for s in items)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "1")
        if isinstance(default, int) or key in ("train_per_class", "test_per_class"):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid value") from None


def _section(parser, name, cls, extra_ok=()):
    defaults = cls()
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key in extra_ok:
            continue
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _coerce(name, key, raw, getattr(defaults, key, None))
    return out


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (S, R, T)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - {"run", "scenario", "model", "train", "distill", "timing"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    run = _section(parser, "run", RunConfig)
    scenario = ScenarioConfig(**_section(parser, "scenario", ScenarioConfig))
    model = ModelConfig(**_section(parser, "model", ModelConfig))
    train = TrainSection(**_section(parser, "train", TrainSection))
    timing = TimingConfig(**_section(parser, "timing", TimingConfig))

    dvals = _section(parser, "distill", DistillConfig, extra_ok=("eta", "per_class"))
    if parser.has_section("distill"):
        if parser.has_option("distill", "eta") and float(parser.get("distill", "eta")) != train.lr:
            raise ConfigError(
                f"[distill] eta = {parser.get('distill', 'eta')} must equal [train] lr = {train.lr}"
            )
        if parser.has_option("distill", "per_class") and int(parser.get("distill", "per_class")) != train.per_class:
            raise ConfigError("[distill] per_class must equal [train] per_class")
    try:
        distill = DistillConfig(eta=train.lr, per_class=max(1, train.per_class), **dvals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[distill] {exc}") from None

    cfg = RunConfig(scenario=scenario, model=model, train=train, distill=distill, timing=timing, source_text=text, **run)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    s = cfg.scenario
    if s.kind not in ("split", "permuted"):
        raise ConfigError(f"[scenario] kind must be split or permuted, got {s.kind!r}")
    if s.dataset not in ("mnist", "fashion-mnist", "blobs"):
        raise ConfigError(f"[scenario] dataset must be mnist, fashion-mnist or blobs, got {s.dataset!r}")
    if s.dataset == "blobs" and s.kind != "split":
        raise ConfigError("blobs only support split scenarios")
    if s.dataset != "blobs" and s.data_dir is None:
        raise ConfigError("[scenario] data_dir is required for image datasets")
    if s.T < 1:
        raise ConfigError("[scenario] T must be >= 1")
    if s.downscale not in (1, 2):
        raise ConfigError("[scenario] downscale must be 1 or 2")
    if not 0 <= s.val_fraction < 1:
        raise ConfigError("[scenario] val_fraction must be in [0, 1)")
    if cfg.model.kind not in ("mlp", "lenet5", "tiny-mlp"):
        raise ConfigError(f"[model] unknown kind {cfg.model.kind!r}")
    bad = [x for x in cfg.strategies if x not in STRATEGIES]
    if bad or not cfg.strategies:
        raise ConfigError(f"[run] strategies must be a non-empty subset of {STRATEGIES}, got {cfg.strategies}")
    if not cfg.seeds:
        raise ConfigError("[run] seeds must not be empty")
    if cfg.train.lr <= 0 or cfg.train.batch_size < 1 or cfg.train.per_class < 0:
        raise ConfigError("[train] lr > 0, batch_size >= 1 and per_class >= 0 are required")
    if cfg.train.dtype not in ("float32", "float64"):
        raise ConfigError("[train] dtype must be float32 or float64")
    if cfg.distill.eta != cfg.train.lr:
        raise ConfigError("distillation learning rate must equal the training learning rate")
    if cfg.timing.repeats < 3:
        raise ConfigError("[timing] repeats must be >= 3")
    if cfg.workers < 1:
        raise ConfigError("[run] workers must be >= 1")


PRESETS = ("toy-blobs", "split-mnist-desk", "permuted-mnist-desk")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {PRESETS}")
    return resources.files("distilled_replay").joinpath("presets", f"{name}.ini").read_text()


def load_config(path_or_preset) -> RunConfig:
    path = Path(path_or_preset)
    if path.exists():
        return parse_config(path.read_text())
    if str(path_or_preset) in PRESETS:
        return parse_config(preset_text(str(path_or_preset)))
    raise ConfigError(f"config file {path} not found (and not a preset name: {PRESETS})")
