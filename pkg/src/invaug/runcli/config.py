"""Run configuration: a single versioned YAML document drives every phase.

Strict parsing: unknown keys are errors, so a typo cannot silently change an
experiment. A config may carry a `grid` of named variants; each variant is a
deep-merge of overrides onto the base document.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1


class ConfigError(Exception):
    pass


def _take(section: dict, name: str, cls):
    """Build a dataclass from a dict section, rejecting unknown keys."""
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(section).__name__}")
    known = {f.name for f in fields(cls)}
    renames = {"lambda": "lam"}
    cleaned = {}
    for key, value in section.items():
        key = renames.get(key, key)
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {name!r} (known: {sorted(known)})")
        cleaned[key] = value
    try:
        return cls(**cleaned)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


@dataclass
class SplitCfg:
    scheme: str = "by-class-range"
    private: list = field(default_factory=lambda: [0, 4])
    public: list = field(default_factory=lambda: [5, 9])

    def __post_init__(self) -> None:
        if self.scheme not in ("by-class-range", "by-identity-count"):
            raise ValueError(f"unknown split scheme {self.scheme!r}")


@dataclass
class TargetCfg:
    arch: str = "small-cnn-3"
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 128
    optimizer: str = "adam"
    label_smoothing: float = 0.2
    weight_decay: float = 0.0


@dataclass
class DefenseCfg:
    gamma: float = 0.3
    mix_ratio: float = 0.5
    warmup_epochs: int = 4
    epochs: int = 18
    lr: float = 1e-3
    label_smoothing: float = 0.2


@dataclass
class ShadowCfg:
    arch: str = "residual-18"
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 128
    temperature: float = 1.0


@dataclass
class EvaluatorCfg:
    arch: str = "vgg-11-like"
    epochs: int = 12
    lr: float = 1e-3
    batch_size: int = 128
    label_smoothing: float = 0.0
    robust_gamma: float | None = None  # adversarially trained evaluator when set


@dataclass
class AttackCfg:
    k: int = 3
    epsilon: float = 0.2
    max_rounds: int = 200
    direction_space: str = "pixel-basis"
    query_oracle: str = "target"  # target | shadow
    max_images: int | None = None

    def __post_init__(self) -> None:
        if self.query_oracle not in ("target", "shadow"):
            raise ValueError(f"query_oracle must be target or shadow, got {self.query_oracle!r}")


@dataclass
class InversionCfg:
    arch: str = "inversion-decoder"
    lam: float = 0.0
    recon_metric: str = "mse"
    epochs: int = 22
    lr: float = 1e-3
    batch_size: int = 128
    augment: bool = False
    adv_ratio: float = 1.0
    grid_every: int = 0  # periodic reconstruction grids (0 = off)


@dataclass
class ProbeCfg:
    noise_levels: list = field(default_factory=lambda: [0.0, 0.02, 0.05, 0.1, 0.2])
    k_values: list = field(default_factory=lambda: [1, 2, 3, 4])
    trials: int = 5
    samples: int = 200


@dataclass
class EvalCfg:
    eval_count: int = 1000
    reference_error: float = 0.882
    convention: str = "auto"  # auto | mean-per-pixel | mean-per-image-sum
    probe: bool = False


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    name: str = "run"
    seed: int = 7
    dataset: str = "synth-digits"
    classes: int | None = None  # model output width; default: all source classes
    data_root: str | None = None
    out_dir: str = "runs/run"
    phases: list = field(
        default_factory=lambda: [
            "split",
            "train-target",
            "distill",
            "gen-adv",
            "train-inversion",
            "evaluate",
        ]
    )
    deterministic: bool = True
    workers: int = 1
    artifact_cache: str | None = None  # shared content-addressed store; default <out_dir>/cache
    split: SplitCfg = field(default_factory=SplitCfg)
    target: TargetCfg = field(default_factory=TargetCfg)
    defense: DefenseCfg | None = None
    shadow: ShadowCfg = field(default_factory=ShadowCfg)
    evaluators: list = field(default_factory=lambda: [EvaluatorCfg()])
    attack: AttackCfg = field(default_factory=AttackCfg)
    inversion: InversionCfg = field(default_factory=InversionCfg)
    evaluate: EvalCfg = field(default_factory=EvalCfg)
    probe: ProbeCfg = field(default_factory=ProbeCfg)

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)


_SECTIONS = {
    "split": SplitCfg,
    "target": TargetCfg,
    "defense": DefenseCfg,
    "shadow": ShadowCfg,
    "attack": AttackCfg,
    "inversion": InversionCfg,
    "evaluate": EvalCfg,
    "probe": ProbeCfg,
}

_SCALAR_KEYS = {
    "version",
    "name",
    "seed",
    "dataset",
    "classes",
    "data_root",
    "out_dir",
    "phases",
    "deterministic",
    "workers",
    "artifact_cache",
}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    doc = dict(doc)
    doc.pop("grid", None)
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    unknown = set(doc) - _SCALAR_KEYS - set(_SECTIONS) - {"evaluators"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {k: doc[k] for k in _SCALAR_KEYS if k in doc}
    for name, cls in _SECTIONS.items():
        if name in doc:
            if name == "defense" and doc[name] is None:
                kwargs[name] = None
            else:
                kwargs[name] = _take(doc[name], name, cls)
    if "evaluators" in doc:
        if not isinstance(doc["evaluators"], list) or not doc["evaluators"]:
            raise ConfigError("evaluators must be a non-empty list")
        kwargs["evaluators"] = [
            _take(e, f"evaluators[{i}]", EvaluatorCfg) for i, e in enumerate(doc["evaluators"])
        ]
    try:
        cfg = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    bad_phases = set(cfg.phases) - {
        "split",
        "train-target",
        "distill",
        "gen-adv",
        "train-inversion",
        "evaluate",
    }
    if bad_phases:
        raise ConfigError(f"unknown phases: {sorted(bad_phases)}")
    return cfg


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_document(path: str | Path) -> dict:
    """Load a YAML config by path, or by preset name (shipped presets)."""
    p = Path(path)
    if not p.exists():
        preset = resources.files("invaug").joinpath(f"presets/{path}.yaml")
        if preset.is_file():
            return yaml.safe_load(preset.read_text())
        raise ConfigError(f"config file {path!r} not found (and no preset of that name)")
    with open(p) as f:
        return yaml.safe_load(f)


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    doc = load_document(path)
    if overrides:
        doc = _deep_merge(doc, overrides)
    return parse_config(doc)


def grid_variants(path_or_doc, overrides: dict | None = None) -> list[tuple[str, RunConfig]]:
    """Expand a config's grid into named variant configs (base if no grid)."""
    doc = path_or_doc if isinstance(path_or_doc, dict) else load_document(path_or_doc)
    if overrides:
        doc = _deep_merge(doc, overrides)
    grid = doc.get("grid")
    if not grid:
        cfg = parse_config(doc)
        return [(cfg.name, cfg)]
    variants = []
    for entry in grid:
        if "name" not in entry:
            raise ConfigError("each grid entry needs a name")
        patch = {k: v for k, v in entry.items() if k != "name"}
        vdoc = _deep_merge(doc, patch)
        vdoc["name"] = entry["name"]
        variants.append((entry["name"], parse_config(vdoc)))
    names = [n for n, _ in variants]
    if len(names) != len(set(names)):
        raise ConfigError("grid variant names must be unique")
    return variants
