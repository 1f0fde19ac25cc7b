"""Experiment configuration: parsing, defaults, validation and serialization."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..data.registry import get_dataset_info
from ..data.streams import TaskSequence, parse_sequence
from ..evaluation.embeddings import config_hash
from ..exceptions import ContrepError, ValidationError
from ..models.encoder import EncoderConfig, ProjectorConfig
from ..objectives import ObjectiveConfig
from ..strategies import StrategyConfig, check_compatible
from ..training import TrainLoopConfig

PROFILES = {
    "full": {
        "loop": {"epochs_first": 200, "epochs_rest": 100, "batch_size": 256},
        "data": {"train_per_class": None, "test_per_class": None},
    },
    "desk": {
        "loop": {"epochs_first": 30, "epochs_rest": 20, "batch_size": 256},
        "data": {"train_per_class": 200, "test_per_class": 100},
    },
    "custom": {"loop": {}, "data": {}},
}


@dataclass(frozen=True)
class DataOptions:
    root: str | None = None
    train_per_class: int | None = None
    test_per_class: int | None = None
    subsample_seed: int = 0


@dataclass(frozen=True)
class EvalOptions:
    k: int = 20
    temperature: float = 0.07
    probes: tuple[str, ...] = ()
    task_aware: bool = True
    cka_max_samples: int = 10000
    cka_seed: int = 0
    spectra_split: str = "test"
    nmc: bool = True
    dump_embeddings: str = "test"  # none | test | all
    batch_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "probes", tuple(self.probes))
        if self.spectra_split not in ("train", "test"):
            raise ValueError("spectra_split must be 'train' or 'test'")
        if self.dump_embeddings not in ("none", "test", "all"):
            raise ValueError("dump_embeddings must be one of none|test|all")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    sequence: str
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    profile: str = "desk"
    loop: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    data: DataOptions = field(default_factory=DataOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    seeds: tuple[int, ...] = (0, 1, 2)
    sequence_seed: int = 0
    output_dir: str = "runs"
    name: str | None = None

    def task_sequence(self) -> TaskSequence:
        return parse_sequence(self.sequence, seed=self.sequence_seed)

    def loop_for_seed(self, seed: int) -> TrainLoopConfig:
        return TrainLoopConfig(**{**asdict(self.loop), "seed": int(seed)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["eval"]["probes"] = list(self.eval.probes)
        d["loop"].pop("seed")
        d["projector"].pop("enabled")
        d["projector"].pop("output_l2_normalize")
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        d = self.to_dict()
        for key in ("output_dir", "name", "seeds"):
            d.pop(key)
        d["data"].pop("root")
        return config_hash(d)

    @property
    def run_name(self) -> str:
        if self.name:
            return self.name
        seq = self.sequence.replace("->", "-").replace("/", "x")
        return f"{seq}_{self.objective.name}_{self.strategy.name}_{self.digest()[:8]}"

    @property
    def probe_datasets(self) -> list[str]:
        return list(dict.fromkeys([*self.task_sequence().datasets, *self.eval.probes]))


_SECTIONS = {
    "objective": ObjectiveConfig,
    "strategy": StrategyConfig,
    "loop": TrainLoopConfig,
    "encoder": EncoderConfig,
    "projector": ProjectorConfig,
    "data": DataOptions,
    "eval": EvalOptions,
}
_HIDDEN = {"loop": {"seed"}, "projector": {"enabled", "output_l2_normalize"}}
_TOP_LEVEL = {f.name for f in fields(ExperimentConfig)}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping, fill profile defaults and build the config.

    Raises :class:`ValidationError` listing every offending field.
    """
    if not isinstance(raw, dict):
        raise ValidationError({"config": "top level must be a mapping"})
    errors: dict[str, str] = {}
    raw = copy.deepcopy(raw)
    if isinstance(raw.get("objective"), str):
        raw["objective"] = {"name": raw["objective"]}
    if isinstance(raw.get("strategy"), str):
        raw["strategy"] = {"name": raw["strategy"]}

    for key in sorted(set(raw) - _TOP_LEVEL):
        errors[key] = "unknown key"
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        errors["profile"] = f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}"
        profile = "custom"
    merged = _merge(PROFILES[profile], {k: v for k, v in raw.items() if k in _SECTIONS})

    built = {}
    for section, cls in _SECTIONS.items():
        values = merged.get(section, {}) or {}
        if not isinstance(values, dict):
            errors[section] = "must be a mapping"
            continue
        allowed = {f.name for f in fields(cls)} - _HIDDEN.get(section, set())
        for key in sorted(set(values) - allowed):
            errors[f"{section}.{key}"] = "unknown key"
        values = {k: v for k, v in values.items() if k in allowed}
        try:
            built[section] = cls(**values)
        except (TypeError, ValueError) as exc:
            errors[section] = str(exc)

    if "sequence" not in raw:
        errors["sequence"] = "required"
    else:
        try:
            seq = parse_sequence(str(raw["sequence"]), seed=int(raw.get("sequence_seed", 0)))
            sizes = {get_dataset_info(d).image_size for d in seq.datasets}
            if len(sizes) > 1:
                errors["sequence"] = f"datasets have different resolutions {sorted(sizes)}"
        except (ContrepError, ValueError) as exc:
            errors["sequence"] = str(exc)
    for probe in (built["eval"].probes if "eval" in built else ()):
        try:
            get_dataset_info(probe)
        except ContrepError as exc:
            errors["eval.probes"] = str(exc)

    if "objective" in built and "strategy" in built:
        problem = check_compatible(built["objective"].name, built["strategy"].name)
        if problem:
            errors["strategy.name"] = problem

    seeds = raw.get("seeds", [0, 1, 2])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, (list, tuple)) or not seeds or not all(isinstance(s, int) for s in seeds):
        errors["seeds"] = "must be a non-empty list of integers"
    elif len(set(seeds)) != len(seeds):
        errors["seeds"] = "seeds must be distinct"

    if errors:
        raise ValidationError(errors)

    if "encoder" not in raw or "input_size" not in (raw.get("encoder") or {}):
        size = get_dataset_info(seq.datasets[0]).image_size
        enc = asdict(built["encoder"])
        enc.update(input_size=size, feature_dim=None)
        built["encoder"] = EncoderConfig(**enc)

    try:
        return ExperimentConfig(
            sequence=str(raw["sequence"]),
            profile=profile,
            seeds=tuple(int(s) for s in seeds),
            sequence_seed=int(raw.get("sequence_seed", 0)),
            output_dir=str(raw.get("output_dir", "runs")),
            name=raw.get("name"),
            **built,
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError({"config": str(exc)}) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError({"config": f"file not found: {path}"})
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError({"config": f"cannot parse {path}: {exc}"}) from None
    return config_from_dict(raw or {})


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``a.b=value`` overrides (values parsed as YAML scalars/lists)."""
    raw = copy.deepcopy(raw)
    for item in assignments:
        if "=" not in item:
            raise ValidationError({item: "override must look like key=value"})
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if isinstance(node.get(part), str):
                node[part] = {"name": node[part]}
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path
