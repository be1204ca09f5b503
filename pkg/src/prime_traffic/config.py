"""Run configuration: a strict JSON document with profiles and dotted overrides.

Resolution order, later wins:

1. built-in defaults (the dataclass defaults below)
2. the selected profile (`desk` or `full`)
3. `defaults.json` in the platform config directory, if present
4. the user's config file
5. `--set dotted.path=value` overrides

Validation collects every problem before raising one `ConfigError`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import types
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from .common import DEFAULT_N_B, DEFAULT_N_P, HDR_FIELDS, get_config_dir, to_jsonable
from .errors import ConfigError
from .incremental import EwcConfig, LwfConfig, PrimeConfig, StallDetector
from .model import ModelSpec
from .plasticity import ExpansionConfig, PlasticityConfig

log = logging.getLogger(__name__)

METHODS = ("base", "lwf", "ewc", "prime")

PROFILES: dict[str, dict] = {
    "desk": {
        "model": {"d_model": 64, "heads": 2, "hidden": [64, 32], "dropout": 0.2},
        "train": {"batch_size": 128, "epochs": 15},
    },
    "full": {
        "model": {"d_model": 912, "heads": 2, "hidden": [256, 64], "dropout": 0.2},
        "train": {"batch_size": 512, "epochs": 30},
    },
}


@dataclass
class ScenarioSection:
    """Where the data comes from and how it is staged.

    `source` is "synthetic" or the path of a dataset file.
    """

    source: str = "synthetic"
    num_classes: int = 7
    similarity: float = 0.2
    samples_per_class: int = 200
    data_seed: int = 0
    n_b: int = DEFAULT_N_B
    n_p: int = DEFAULT_N_P
    plan: list = field(default_factory=lambda: [4, 3])
    split: list[float] = field(default_factory=lambda: [0.75, 0.10, 0.15])

    def check(self) -> list[str]:
        problems = []
        if self.source == "synthetic":
            if self.num_classes < 2:
                problems.append(f"scenario.num_classes: must be >= 2, got {self.num_classes}")
            if self.samples_per_class < 1:
                problems.append(f"scenario.samples_per_class: must be >= 1, got {self.samples_per_class}")
        if not 0.0 <= self.similarity <= 1.0:
            problems.append(f"scenario.similarity: must lie in [0, 1], got {self.similarity}")
        if self.n_b < 1 or self.n_p < 1:
            problems.append(f"scenario.n_b/n_p: must be positive, got {self.n_b}/{self.n_p}")
        if len(self.split) != 3 or min(self.split, default=-1) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            problems.append(f"scenario.split: need three non-negative fractions summing to 1, got {self.split}")
        problems += self._check_plan()
        return problems

    def _check_plan(self) -> list[str]:
        plan = self.plan
        if not plan:
            return ["scenario.plan: must name at least one stage"]
        if all(isinstance(p, int) and not isinstance(p, bool) for p in plan):
            problems = [f"scenario.plan: stage sizes must be positive, got {plan}"] if min(plan) < 1 else []
            if self.source == "synthetic" and sum(plan) != self.num_classes:
                problems.append(f"scenario.plan: stages cover {sum(plan)} classes but num_classes is {self.num_classes}")
            return problems
        if all(isinstance(p, list) and p and all(isinstance(c, int) for c in p) for p in plan):
            flat = [c for p in plan for c in p]
            problems = []
            if len(flat) != len(set(flat)):
                problems.append("scenario.plan: a class appears in more than one stage")
            if self.source == "synthetic" and (unknown := sorted(c for c in flat if not 0 <= c < self.num_classes)):
                problems.append(f"scenario.plan: unknown classes {unknown}")
            return problems
        return [f"scenario.plan: expected stage sizes or lists of class ids, got {plan}"]


@dataclass
class ModelSection:
    token_width: int = 16
    d_model: int = 64
    heads: int = 2
    ff_width: int = 0
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    dropout: float = 0.2

    def check(self) -> list[str]:
        problems = []
        if self.token_width < 1 or self.d_model < 1 or self.ff_width < 0:
            problems.append("model: token_width and d_model must be positive, ff_width non-negative")
        if self.heads < 1 or self.d_model % self.heads:
            problems.append(f"model.heads: {self.heads} heads must divide d_model {self.d_model}")
        if not self.hidden or min(self.hidden) < 1:
            problems.append(f"model.hidden: need at least one positive width, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"model.dropout: must lie in [0, 1), got {self.dropout}")
        return problems


@dataclass
class TrainSection:
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    reg_coef: float = 1e-4

    def check(self) -> list[str]:
        problems = []
        if self.epochs < 0:
            problems.append(f"train.epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"train.batch_size: must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"train.learning_rate: must be > 0, got {self.learning_rate}")
        if not 0.0 < self.lr_factor < 1.0:
            problems.append(f"train.lr_factor: must lie in (0, 1), got {self.lr_factor}")
        if self.lr_patience < 1:
            problems.append(f"train.lr_patience: must be >= 1, got {self.lr_patience}")
        if self.reg_coef < 0:
            problems.append(f"train.reg_coef: must be >= 0, got {self.reg_coef}")
        return problems


@dataclass
class LwfSection:
    lambda0: float = 1.0
    temperature: float = 2.0

    def check(self) -> list[str]:
        problems = []
        if self.lambda0 < 0:
            problems.append(f"lwf.lambda0: must be >= 0, got {self.lambda0}")
        if self.temperature <= 0:
            problems.append(f"lwf.temperature: must be > 0, got {self.temperature}")
        return problems


@dataclass
class StallSection:
    threshold: float | None = None
    patience: int = 5
    min_rel_improvement: float = 0.01

    def check(self) -> list[str]:
        problems = []
        if self.threshold is not None and self.threshold <= 0:
            problems.append(f"stall.threshold: must be > 0 or null, got {self.threshold}")
        if self.patience < 1:
            problems.append(f"stall.patience: must be >= 1, got {self.patience}")
        if self.min_rel_improvement < 0:
            problems.append(f"stall.min_rel_improvement: must be >= 0, got {self.min_rel_improvement}")
        return problems


@dataclass
class EwcSection:
    lambda_ewc: float = 100.0
    fisher_samples: int = 200

    def check(self) -> list[str]:
        problems = []
        if self.lambda_ewc < 0:
            problems.append(f"ewc.lambda_ewc: must be >= 0, got {self.lambda_ewc}")
        if self.fisher_samples < 1:
            problems.append(f"ewc.fisher_samples: must be >= 1, got {self.fisher_samples}")
        return problems


@dataclass
class PlasticitySection:
    omega1: float = 0.8
    omega2: float = 0.2
    trigger: float = 0.87
    alpha: float = 0.3
    bins: int = 16
    layer: int | None = 0
    seed: int = 0
    probe_size: int = 256

    def check(self) -> list[str]:
        problems = []
        if self.omega1 < 0 or self.omega2 < 0:
            problems.append(f"plasticity.omega1/omega2: must be >= 0, got {self.omega1}/{self.omega2}")
        if self.bins < 2:
            problems.append(f"plasticity.bins: must be >= 2, got {self.bins}")
        if self.alpha < 0:
            problems.append(f"plasticity.alpha: must be >= 0, got {self.alpha}")
        if self.layer is not None and self.layer < 0:
            problems.append(f"plasticity.layer: must be >= 0 or null, got {self.layer}")
        if self.probe_size < 1:
            problems.append(f"plasticity.probe_size: must be >= 1, got {self.probe_size}")
        return problems


@dataclass
class ExpansionSection:
    factors: list[float] = field(default_factory=lambda: [1.25, 1.5, 2.0])
    safe: float = 0.80
    eps0: float = 1e-3

    def check(self) -> list[str]:
        problems = []
        if not self.factors or min(self.factors) <= 1.0:
            problems.append(f"expansion.factors: need at least one factor > 1, got {self.factors}")
        if not 0.0 < self.safe <= 1.0:
            problems.append(f"expansion.safe: must lie in (0, 1], got {self.safe}")
        if self.eps0 < 0:
            problems.append(f"expansion.eps0: must be >= 0, got {self.eps0}")
        return problems


SECTIONS: dict[str, type] = {
    "scenario": ScenarioSection,
    "model": ModelSection,
    "train": TrainSection,
    "lwf": LwfSection,
    "stall": StallSection,
    "ewc": EwcSection,
    "plasticity": PlasticitySection,
    "expansion": ExpansionSection,
}
TOP_LEVEL = {"profile", "methods", "seeds", "workers", *SECTIONS}


@dataclass
class RunConfig:
    """A fully validated experiment configuration."""

    profile: str = "desk"
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    lwf: LwfSection = field(default_factory=LwfSection)
    stall: StallSection = field(default_factory=StallSection)
    ewc: EwcSection = field(default_factory=EwcSection)
    plasticity: PlasticitySection = field(default_factory=PlasticitySection)
    expansion: ExpansionSection = field(default_factory=ExpansionSection)

    # ─── Module configs ──────────────────────────────────────────────────────

    @property
    def input_dim(self) -> int:
        return self.scenario.n_b + HDR_FIELDS * self.scenario.n_p

    def model_spec(self, input_dim: int | None = None) -> ModelSpec:
        m = self.model
        return ModelSpec(
            input_dim=input_dim or self.input_dim,
            token_width=m.token_width,
            d_model=m.d_model,
            heads=m.heads,
            ff_width=m.ff_width,
            hidden=list(m.hidden),
            dropout=m.dropout,
        )

    def lwf_config(self) -> LwfConfig:
        t = self.train
        return LwfConfig(
            lambda0=self.lwf.lambda0,
            temperature=self.lwf.temperature,
            reg_coef=t.reg_coef,
            max_epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            lr_factor=t.lr_factor,
            lr_patience=t.lr_patience,
            stall=StallDetector(self.stall.threshold, self.stall.patience, self.stall.min_rel_improvement),
        )

    def ewc_config(self) -> EwcConfig:
        return EwcConfig(lambda_ewc=self.ewc.lambda_ewc, fisher_samples=self.ewc.fisher_samples)

    def plasticity_config(self) -> PlasticityConfig:
        p = self.plasticity
        return PlasticityConfig(p.omega1, p.omega2, p.trigger, p.alpha, p.bins, p.layer, p.seed, p.probe_size)

    def prime_config(self) -> PrimeConfig:
        e = self.expansion
        return PrimeConfig(
            lwf=self.lwf_config(),
            plasticity=self.plasticity_config(),
            expansion=ExpansionConfig(factors=tuple(e.factors), safe=e.safe, eps0=e.eps0),
        )

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def fingerprint(self, data_digest: str = "") -> str:
        """Identity of the experimental scenario: data, staging, splits and seeds."""
        payload = json.dumps(
            {"scenario": to_jsonable(self.scenario), "seeds": self.seeds, "data": data_digest}, sort_keys=True
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ─── Validation ──────────────────────────────────────────────────────────────


def _type_name(tp: Any) -> str:
    return getattr(tp, "__name__", str(tp)).replace("typing.", "")


def _matches(value: Any, tp: Any) -> bool:
    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        return any(_matches(value, arg) for arg in get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if tp is list or origin is list:
        if not isinstance(value, list):
            return False
        args = get_args(tp)
        return not args or all(_matches(v, args[0]) for v in value)
    return True


def _coerce(value: Any, tp: Any) -> Any:
    if tp is float or (get_origin(tp) is list and get_args(tp) == (float,)):
        return [float(v) for v in value] if isinstance(value, list) else float(value)
    if get_origin(tp) in (Union, types.UnionType) and float in get_args(tp) and value is not None:
        return float(value)
    return copy.deepcopy(value)


def _build_section(name: str, cls: type, data: Any, problems: list[str]) -> Any:
    if not isinstance(data, dict):
        problems.append(f"{name}: expected an object, got {type(data).__name__}")
        return cls()
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in sorted(set(data) - known):
        problems.append(f"{name}.{key}: unknown key")
    kwargs = {}
    for key in known & set(data):
        if _matches(data[key], hints[key]):
            kwargs[key] = _coerce(data[key], hints[key])
        else:
            problems.append(f"{name}.{key}: expected {_type_name(hints[key])}, got {json.dumps(data[key])}")
    section = cls(**kwargs)
    if hasattr(section, "check"):
        problems += section.check()
    return section


def validate(doc: dict) -> RunConfig:
    """Turn a merged config document into a `RunConfig`.

    Raises:
        ConfigError: Listing every problem found.
    """
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(f"config: expected a JSON object, got {type(doc).__name__}")

    for key in sorted(set(doc) - TOP_LEVEL):
        problems.append(f"{key}: unknown key")

    profile = doc.get("profile", "desk")
    if profile not in PROFILES:
        problems.append(f"profile: expected one of {sorted(PROFILES)}, got {json.dumps(profile)}")

    methods = doc.get("methods", list(METHODS))
    if isinstance(methods, str):
        methods = [methods]
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        problems.append(f"methods: expected a non-empty list drawn from {list(METHODS)}, got {json.dumps(methods)}")
        methods = list(METHODS)

    seeds = doc.get("seeds", [0, 1, 2, 3, 4])
    if not _matches(seeds, list[int]) or not seeds or min(seeds) < 0:
        problems.append(f"seeds: expected a non-empty list of non-negative integers, got {json.dumps(seeds)}")
        seeds = [0]
    elif len(set(seeds)) != len(seeds):
        problems.append(f"seeds: duplicate seeds in {seeds}")

    workers = doc.get("workers", 1)
    if not _matches(workers, int) or workers < 1:
        problems.append(f"workers: expected a positive integer, got {json.dumps(workers)}")
        workers = 1

    sections = {name: _build_section(name, cls, doc.get(name, {}), problems) for name, cls in SECTIONS.items()}
    if problems:
        raise ConfigError(problems)
    return RunConfig(profile=profile, methods=list(dict.fromkeys(methods)), seeds=seeds, workers=workers, **sections)


# ─── Loading ─────────────────────────────────────────────────────────────────


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """Split `a.b.c=value` into its path and JSON value (bare words are strings)."""
    if "=" not in item:
        raise ConfigError(f"--set {item}: expected dotted.path=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip().split("."), value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        path, value = parse_override(item)
        target = doc
        for part in path[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"--set {item}: `{part}` is not a section")
        target[path[-1]] = value
    return doc


def read_document(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config file `{path}`: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"`{path}` is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"`{path}`: expected a JSON object, got {type(data).__name__}")
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Resolve and validate a run configuration.

    Args:
        path: User config file (optional).
        overrides: `dotted.path=value` items applied last.
    """
    user = read_document(path) if path else {}
    user = apply_overrides(user, overrides or [])

    defaults_file = get_config_dir() / "defaults.json"
    site: dict = {}
    if defaults_file.exists():
        try:
            site = read_document(defaults_file)
        except ConfigError as e:
            log.warning(f"Ignoring {defaults_file}: {e}")

    profile = user.get("profile", site.get("profile", "desk"))
    doc = deep_merge(PROFILES.get(profile, {}), site)
    doc = deep_merge(doc, user)
    return validate(doc)


def config_from_dict(doc: dict) -> RunConfig:
    """Validate a document on top of its profile, without reading any file."""
    return validate(deep_merge(PROFILES.get(doc.get("profile", "desk"), {}), doc))
