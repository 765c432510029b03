"""Run configuration: a versioned JSON key tree with strict validation.

Unknown keys are rejected rather than ignored, so a misspelled
hyperparameter fails loudly. Every section is optional and falls back to the
defaults below. ``RunConfig.from_json(cfg.to_json()) == cfg`` always holds.

Example::

    {
      "schema_version": 1,
      "seed": 0,
      "out": "runs/baseline",
      "dataset": {"preset": "default"},
      "loss": {"tau": 0.5, "eps": 0.1, "alpha": 1.0},
      "training": {"epochs": 10, "steps_per_epoch": 100, "batch_pairs": 128},
      "sweep": {"grid": {"tau": [0.1, 1.0]}, "seeds": [0, 1, 2]}
    }
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError, UsageError
from .losses import VARIANTS, LossConfig
from .synthdata import SyntheticDatasetSpec
from .training import TrainSettings

SCHEMA_VERSION = 1
PRESETS = ("default", "two_feature", "custom")
SWEEP_KEYS = ("tau", "beta", "eps", "alpha")


def _check_type(path, value, kind):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and not math.isfinite(value):
            raise ConfigError(path, "must be finite")
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is bool:
        ok = isinstance(value, bool)
    elif kind is str:
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list)
    if not ok:
        raise ConfigError(path, f"expected {getattr(kind, '__name__', kind)}, got {value!r}")


def _list_of(path, value, kind):
    _check_type(path, value, list)
    for i, v in enumerate(value):
        _check_type(f"{path}[{i}]", v, kind)
    return tuple(float(v) if kind is float else v for v in value)


_LIST_FIELDS = {
    "cardinalities": int,
    "saliences": float,
    "hidden": int,
    "held_features": int,
    "seeds": int,
    "retrieve_eps": float,
}


def _section(cls, path, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}"
        if key not in known:
            raise ConfigError(sub, f"unknown key (allowed: {', '.join(known)})")
        default = known[key].default
        if key in _LIST_FIELDS:
            kwargs[key] = _list_of(sub, value, _LIST_FIELDS[key])
        elif key == "grid":
            kwargs[key] = _grid(sub, value)
        else:
            kind = type(default)
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            _check_type(sub, value, kind)
            kwargs[key] = value
    return cls(**kwargs)


def _grid(path, value):
    if not isinstance(value, dict):
        raise ConfigError(path, "expected an object mapping parameter to a list")
    out = {}
    for k, vs in value.items():
        if k not in SWEEP_KEYS:
            raise ConfigError(f"{path}.{k}", f"not sweepable (allowed: {', '.join(SWEEP_KEYS)})")
        vals = _list_of(f"{path}.{k}", vs, float)
        if not vals:
            raise ConfigError(f"{path}.{k}", "empty value list")
        out[k] = vals
    return out


@dataclass(frozen=True)
class DatasetSection:
    preset: str = "default"
    cardinalities: tuple = (10, 10, 10)
    saliences: tuple = (3.0, 1.0, 0.7)
    code_dim: int = 8
    nuisance_dim: int = 8
    identity_aug_prob: float = 0.2
    jitter_sigma: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class LossSection:
    tau: float = 0.5
    eps: float = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    variant: str = "standard"
    clean_weight: float = 1.0


@dataclass(frozen=True)
class EncoderSection:
    hidden: tuple = (64, 64)
    out_dim: int = 8


@dataclass(frozen=True)
class OptimizerSection:
    lr: float = 1e-3
    weight_decay: float = 1e-6


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 10
    steps_per_epoch: int = 100
    batch_pairs: int = 128
    held_features: tuple = ()
    prenorm_steps: int = 5


@dataclass(frozen=True)
class ProbeSection:
    n_samples: int = 2000
    augment: bool = True


@dataclass(frozen=True)
class AnalysisSection:
    feature: int = 0
    n_samples: int = 1000
    eps_step: float = 0.01
    max_steps: int = 50
    retrieve_eps: tuple = (0.0, 0.25, 0.5, 1.0)
    bank_size: int = 1000


@dataclass(frozen=True)
class SweepSection:
    grid: dict = field(default_factory=dict)
    seeds: tuple = (0,)

    def runs(self, base: "RunConfig"):
        """Cartesian product of the grid with every seed, in a fixed order."""
        keys = [k for k in SWEEP_KEYS if k in self.grid]
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            for seed in self.seeds:
                loss = replace(base.loss, **dict(zip(keys, combo)))
                yield replace(base, loss=loss, seed=seed)


_SECTIONS = {
    "dataset": DatasetSection,
    "loss": LossSection,
    "encoder": EncoderSection,
    "optimizer": OptimizerSection,
    "training": TrainingSection,
    "probe": ProbeSection,
    "analysis": AnalysisSection,
    "sweep": SweepSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    loss: LossSection = field(default_factory=LossSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- parsing -----------------------------------------------------------

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                "schema_version", f"expected {SCHEMA_VERSION}, got {version!r}"
            )
        kwargs = {}
        for key, value in data.items():
            if key == "schema_version":
                continue
            if key in _SECTIONS:
                kwargs[key] = _section(_SECTIONS[key], key, value)
            elif key == "seed":
                _check_type("seed", value, int)
                kwargs[key] = value
            elif key == "out":
                _check_type("out", value, str)
                kwargs[key] = value
            else:
                allowed = ["schema_version", "seed", "out", *_SECTIONS]
                raise ConfigError(key, f"unknown key (allowed: {', '.join(allowed)})")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"malformed JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_json(text)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "seed": self.seed, "out": self.out}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
            if name == "sweep":
                out[name]["grid"] = {k: list(v) for k, v in self.sweep.grid.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    # -- validation and conversion -----------------------------------------

    def validate(self):
        """Check every constraint up front; raise :class:`ConfigError` naming the field."""
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be in [0, 2^64)")
        if not self.out:
            raise ConfigError("out", "must be a non-empty path")
        d = self.dataset
        if d.preset not in PRESETS:
            raise ConfigError("dataset.preset", f"must be one of {PRESETS}")
        try:
            self.dataset_spec()
        except UsageError as exc:
            raise ConfigError("dataset", str(exc)) from exc
        l = self.loss
        if l.variant not in VARIANTS:
            raise ConfigError("loss.variant", f"must be one of {VARIANTS}")
        for name in ("tau",):
            if not getattr(l, name) > 0:
                raise ConfigError(f"loss.{name}", "must be positive")
        for name in ("eps", "alpha", "beta", "clean_weight"):
            if getattr(l, name) < 0:
                raise ConfigError(f"loss.{name}", "must be >= 0")
        try:
            self.loss_config()
        except UsageError as exc:
            raise ConfigError("loss", str(exc)) from exc
        if any(h < 1 for h in self.encoder.hidden) or self.encoder.out_dim < 2:
            raise ConfigError("encoder", "hidden sizes must be >= 1 and out_dim >= 2")
        if not self.optimizer.lr > 0:
            raise ConfigError("optimizer.lr", "must be positive")
        if self.optimizer.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay", "must be >= 0")
        t = self.training
        for name in ("epochs", "steps_per_epoch", "prenorm_steps"):
            if getattr(t, name) < 1:
                raise ConfigError(f"training.{name}", "must be >= 1")
        if t.batch_pairs < 2:
            raise ConfigError("training.batch_pairs", "must be >= 2")
        spec = self.dataset_spec()
        if any(not 0 <= j < spec.n_features for j in t.held_features):
            raise ConfigError("training.held_features", f"indices must lie in [0, {spec.n_features})")
        if len(set(t.held_features)) == spec.n_features:
            raise ConfigError("training.held_features", "cannot hold every feature")
        if self.probe.n_samples < 20:
            raise ConfigError("probe.n_samples", "must be >= 20")
        a = self.analysis
        if not 0 <= a.feature < spec.n_features:
            raise ConfigError("analysis.feature", f"must lie in [0, {spec.n_features})")
        if a.n_samples < 20 or a.bank_size < 1:
            raise ConfigError("analysis", "n_samples must be >= 20 and bank_size >= 1")
        if not a.eps_step > 0 or a.max_steps < 1:
            raise ConfigError("analysis", "eps_step must be positive and max_steps >= 1")
        if any(e < 0 for e in a.retrieve_eps):
            raise ConfigError("analysis.retrieve_eps", "must be >= 0")
        if not self.sweep.seeds:
            raise ConfigError("sweep.seeds", "need at least one seed")
        for k, vals in self.sweep.grid.items():
            for v in vals:
                try:
                    replace(self, loss=replace(self.loss, **{k: v})).loss_config()
                except UsageError as exc:
                    raise ConfigError(f"sweep.grid.{k}", str(exc)) from exc

    def dataset_spec(self) -> SyntheticDatasetSpec:
        d = self.dataset
        if d.preset == "default":
            return SyntheticDatasetSpec(seed=d.seed)
        if d.preset == "two_feature":
            return SyntheticDatasetSpec(cardinalities=(10, 10), saliences=(4.0, 1.0), seed=d.seed)
        return SyntheticDatasetSpec(
            cardinalities=d.cardinalities,
            saliences=d.saliences,
            code_dim=d.code_dim,
            nuisance_dim=d.nuisance_dim,
            identity_aug_prob=d.identity_aug_prob,
            jitter_sigma=d.jitter_sigma,
            seed=d.seed,
        )

    def loss_config(self) -> LossConfig:
        l = self.loss
        return LossConfig(
            tau=l.tau,
            eps_pos=l.eps,
            eps_neg=l.eps,
            alpha=l.alpha,
            beta=l.beta,
            variant=l.variant,
            clean_weight=l.clean_weight,
        )

    def train_settings(self) -> TrainSettings:
        t = self.training
        return TrainSettings(
            hidden=self.encoder.hidden,
            out_dim=self.encoder.out_dim,
            lr=self.optimizer.lr,
            weight_decay=self.optimizer.weight_decay,
            batch_pairs=t.batch_pairs,
            steps=t.epochs * t.steps_per_epoch,
            held_features=t.held_features,
            prenorm_steps=t.prenorm_steps,
        )

    def run_id(self) -> str:
        l = self.loss
        return (
            f"tau={l.tau!r}_beta={l.beta!r}_eps={l.eps!r}_alpha={l.alpha!r}"
            f"_{l.variant}_seed={self.seed}"
        )
