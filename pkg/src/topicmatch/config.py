"""Run configuration: one YAML/JSON document covering data, model, evaluation and paths."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import SynthConfig
from .nvtm import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_test: int = 200
    candidate_size: int = 200
    n_plausible: int = 50
    n_popular: int = 50
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    mr_mode: str = "mean"
    scorers: list[str] = field(default_factory=lambda: ["nvtm", "tfidf"])
    n_references: int = 5
    seed: int | None = None

    def validate(self):
        if self.n_test < 1:
            raise ConfigError("eval.n_test must be positive")
        if self.mr_mode not in ("mean", "best"):
            raise ConfigError(f"eval.mr_mode must be mean|best, got {self.mr_mode!r}")
        bad = set(self.scorers) - {"nvtm", "tfidf"}
        if bad or not self.scorers:
            raise ConfigError(f"eval.scorers must be a nonempty subset of nvtm|tfidf: {bad}")


@dataclass
class Paths:
    data_dir: str = "data"
    out_dir: str = "run"

    def data(self, name):
        return Path(self.data_dir) / name

    def out(self, name):
        return Path(self.out_dir) / name


@dataclass
class RunConfig:
    seed: int = 0
    vocab_cap: int = 30000
    n_supervised: int = 500
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)

    def validate(self):
        if self.vocab_cap < 1:
            raise ConfigError("vocab_cap must be >= 1")
        if self.n_supervised < 0:
            raise ConfigError("n_supervised must be nonnegative")
        try:
            self.synth.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.eval.validate()

    @property
    def eval_seed(self) -> int:
        return self.seed if self.eval.seed is None else self.eval.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        if k == "doc_length_range":
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    sections = {"synth": SynthConfig, "train": TrainConfig, "eval": EvalConfig, "paths": Paths}
    raw = {k: data.pop(k, None) for k in sections}
    top = _build(RunConfig, data, "config")
    for name, cls in sections.items():
        setattr(top, name, _build(cls, raw[name], name))
    # component seeds default to the master seed
    if raw["synth"] is None or "seed" not in (raw["synth"] or {}):
        top.synth.seed = top.seed
    if raw["train"] is None or "seed" not in (raw["train"] or {}):
        top.train.seed = top.seed
    top.validate()
    return top


def load_config(path=None, seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
    if seed is not None:
        data = dict(data)
        data["seed"] = seed
        for sec in ("synth", "train"):
            if isinstance(data.get(sec), dict):
                data[sec] = {k: v for k, v in data[sec].items() if k != "seed"}
    return from_dict(data)
