"""Experiment configuration: one JSON document with one section per stage.

Unknown keys are rejected at every level so a typo fails loudly instead of
silently falling back to a default.  Flags on the command line cover paths,
seeds and per-run overrides; everything defining the experiment lives here.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import CorpusSpec
from .metrics import MetricConfig
from .model import ArchConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def dataclass_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


@dataclass
class SplitConfig:
    """Held-out portion of the corpus and the trial list drawn from it."""

    eval_speakers: int = 8
    n_target: int = 400
    n_nontarget: int = 1600
    trial_seed: int = 777

    def validate(self) -> None:
        if self.eval_speakers < 0:
            raise ConfigError("eval_speakers must be nonnegative")
        if self.n_target < 1 or self.n_nontarget < 1:
            raise ConfigError("trial counts must be positive")


@dataclass
class BackendConfig:
    lda_dim: int | None = None       # default: min(100, classes - 1, embedding dim)
    plda_iterations: int = 15

    def validate(self) -> None:
        if self.plda_iterations < 1:
            raise ConfigError("plda_iterations must be >= 1")
        if self.lda_dim is not None and self.lda_dim < 1:
            raise ConfigError("lda_dim must be >= 1 when given")


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        kwargs = {}
        for name, fld in sections.items():
            if name in data:
                kwargs[name] = dataclass_from_dict(fld.default_factory, data[name], name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def validate(self) -> None:
        self.corpus.validate()
        self.split.validate()
        self.backend.validate()
        train_speakers = self.corpus.num_speakers - self.split.eval_speakers
        if train_speakers < 2:
            raise ConfigError("corpus must keep at least 2 training speakers after the split")
        if self.arch.num_speakers is None:
            self.arch.num_speakers = train_speakers
        elif self.arch.num_speakers != train_speakers:
            raise ConfigError(f"arch.num_speakers={self.arch.num_speakers} conflicts with "
                              f"{train_speakers} training speakers from corpus/split")
        if self.arch.input_dim != self.corpus.feature_dim:
            raise ConfigError(f"arch.input_dim={self.arch.input_dim} does not match "
                              f"corpus.feature_dim={self.corpus.feature_dim}")
        self.arch.validate()
        self.train.validate()

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out["arch"] = self.arch.to_dict()
        for section in ("corpus", "metrics"):
            for key, value in out[section].items():
                if isinstance(value, tuple):
                    out[section][key] = list(value)
        return out

    def resolved_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)
