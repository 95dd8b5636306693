"""Run configuration: one JSON document per run, flags override leaf keys.

The top-level ``seed`` is the only seed; it is pushed into the data spec,
the model initialiser and every training config when they are built, so
sub-sections carry no seed keys of their own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from mope.distill import DistillConfig
from mope.evaluation import Objective
from mope.model import ModelConfig
from mope.pruning import PruneTarget, StageConfig
from mope.scoring import ImportanceMetric, ScoreConfig, UsageError, default_workers
from mope.workbench.data import SyntheticSpec


class RunConfigError(UsageError):
    pass


@dataclass(frozen=True)
class ArchSection:
    d: int = 64
    n_heads: int = 4
    d_ff: int | None = None
    n_layers_v: int = 4
    n_layers_t: int = 4
    e: int = 32


@dataclass(frozen=True)
class ScoreSection:
    n_groups: int = 8
    objective: str = Objective.RECALL_MEAN.value
    workers: int | None = None
    importance_batch: int = 64
    split: str = "val"
    kinds: tuple[str, ...] = ("head", "group", "layer")


@dataclass(frozen=True)
class TargetSection:
    width: float = 0.5
    depth: int | None = None
    budget: int | None = None
    mode: str = "uniform"


def _no_seed(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "seed"}


TEACHER_DEFAULT = DistillConfig(lr=2e-3, epochs=50)
STUDENT_DEFAULT = DistillConfig(lr=1e-3, epochs=10)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    data: dict = field(default_factory=lambda: _no_seed(SyntheticSpec().to_dict()))
    model: dict = field(default_factory=lambda: asdict(ArchSection()))
    teacher: dict = field(default_factory=lambda: _no_seed(TEACHER_DEFAULT.to_dict()))
    distill: dict = field(default_factory=lambda: _no_seed(STUDENT_DEFAULT.to_dict()))
    score: dict = field(default_factory=lambda: asdict(ScoreSection()))
    target: dict = field(default_factory=lambda: asdict(TargetSection()))
    stage: str = "finetune"
    strategy: str = ImportanceMetric.MOPE.value
    strategies: list = field(default_factory=list)
    eval_split: str = "test"

    # -- construction ---------------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        merged = merge(cls().to_dict(), data)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            set_leaf(d, key, value)
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        # building every section surfaces type and range errors up front
        try:
            self.data_spec()
            self.model_config()
            self.teacher_config()
            self.distill_config()
            self.score_config()
            if self.target_section().mode == "budget" and self.target["budget"] is None:
                raise RunConfigError("target.mode=budget needs target.budget")
            self.prune_target()
            ImportanceMetric(self.strategy)
            if self.stage not in ("finetune", "pretrain"):
                raise RunConfigError(f"stage must be finetune or pretrain, got {self.stage!r}")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, RunConfigError):
                raise
            raise RunConfigError(str(exc)) from None

    # -- section builders -------------------------------------------------------------------

    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.data, seed=self.seed)

    def model_config(self, spec: SyntheticSpec | None = None) -> ModelConfig:
        """Architecture section plus vocab/sequence sizes taken from the data spec."""
        spec = spec or self.data_spec()
        return ModelConfig(
            **self.model,
            vocab_v=spec.vocab_v,
            vocab_t=spec.vocab_t,
            seq_v=spec.seq_v,
            seq_t=spec.seq_t,
            seed=self.seed,
        )

    def teacher_config(self) -> DistillConfig:
        return DistillConfig(**self.teacher, seed=self.seed)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**self.distill, seed=self.seed)

    def score_config(self) -> ScoreConfig:
        s = self.score
        return ScoreConfig(
            n_groups=s["n_groups"],
            objective=Objective(s["objective"]),
            split_id=s["split"],
            workers=s["workers"] if s["workers"] is not None else default_workers(),
            importance_batch=s["importance_batch"],
        )

    def target_section(self) -> TargetSection:
        return TargetSection(**self.target)

    def prune_target(self) -> PruneTarget:
        t = self.target_section()
        if t.budget is not None:
            return PruneTarget.budget(t.budget)
        return PruneTarget.uniform(t.width, t.depth)

    def plan_mode(self) -> str:
        return "budget" if self.target["budget"] is not None else self.target["mode"]

    def stage_config(self, stage: str | None = None) -> StageConfig:
        stage = stage or self.stage
        d = self.distill_config()
        phases = (d, replace(d)) if stage == "finetune" else (d,)
        return StageConfig(
            stage=stage,
            distill=phases,
            strategy=ImportanceMetric(self.strategy),
            score=self.score_config(),
            mode=self.plan_mode(),
            eval_split=self.eval_split,
        )


# -- dict plumbing ----------------------------------------------------------------------------


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge of ``update`` into a copy of ``base``; unknown keys are errors."""
    out = dict(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise RunConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise RunConfigError(f"config key {where!r} must be an object")
            out[key] = merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def set_leaf(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = d
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise RunConfigError(f"unknown config key {dotted!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise RunConfigError(f"config key {dotted!r} is a section, not a leaf")
            node[part] = value
        else:
            node = node[part]


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key.path=value``; the value is read as JSON, falling back to a bare string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise RunConfigError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {str(p)!r} not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise RunConfigError("config document must be a JSON object")
    cfg = RunConfig.from_dict(data)
    return cfg.with_overrides(overrides or {})

