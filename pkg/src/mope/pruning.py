"""Pruning plans and the two staged pruning pipelines.

Fine-tuning stage (width first, then depth)::

    head + group tables on teacher -> width plan -> surgery -> distill
    layer table on that student    -> depth plan -> surgery -> distill

Pre-training stage (width and depth together)::

    head + group + layer tables on the model -> one plan -> surgery -> distill

Plans are pure functions of the score tables, the target and the planning
mode. Ties are broken by ascending (encoder, layer, index).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

from mope.canonical import canonical_dumps, sha256_json
from mope.distill import DistillConfig, TrainReport, train_distill
from mope.evaluation import PairedSplit, RetrievalMetrics, evaluate
from mope.model import (
    DEFAULT_GROUPS,
    ENCODERS,
    DualEncoder,
    LayerArch,
    ModuleId,
    closed_form_param_count,
    group_bounds,
    sort_ids,
    structural_prune,
)
from mope.scoring import CostTables, ImportanceMetric, ScoreConfig, UsageError, baseline_importance, build_cost_tables


class PlanningError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class EncoderTarget:
    width_fraction: float = 1.0
    depth_keep: int | None = None

    def __post_init__(self):
        if not 0 < self.width_fraction <= 1:
            raise PlanningError("width_fraction must lie in (0, 1]")
        if self.depth_keep is not None and self.depth_keep < 1:
            raise PlanningError("depth_keep must be at least 1")


@dataclass(frozen=True)
class PruneTarget:
    """Either per-encoder width/depth targets or a global parameter budget."""

    vision: EncoderTarget | None = None
    text: EncoderTarget | None = None
    param_budget: int | None = None

    def __post_init__(self):
        fractions = self.vision is not None or self.text is not None
        if fractions == (self.param_budget is not None):
            raise PlanningError("set exactly one of per-encoder targets or param_budget")

    @classmethod
    def uniform(cls, width: float = 1.0, depth: int | None = None) -> "PruneTarget":
        t = EncoderTarget(width, depth)
        return cls(vision=t, text=t)

    @classmethod
    def budget(cls, params: int) -> "PruneTarget":
        return cls(param_budget=int(params))

    def encoder(self, name: str) -> EncoderTarget:
        return getattr(self, name) or EncoderTarget()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "PruneTarget":
        return cls(
            EncoderTarget(**data["vision"]) if data.get("vision") else None,
            EncoderTarget(**data["text"]) if data.get("text") else None,
            data.get("param_budget"),
        )


@dataclass
class PruningPlan:
    remove: list[ModuleId]
    arch: dict[str, tuple[LayerArch, ...]]
    predicted_params: int
    n_groups: int = DEFAULT_GROUPS
    permutations: dict | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "remove": [str(m) for m in self.remove],
            "arch": {enc: [asdict(la) for la in layers] for enc, layers in self.arch.items()},
            "predicted_params": self.predicted_params,
            "n_groups": self.n_groups,
            "permutations": (
                {enc: {str(l): p for l, p in layers.items()} for enc, layers in self.permutations.items()}
                if self.permutations
                else None
            ),
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data) -> "PruningPlan":
        perms = data.get("permutations")
        return cls(
            [ModuleId.parse(s) for s in data["remove"]],
            {enc: tuple(LayerArch(**la) for la in layers) for enc, layers in data["arch"].items()},
            int(data["predicted_params"]),
            int(data["n_groups"]),
            {enc: {int(l): list(p) for l, p in layers.items()} for enc, layers in perms.items()} if perms else None,
            dict(data.get("provenance", {})),
        )


def _score_order(scores: Mapping[ModuleId, float]) -> list[ModuleId]:
    """Ascending score; ties by (encoder, layer, index)."""
    return sorted(scores, key=lambda m: (scores[m], m.sort_key()))


def _resulting_arch(model: DualEncoder, remove, n_groups: int) -> dict[str, tuple[LayerArch, ...]]:
    out = {}
    for enc in ENCODERS:
        layers = []
        for l, la in enumerate(model.arch[enc]):
            if ModuleId.whole_layer(enc, l) in remove:
                continue
            heads = la.heads - sum(1 for m in remove if m.kind == "head" and m.encoder == enc and m.layer == l)
            spans = group_bounds(la.ffn, n_groups)
            gone = {m.index for m in remove if m.kind == "group" and m.encoder == enc and m.layer == l}
            ffn = la.ffn - sum(hi - lo for g, (lo, hi) in enumerate(spans) if g in gone)
            layers.append(LayerArch(la.source, heads, ffn))
        out[enc] = tuple(layers)
    return out


def _finish(model, remove, n_groups, perms, provenance) -> PruningPlan:
    remove_set = set(remove)
    arch = _resulting_arch(model, remove_set, n_groups)
    for enc, layers in arch.items():
        if not layers:
            raise PlanningError(f"plan removes every {enc} layer")
        for la in layers:
            if la.heads < 1 or la.ffn < 1:
                raise PlanningError(f"plan empties {enc} layer sourced from {la.source}")
    uses_groups = any(m.kind == "group" for m in remove)
    return PruningPlan(
        list(remove),
        arch,
        closed_form_param_count(model.config, arch),
        n_groups,
        perms if uses_groups else None,
        provenance,
    )


def _tables_hash(tables) -> str:
    if isinstance(tables, CostTables):
        return sha256_json(tables.to_dict())
    return sha256_json({str(k): v for k, v in tables.items()})


def make_width_plan(
    tables: CostTables,
    model: DualEncoder,
    target: PruneTarget,
    mode: str = "uniform",
) -> PruningPlan:
    """Heads and neuron groups to remove under ``target``.

    ``uniform`` keeps the round-half-up(n * fraction) best heads and groups in
    every layer (at least one). ``budget`` greedily removes the globally
    lowest-scoring head or group that keeps its layer nonempty until the
    parameter count fits ``target.param_budget``.
    """
    n_groups = int(tables.meta.get("n_groups", DEFAULT_GROUPS))
    expected = set(model.all_module_ids("head")) | set(model.all_module_ids("group", n_groups))
    if not expected <= set(tables.heads) | set(tables.groups):
        raise PlanningError("cost tables do not cover every head and neuron group of the model")
    provenance = {"tables_hash": _tables_hash(tables), "target": target.to_dict(), "mode": mode, "kind": "width",
                  "model_hash": tables.meta.get("model_hash")}
    perms = tables.permutations()

    if mode == "uniform":
        if target.param_budget is not None:
            raise PlanningError("uniform mode needs per-encoder width fractions")
        remove = []
        for enc in ENCODERS:
            frac = target.encoder(enc).width_fraction
            for l, la in enumerate(model.arch[enc]):
                for kind, table, count in (
                    ("head", tables.heads, la.heads),
                    ("group", tables.groups, len(group_bounds(la.ffn, n_groups))),
                ):
                    keep = max(1, round_half_up(count * frac))
                    ids = [m for m in table if m.kind == kind and m.encoder == enc and m.layer == l]
                    remove.extend(_score_order({m: table[m] for m in ids})[: count - keep])
        return _finish(model, sort_ids(remove), n_groups, perms, provenance)

    if mode != "budget":
        raise PlanningError(f"unknown planning mode {mode!r}")
    if target.param_budget is None:
        raise PlanningError("budget mode needs param_budget")
    cfg = model.config
    pool = {**{m: tables.heads[m] for m in model.all_module_ids("head")},
            **{m: tables.groups[m] for m in model.all_module_ids("group", n_groups)}}
    heads_left = {(enc, l): la.heads for enc in ENCODERS for l, la in enumerate(model.arch[enc])}
    groups_left = {(enc, l): len(group_bounds(la.ffn, n_groups)) for enc in ENCODERS for l, la in enumerate(model.arch[enc])}
    current = closed_form_param_count(cfg, model.arch)
    remove = []
    for mid in _score_order(pool):
        if current <= target.param_budget:
            break
        key = (mid.encoder, mid.layer)
        if mid.kind == "head":
            if heads_left[key] == 1:
                continue
            heads_left[key] -= 1
            current -= 4 * cfg.d * cfg.d_head + 3 * cfg.d_head
        else:
            if groups_left[key] == 1:
                continue
            groups_left[key] -= 1
            lo, hi = group_bounds(model.arch[mid.encoder][mid.layer].ffn, n_groups)[mid.index]
            current -= (hi - lo) * (2 * cfg.d + 1)
        remove.append(mid)
    if current > target.param_budget:
        raise PlanningError(f"budget {target.param_budget} unreachable; floor is {current} parameters")
    return _finish(model, remove, n_groups, perms, provenance)


def make_depth_plan(
    layer_scores: CostTables | Mapping[ModuleId, float],
    model: DualEncoder,
    keep: int | Mapping[str, int | None],
    strategy: ImportanceMetric | str = ImportanceMetric.MOPE,
) -> PruningPlan:
    """Remove the ``L - keep`` lowest-priority layers of each encoder."""
    scores = layer_scores.layers if isinstance(layer_scores, CostTables) else dict(layer_scores)
    keeps = keep if isinstance(keep, Mapping) else {enc: keep for enc in ENCODERS}
    remove = []
    for enc in ENCODERS:
        n_layers = len(model.arch[enc])
        k = keeps.get(enc)
        k = n_layers if k is None else k
        if not 1 <= k <= n_layers:
            raise PlanningError(f"{enc}: keep={k} outside [1, {n_layers}]")
        ids = [ModuleId.whole_layer(enc, l) for l in range(n_layers)]
        missing = [m for m in ids if m not in scores]
        if missing:
            raise PlanningError(f"no layer score for {missing[0]}")
        remove.extend(_score_order({m: scores[m] for m in ids})[: n_layers - k])
    provenance = {
        "tables_hash": _tables_hash(layer_scores),
        "keep": dict(keeps),
        "strategy": ImportanceMetric(strategy).value,
        "kind": "depth",
    }
    if isinstance(layer_scores, CostTables):
        provenance["model_hash"] = layer_scores.meta.get("layers_model_hash", layer_scores.meta.get("model_hash"))
    return _finish(model, sort_ids(remove), DEFAULT_GROUPS, None, provenance)


def combine_plans(model: DualEncoder, width: PruningPlan, depth: PruningPlan) -> PruningPlan:
    """One plan doing both; width removals inside dropped layers are discarded."""
    dropped = {(m.encoder, m.layer) for m in depth.remove}
    remove = [m for m in width.remove if (m.encoder, m.layer) not in dropped] + list(depth.remove)
    provenance = {"kind": "width+depth", "width": width.provenance, "depth": depth.provenance}
    perms = width.permutations
    return _finish(model, sort_ids(remove), width.n_groups, perms, provenance)


def apply_plan(model: DualEncoder, plan: PruningPlan) -> DualEncoder:
    out = structural_prune(model, plan.remove, plan.n_groups, plan.permutations)
    if out.arch != plan.arch:
        raise PlanningError("pruned architecture differs from the plan's record")
    return out


# -- pipelines -------------------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    stage: str = "finetune"
    distill: tuple[DistillConfig, ...] = (DistillConfig(), DistillConfig())
    strategy: ImportanceMetric = ImportanceMetric.MOPE
    score: ScoreConfig = ScoreConfig()
    mode: str = "uniform"
    eval_split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "strategy", ImportanceMetric(self.strategy))
        object.__setattr__(self, "distill", tuple(self.distill))
        if self.stage not in ("finetune", "pretrain"):
            raise ValueError(f"unknown stage {self.stage!r}")
        need = 2 if self.stage == "finetune" else 1
        if len(self.distill) != need:
            raise ValueError(f"{self.stage} stage needs {need} distillation phase config(s)")


@dataclass
class Phase:
    name: str
    plan: PruningPlan
    tables: CostTables | None
    train: TrainReport
    metrics: RetrievalMetrics
    params: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "plan": self.plan.to_dict(),
            "tables": self.tables.to_dict() if self.tables is not None else None,
            "train": self.train.to_dict(),
            "metrics": self.metrics.to_dict(),
            "params": self.params,
        }


@dataclass
class PipelineResult:
    student: DualEncoder
    stage: str
    phases: list[Phase]
    teacher_metrics: RetrievalMetrics
    wall_time: float = 0.0

    @property
    def final_metrics(self) -> RetrievalMetrics:
        return self.phases[-1].metrics

    def report(self) -> dict:
        return {
            "stage": self.stage,
            "teacher_metrics": self.teacher_metrics.to_dict(),
            "phases": [p.to_dict() for p in self.phases],
            "final_params": self.phases[-1].params,
        }


def _layer_scores(model, val, stage_cfg: StageConfig):
    if stage_cfg.strategy is ImportanceMetric.MOPE:
        return build_cost_tables(model, val, stage_cfg.score, kinds=("layer",))
    return baseline_importance(model, stage_cfg.strategy, "layer", val, stage_cfg.score.n_groups)


def _depth_keep(target: PruneTarget) -> dict:
    return {enc: target.encoder(enc).depth_keep for enc in ENCODERS}


def _phase(name, student, teacher, plan, tables, data, dcfg, eval_name) -> tuple[Phase, DualEncoder]:
    student, rep = train_distill(student, teacher, data["train"], dcfg)
    metrics = evaluate(student, data[eval_name])
    rep.metrics = metrics
    return Phase(name, plan, tables, rep, metrics, closed_form_param_count(student.config, student.arch)), student


def run_finetune_pipeline(
    teacher: DualEncoder,
    data: Mapping[str, PairedSplit],
    target: PruneTarget,
    stage_cfg: StageConfig = StageConfig(),
) -> PipelineResult:
    """Width first (score, prune, distill), then depth on the retrained student."""
    if stage_cfg.stage != "finetune":
        raise UsageError("run_finetune_pipeline needs a finetune StageConfig")
    t0 = time.perf_counter()
    val = data["val"]
    tables = build_cost_tables(teacher, val, stage_cfg.score, kinds=("head", "group"))
    wplan = make_width_plan(tables, teacher, target, stage_cfg.mode)
    s1 = apply_plan(teacher, wplan)
    ph1, s1 = _phase("width", s1, teacher, wplan, tables, data, stage_cfg.distill[0], stage_cfg.eval_split)

    layer_tables = _layer_scores(s1, val, stage_cfg)
    dplan = make_depth_plan(layer_tables, s1, _depth_keep(target), stage_cfg.strategy)
    s2 = apply_plan(s1, dplan)
    tbl = layer_tables if isinstance(layer_tables, CostTables) else None
    ph2, s2 = _phase("depth", s2, teacher, dplan, tbl, data, stage_cfg.distill[1], stage_cfg.eval_split)
    s2.provenance = {**teacher.provenance, "pipeline": "finetune", "teacher_hash": teacher.param_hash()}
    return PipelineResult(
        s2, "finetune", [ph1, ph2], evaluate(teacher, data[stage_cfg.eval_split]), time.perf_counter() - t0
    )


def run_pretrain_pipeline(
    model: DualEncoder,
    data: Mapping[str, PairedSplit],
    target: PruneTarget,
    stage_cfg: StageConfig = StageConfig(stage="pretrain", distill=(DistillConfig(),)),
) -> PipelineResult:
    """All tables on the unmodified model, one combined plan, one retraining run."""
    if stage_cfg.stage != "pretrain":
        raise UsageError("run_pretrain_pipeline needs a pretrain StageConfig")
    t0 = time.perf_counter()
    val = data["val"]
    kinds = ("head", "group", "layer") if stage_cfg.strategy is ImportanceMetric.MOPE else ("head", "group")
    tables = build_cost_tables(model, val, stage_cfg.score, kinds=kinds)
    layer_scores = tables if stage_cfg.strategy is ImportanceMetric.MOPE else _layer_scores(model, val, stage_cfg)
    plan = combine_plans(
        model,
        make_width_plan(tables, model, target, stage_cfg.mode),
        make_depth_plan(layer_scores, model, _depth_keep(target), stage_cfg.strategy),
    )
    student = apply_plan(model, plan)
    ph, student = _phase("width+depth", student, model, plan, tables, data, stage_cfg.distill[0], stage_cfg.eval_split)
    student.provenance = {**model.provenance, "pipeline": "pretrain", "teacher_hash": model.param_hash()}
    return PipelineResult(student, "pretrain", [ph], evaluate(model, data[stage_cfg.eval_split]), time.perf_counter() - t0)


# -- strategy comparison ------------------------------------------------------------------------------

FRAMEWORKS = ("width-first-then-depth", "width-and-depth", "depth-first-then-width")
LOSS_VARIANTS = {
    "full": {},
    "no-sim": {"alpha": 0.0},
    "no-feat": {"beta": 0.0},
    "no-hidn": {"gamma": 0.0},
    "no-distill": None,
}


def _strategy_family(name: str) -> str:
    if name in FRAMEWORKS:
        return "framework"
    if name in LOSS_VARIANTS:
        return "loss"
    ImportanceMetric(name)
    return "depth"


def compare_strategies(
    teacher: DualEncoder,
    data: Mapping[str, PairedSplit],
    target: PruneTarget,
    strategies,
    stage_cfg: StageConfig = StageConfig(),
) -> list[dict]:
    """Run each variant under one budget and rank by final recall mean.

    Strategies are depth-selection metrics (``mope``, ``every-other``, ...),
    pruning frameworks (``width-first-then-depth``, ``width-and-depth``,
    ``depth-first-then-width``) or loss ablations (``full``, ``no-sim``,
    ``no-feat``, ``no-hidn``, ``no-distill``). All use ``stage_cfg``'s
    distillation phases.
    """
    strategies = list(strategies)
    if len(strategies) < 2:
        raise UsageError("compare needs at least two strategies")
    if len(set(strategies)) != len(strategies):
        raise UsageError("duplicate strategy names")
    families = {_strategy_family(s) for s in strategies}
    if len(families) != 1:
        raise UsageError("strategies must all be depth metrics, frameworks, or loss variants")
    family = families.pop()
    rows = []
    if family == "depth":
        val = data["val"]
        tables = build_cost_tables(teacher, val, stage_cfg.score, kinds=("head", "group"))
        wplan = make_width_plan(tables, teacher, target, stage_cfg.mode)
        base = apply_plan(teacher, wplan)
        if wplan.remove:
            base, _ = train_distill(base, teacher, data["train"], stage_cfg.distill[0])
        for name in strategies:
            cfg = replace(stage_cfg, strategy=ImportanceMetric(name))
            scores = _layer_scores(base, val, cfg)
            student = apply_plan(base, make_depth_plan(scores, base, _depth_keep(target), name))
            student, _ = train_distill(student, teacher, data["train"], stage_cfg.distill[-1])
            rows.append(_row(name, student, data[stage_cfg.eval_split]))
    elif family == "framework":
        for name in strategies:
            rows.append(_row(name, _run_framework(name, teacher, data, target, stage_cfg), data[stage_cfg.eval_split]))
    else:
        for name in strategies:
            phases = []
            for d in stage_cfg.distill:
                phases.append(d if LOSS_VARIANTS[name] is None else replace(d, **LOSS_VARIANTS[name]))
            cfg = replace(stage_cfg, distill=tuple(phases))
            student = _run_framework("width-first-then-depth", teacher, data, target, cfg,
                                     use_teacher=LOSS_VARIANTS[name] is not None)
            rows.append(_row(name, student, data[stage_cfg.eval_split]))
    rows.sort(key=lambda r: (-r["recall_mean"], r["strategy"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows


def _row(name: str, student: DualEncoder, split: PairedSplit) -> dict:
    m = evaluate(student, split)
    return {
        "strategy": name,
        "params": closed_form_param_count(student.config, student.arch),
        **{f"TR@{k}": v for k, v in sorted(m.tr_at.items())},
        **{f"IR@{k}": v for k, v in sorted(m.ir_at.items())},
        "recall_mean": m.recall_mean,
    }


def _run_framework(name, teacher, data, target, stage_cfg: StageConfig, use_teacher: bool = True) -> DualEncoder:
    val, train = data["val"], data["train"]
    distill_teacher = teacher if use_teacher else None
    phases = stage_cfg.distill if len(stage_cfg.distill) == 2 else (stage_cfg.distill[0],) * 2
    if name == "width-first-then-depth":
        tables = build_cost_tables(teacher, val, stage_cfg.score, kinds=("head", "group"))
        s = apply_plan(teacher, make_width_plan(tables, teacher, target, stage_cfg.mode))
        s, _ = train_distill(s, distill_teacher, train, phases[0])
        s = apply_plan(s, make_depth_plan(_layer_scores(s, val, stage_cfg), s, _depth_keep(target), stage_cfg.strategy))
        s, _ = train_distill(s, distill_teacher, train, phases[1])
        return s
    if name == "width-and-depth":
        tables = build_cost_tables(teacher, val, stage_cfg.score)
        plan = combine_plans(
            teacher,
            make_width_plan(tables, teacher, target, stage_cfg.mode),
            make_depth_plan(tables, teacher, _depth_keep(target)),
        )
        one = replace(phases[0], epochs=phases[0].epochs + phases[1].epochs)
        s, _ = train_distill(apply_plan(teacher, plan), distill_teacher, train, one)
        return s
    # depth first, then width on the depth-pruned student
    layer_tables = build_cost_tables(teacher, val, stage_cfg.score, kinds=("layer",))
    s = apply_plan(teacher, make_depth_plan(layer_tables, teacher, _depth_keep(target)))
    s, _ = train_distill(s, distill_teacher, train, phases[0])
    tables = build_cost_tables(s, val, stage_cfg.score, kinds=("head", "group"))
    s = apply_plan(s, make_width_plan(tables, s, target, stage_cfg.mode))
    s, _ = train_distill(s, distill_teacher, train, phases[1])
    return s
