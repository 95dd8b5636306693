"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite.

Each trial takes a trained teacher and its splits and returns plain numbers,
so callers decide how to aggregate over seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from mope.distill import DistillConfig, TrainReport, train_distill
from mope.evaluation import PairedSplit, RetrievalMetrics, evaluate
from mope.model import DualEncoder, ModelConfig, ModuleId, init_model, structural_prune
from mope.pruning import PruneTarget, apply_plan, make_depth_plan, make_width_plan, round_half_up
from mope.scoring import ImportanceMetric, ScoreConfig, baseline_importance, build_cost_tables
from mope.workbench.data import SyntheticSpec, generate_dataset

SEEDS = (41, 42, 43)
TEACHER_TRAINING = DistillConfig(lr=2e-3, epochs=50)
STUDENT_TRAINING = DistillConfig(lr=1e-3, epochs=10)


@dataclass
class TeacherRun:
    seed: int
    teacher: DualEncoder
    splits: dict[str, PairedSplit]
    report: TrainReport
    val: RetrievalMetrics

    @property
    def val_recall_at_1(self) -> float:
        return recall_at_1(self.val)


def recall_at_1(m: RetrievalMetrics) -> float:
    """Mean of the two retrieval directions at K=1."""
    return (m.tr_at[1] + m.ir_at[1]) / 2


def train_teacher(seed: int, spec: SyntheticSpec | None = None, cfg: DistillConfig = TEACHER_TRAINING) -> TeacherRun:
    spec = replace(spec or SyntheticSpec(), seed=seed)
    splits = generate_dataset(spec)
    mcfg = ModelConfig(vocab_v=spec.vocab_v, vocab_t=spec.vocab_t, seq_v=spec.seq_v, seq_t=spec.seq_t, seed=seed)
    model = init_model(mcfg)
    model.provenance = {"role": "teacher", "seed": seed}
    teacher, rep = train_distill(model, None, splits["train"], replace(cfg, seed=seed))
    return TeacherRun(seed, teacher, splits, rep, evaluate(teacher, splits["val"]))


# -- head selection -----------------------------------------------------------------------------


def head_selection_trial(run: TeacherRun, fraction: float = 0.5) -> tuple[float, float]:
    """Validation recall mean after keeping the highest- vs the lowest-scoring heads.

    Only heads are removed (reported width is the kept-head fraction), no
    retraining happens, and both arms drop the same number of heads per layer.
    """
    val = run.splits["val"]
    scores = build_cost_tables(run.teacher, val, ScoreConfig(), kinds=("head",)).heads
    arms = []
    for sign in (1.0, -1.0):
        remove = []
        for enc, layers in run.teacher.arch.items():
            for l, la in enumerate(layers):
                keep = max(1, round_half_up(la.heads * fraction))
                ids = [ModuleId.head(enc, l, h) for h in range(la.heads)]
                order = sorted(ids, key=lambda m: (sign * scores[m], m.sort_key()))
                remove.extend(order[: la.heads - keep])
        pruned = structural_prune(run.teacher, remove)
        arms.append(evaluate(pruned, val).recall_mean)
    return arms[0], arms[1]


# -- layer selection ----------------------------------------------------------------------------


def layer_strategy_trial(
    run: TeacherRun,
    keep: int = 2,
    strategies=(ImportanceMetric.MOPE, ImportanceMetric.EVERY_OTHER),
    cfg: DistillConfig = STUDENT_TRAINING,
    split: str = "val",
) -> dict[str, float]:
    """Recall mean per layer-selection strategy after one identical distillation run each."""
    val = run.splits["val"]
    out = {}
    for strategy in map(ImportanceMetric, strategies):
        if strategy is ImportanceMetric.MOPE:
            scores = build_cost_tables(run.teacher, val, ScoreConfig(), kinds=("layer",))
        else:
            scores = baseline_importance(run.teacher, strategy, "layer", val)
        student = apply_plan(run.teacher, make_depth_plan(scores, run.teacher, keep, strategy))
        student, _ = train_distill(student, run.teacher, run.splits["train"], replace(cfg, seed=run.seed))
        out[strategy.value] = evaluate(student, run.splits[split]).recall_mean
    return out


# -- distillation -------------------------------------------------------------------------------


def width_student(run: TeacherRun, width: float = 0.5) -> DualEncoder:
    tables = build_cost_tables(run.teacher, run.splits["val"], ScoreConfig(), kinds=("head", "group"))
    return apply_plan(run.teacher, make_width_plan(tables, run.teacher, PruneTarget.uniform(width)))


def loss_trial(
    run: TeacherRun,
    student: DualEncoder,
    cfg: DistillConfig = STUDENT_TRAINING,
    split: str = "val",
) -> dict[str, float]:
    """Recall mean before retraining, after full distillation and after contrastive-only training."""
    cfg = replace(cfg, seed=run.seed)
    full, _ = train_distill(student, run.teacher, run.splits["train"], cfg)
    itc, _ = train_distill(student, None, run.splits["train"], cfg)
    return {
        "pre": evaluate(student, run.splits[split]).recall_mean,
        "full": evaluate(full, run.splits[split]).recall_mean,
        "itc": evaluate(itc, run.splits[split]).recall_mean,
    }
