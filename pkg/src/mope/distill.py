"""Contrastive and distillation losses plus the retraining loop.

The training objective is

    total = itc + alpha * sim + beta * feat + gamma * hidn

where ``itc`` is symmetric InfoNCE on the student's own pairs, ``sim`` is the
soft cross-entropy between student and teacher similarity matrices, ``feat``
is the MSE between final features and ``hidn`` the MSE between mapped hidden
states. Without a teacher only ``itc`` is optimised, which is how teachers are
trained in the first place.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from mope import numerics as nx
from mope.evaluation import PairedSplit, RetrievalMetrics, evaluate
from mope.model import ENCODERS, DualEncoder, encode
from mope.numerics import Node, NumericsError

log = logging.getLogger(__name__)

MAX_LOGIT_SCALE = math.log(100.0)
COMPONENTS = ("itc", "sim", "feat", "hidn")


class LossError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Loss went non-finite; ``last_good`` holds the model before that step."""

    def __init__(self, message: str, last_good: DualEncoder, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1000.0
    gamma: float = 1.0
    lr: float = 2e-3
    warmup_ratio: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    seed: int = 42
    sim_bidirectional: bool = True
    sim_use_logit_scale: bool = False
    freeze_logit_scale: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, data) -> "DistillConfig":
        return cls(**dict(data))


# -- losses -------------------------------------------------------------------------


def _diag_mean(m: Node) -> Node:
    n = m.shape[0]
    return nx.scale(nx.sum_all(nx.mul(m, np.eye(n))), 1.0 / n)


def itc_loss(fv, fl, logit_scale) -> Node:
    """Symmetric InfoNCE with diagonal targets over ``exp(logit_scale) * fv fl^T``."""
    fv, fl, logit_scale = nx.const(fv), nx.const(fl), nx.const(logit_scale)
    if fv.shape[0] < 2:
        raise LossError("InfoNCE needs a batch of at least 2 pairs")
    logits = nx.mul(nx.matmul(fv, nx.transpose(fl)), nx.exp(logit_scale))
    i2t = _diag_mean(nx.log_softmax_rows(logits))
    t2i = _diag_mean(nx.log_softmax_rows(nx.transpose(logits)))
    return nx.scale(nx.add(i2t, t2i), -0.5)


def _soft_ce_rows(s: Node, target: np.ndarray) -> Node:
    e = target - target.max(axis=-1, keepdims=True)
    p = np.exp(e) / np.exp(e).sum(axis=-1, keepdims=True)
    n = s.shape[0]
    return nx.scale(nx.sum_all(nx.mul(nx.log_softmax_rows(s), p)), -1.0 / n)


def sim_loss(s, s_teacher, bidirectional: bool = True) -> Node:
    """Soft cross-entropy from teacher to student similarity rows (and columns)."""
    s = nx.const(s)
    t = np.asarray(s_teacher.value if isinstance(s_teacher, Node) else s_teacher, dtype=np.float64)
    if s.shape != t.shape:
        raise LossError(f"similarity shapes differ: {s.shape} vs {t.shape}")
    rows = _soft_ce_rows(s, t)
    if not bidirectional:
        return rows
    cols = _soft_ce_rows(nx.transpose(s), t.T)
    return nx.scale(nx.add(rows, cols), 0.5)


def feat_loss(fv, fl, fv_teacher, fl_teacher) -> Node:
    fv, fl = nx.const(fv), nx.const(fl)
    fvt, flt = nx.const(fv_teacher), nx.const(fl_teacher)
    if fv.shape != fvt.shape or fl.shape != flt.shape:
        raise LossError("student and teacher feature shapes differ")
    return nx.scale(nx.add(nx.mse(fv, fvt), nx.mse(fl, flt)), 0.5)


def layer_map(student: DualEncoder, teacher: DualEncoder) -> dict[str, list[int]]:
    """Teacher layer position feeding each retained student layer."""
    out = {}
    for enc in ENCODERS:
        by_source = {la.source: pos for pos, la in enumerate(teacher.arch[enc])}
        try:
            mapped = [by_source[la.source] for la in student.arch[enc]]
        except KeyError as exc:
            raise LossError(f"{enc}: student layer from source {exc} has no teacher counterpart") from None
        if any(b <= a for a, b in zip(mapped, mapped[1:])):
            raise LossError(f"{enc}: layer map is not strictly increasing")
        out[enc] = mapped
    return out


def hidden_loss(student_hiddens, teacher_hiddens, lmap) -> Node:
    """Half the sum over towers of per-layer MSE against mapped teacher layers."""
    per_tower = []
    for enc in ENCODERS:
        hs, ht, m = student_hiddens[enc], teacher_hiddens[enc], lmap[enc]
        if len(hs) != len(m):
            raise LossError(f"{enc}: {len(hs)} student hiddens for a map of length {len(m)}")
        terms = None
        for h, t_idx in zip(hs, m):
            target = ht[t_idx]
            if h.shape != nx.const(target).shape:
                raise LossError(f"{enc}: hidden shape {h.shape} vs {nx.const(target).shape}")
            term = nx.mse(h, target)
            terms = term if terms is None else nx.add(terms, term)
        per_tower.append(terms if terms is not None else nx.const(0.0))
    return nx.scale(nx.add(per_tower[0], per_tower[1]), 0.5)


def total_loss(components: dict, cfg: DistillConfig):
    """Weighted sum; works on floats or graph nodes."""
    if all(not isinstance(v, Node) for v in components.values()):
        return (
            components["itc"]
            + cfg.alpha * components["sim"]
            + cfg.beta * components["feat"]
            + cfg.gamma * components["hidn"]
        )
    out = nx.const(components["itc"])
    for name, weight in (("sim", cfg.alpha), ("feat", cfg.beta), ("hidn", cfg.gamma)):
        if name in components:
            out = nx.add(out, nx.scale(components[name], weight))
    return out


# -- one batch ---------------------------------------------------------------------------


@dataclass
class TeacherOutputs:
    fv: np.ndarray
    fl: np.ndarray
    hiddens: dict
    logit_scale: float


def teacher_forward(teacher: DualEncoder, v_tokens, t_tokens) -> TeacherOutputs:
    ev = encode(teacher, "vision", v_tokens)
    el = encode(teacher, "text", t_tokens)
    return TeacherOutputs(
        ev.feature.value,
        el.feature.value,
        {"vision": [h.value for h in ev.hiddens], "text": [h.value for h in el.hiddens]},
        float(teacher.params["logit_scale"]),
    )


def batch_losses(
    student: DualEncoder,
    weights: dict,
    v_tokens,
    t_tokens,
    cfg: DistillConfig,
    teacher_out: TeacherOutputs | None = None,
    lmap: dict | None = None,
) -> dict[str, Node]:
    """Loss components for one batch; ``weights`` supplies graph leaves."""
    ev = encode(student, "vision", v_tokens, weights=weights)
    el = encode(student, "text", t_tokens, weights=weights)
    scale = weights.get("logit_scale", nx.const(student.params["logit_scale"]))
    comps = {"itc": itc_loss(ev.feature, el.feature, scale)}
    if teacher_out is None:
        return comps
    s = nx.matmul(ev.feature, nx.transpose(el.feature))
    s_t = teacher_out.fv @ teacher_out.fl.T
    if cfg.sim_use_logit_scale:
        s = nx.mul(s, nx.exp(scale))
        s_t = s_t * math.exp(teacher_out.logit_scale)
    comps["sim"] = sim_loss(s, s_t, cfg.sim_bidirectional)
    comps["feat"] = feat_loss(ev.feature, el.feature, teacher_out.fv, teacher_out.fl)
    comps["hidn"] = hidden_loss(
        {"vision": ev.hiddens, "text": el.hiddens}, teacher_out.hiddens, lmap
    )
    return comps


# -- optimiser and schedule -------------------------------------------------------------------


def warmup_steps(total: int, warmup_ratio: float) -> int:
    return int(round(warmup_ratio * total))


def lr_at(step: int, total: int, cfg: DistillConfig) -> float:
    """Linear warmup from lr/warmup to lr, then cosine decay towards 0."""
    warm = warmup_steps(total, cfg.warmup_ratio)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(total - warm, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - warm) / span))


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2) only."""

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            p = params[k]
            if self.weight_decay and p.ndim >= 2:
                p *= 1.0 - lr * self.weight_decay
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- training loop -------------------------------------------------------------------------------


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    metrics: RetrievalMetrics | None = None
    wall_time: float = 0.0
    distilled: bool = False

    def to_dict(self, include_time: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "config": self.config,
            "distilled": self.distilled,
            "epochs": self.epochs,
            "steps": self.steps,
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }
        if include_time:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, data) -> "TrainReport":
        m = data.get("metrics")
        return cls(
            data["seed"],
            data["config"],
            data["epochs"],
            data["steps"],
            RetrievalMetrics.from_dict(m) if m else None,
            data.get("wall_time", 0.0),
            data.get("distilled", False),
        )


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) >= 2:
            yield idx


def train_distill(
    student: DualEncoder,
    teacher: DualEncoder | None,
    data: PairedSplit,
    cfg: DistillConfig,
    eval_split: PairedSplit | None = None,
) -> tuple[DualEncoder, TrainReport]:
    """Retrain ``student`` (optionally against a frozen ``teacher``).

    Returns a new model; neither input is modified.
    """
    t0 = time.perf_counter()
    report = TrainReport(cfg.seed, cfg.to_dict(), distilled=teacher is not None)
    params = {k: v.copy() for k, v in student.params.items()}
    trainable = [k for k in params if not (k == "logit_scale" and cfg.freeze_logit_scale)]
    lmap = layer_map(student, teacher) if teacher is not None else None

    n = len(data)
    per_epoch = sum(1 for i in range(0, n, cfg.batch_size) if min(cfg.batch_size, n - i) >= 2)
    total = per_epoch * cfg.epochs
    opt = AdamW({k: params[k] for k in trainable}, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    current = DualEncoder(student.config, student.arch, params, dict(student.provenance))

    step = 0
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys((*COMPONENTS, "total"), 0.0)
        count = 0
        for idx in _batches(n, cfg.batch_size, rng):
            vt, tt = data.vision[idx], data.text[idx]
            t_out = teacher_forward(teacher, vt, tt) if teacher is not None else None
            leaves = {k: nx.param(params[k]) for k in trainable}
            try:
                comps = batch_losses(current, leaves, vt, tt, cfg, t_out, lmap)
                loss = total_loss(comps, cfg)
                if not np.isfinite(loss.value).all():
                    raise NumericsError("non-finite loss")
                nx.backward(loss)
            except NumericsError as exc:
                snapshot = DualEncoder(student.config, student.arch, {k: v.copy() for k, v in params.items()})
                raise TrainingError(f"training diverged at step {step}: {exc}", snapshot, step) from exc
            logged = {k: float(comps[k].value) if k in comps else 0.0 for k in COMPONENTS}
            logged["total"] = float(loss.value)
            logged["lr"] = lr_at(step, total, cfg)
            report.steps.append(logged)
            for k in sums:
                sums[k] += logged[k]
            count += 1
            opt.step(params, {k: leaves[k].grad for k in trainable}, logged["lr"])
            if "logit_scale" in params:
                np.clip(params["logit_scale"], 0.0, MAX_LOGIT_SCALE, out=params["logit_scale"])
            step += 1
        report.epochs.append({k: v / max(count, 1) for k, v in sums.items()})
        log.debug("epoch %d: %s", epoch, report.epochs[-1])

    if eval_split is not None:
        report.metrics = evaluate(current, eval_split)
    report.wall_time = time.perf_counter() - t0
    return current, report
