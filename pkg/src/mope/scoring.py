"""Module-wise pruning error and the cost tables built from it.

The score of a module is the drop in a retrieval objective when that single
module is ablated:

    score(m) = Z(model) - Z(model with m ablated)

Higher scores mark modules the model can least afford to lose. Heads are
scored on the model as given; FFN neurons are first rewired (sorted by a
first-order saliency) so that each contiguous neuron group is an importance
block, then groups are scored on the rewired model.
"""

from __future__ import annotations

import enum
import hashlib
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mope import numerics as nx
from mope.canonical import canonical_dumps, clean_float
from mope.distill import itc_loss
from mope.evaluation import Objective, PairedSplit, evaluate, objective_value
from mope.model import (
    DEFAULT_GROUPS,
    ENCODERS,
    AblationSet,
    DualEncoder,
    ModuleId,
    apply_permutations,
    encode,
    group_bounds,
    sort_ids,
)

TABLE_KINDS = {"head": "heads", "group": "groups", "layer": "layers"}


class UsageError(ValueError):
    pass


class ImportanceMetric(str, enum.Enum):
    MOPE = "mope"
    MAGNITUDE = "magnitude"
    LOSS_GRADIENT = "loss-gradient"
    EVERY_OTHER = "every-other"
    TOP_LAYERS = "top-layers"
    BOTTOM_LAYERS = "bottom-layers"


POSITIONAL = (ImportanceMetric.EVERY_OTHER, ImportanceMetric.TOP_LAYERS, ImportanceMetric.BOTTOM_LAYERS)


def default_workers() -> int:
    return int(os.environ.get("MOPE_WORKERS", "1"))


@dataclass(frozen=True)
class ScoreConfig:
    n_groups: int = DEFAULT_GROUPS
    objective: Objective = Objective.RECALL_MEAN
    split_id: str = "val"
    workers: int = field(default_factory=default_workers)
    importance_batch: int = 64

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        if self.n_groups < 1 or self.workers < 1:
            raise ValueError("n_groups and workers must be positive")


def split_key(split: PairedSplit) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(split.vision, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(split.text, dtype="<i8").tobytes())
    return f"{split.name}:{h.hexdigest()[:16]}"


_z_cache: dict[tuple, float] = {}
_z_lock = threading.Lock()


def full_objective(model: DualEncoder, split: PairedSplit, objective=Objective.RECALL_MEAN) -> float:
    """Objective of the unablated model, cached per (model, split, objective)."""
    key = (model.param_hash(), split_key(split), Objective(objective))
    with _z_lock:
        if key in _z_cache:
            return _z_cache[key]
    z = objective_value(evaluate(model, split), objective)
    with _z_lock:
        _z_cache[key] = z
    return z


def clear_cache() -> None:
    with _z_lock:
        _z_cache.clear()


def mope_score(
    model: DualEncoder,
    module: ModuleId,
    split: PairedSplit,
    objective=Objective.RECALL_MEAN,
    n_groups: int = DEFAULT_GROUPS,
    z_full: float | None = None,
) -> float:
    model.check_id(module, n_groups)
    if z_full is None:
        z_full = full_objective(model, split, objective)
    ablated = evaluate(model, split, AblationSet.of(module, n_groups=n_groups))
    return z_full - objective_value(ablated, objective)


def score_modules(
    model: DualEncoder,
    ids,
    split: PairedSplit,
    objective=Objective.RECALL_MEAN,
    n_groups: int = DEFAULT_GROUPS,
    workers: int = 1,
) -> dict[ModuleId, float]:
    """Score each id independently; results keyed in canonical id order."""
    ids = sort_ids(ids)
    z = full_objective(model, split, objective)

    def one(mid):
        return mope_score(model, mid, split, objective, n_groups, z)

    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(one, ids))
    else:
        scores = [one(mid) for mid in ids]
    return dict(zip(ids, scores))


# -- first-order saliency -------------------------------------------------------------


def _saliency_pass(model: DualEncoder, split: PairedSplit, batch_size: int) -> list[dict]:
    """Per batch, the tapped activations and their itc-loss gradients."""
    n = len(split)
    if n == 0:
        raise UsageError("saliency needs a nonempty split")
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    out = []
    for i, s in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n
        if stop - s < 2:
            raise UsageError("saliency needs at least two pairs per batch")
        leaves = {k: nx.param(v) for k, v in model.params.items()}
        taps = {enc: {} for enc in ENCODERS}
        ev = encode(model, "vision", split.vision[s:stop], weights=leaves, taps=taps["vision"])
        el = encode(model, "text", split.text[s:stop], weights=leaves, taps=taps["text"])
        nx.backward(itc_loss(ev.feature, el.feature, leaves["logit_scale"]))
        out.append({enc: {k: (node.value, node.grad) for k, node in t.items()} for enc, t in taps.items()})
    return out


def neuron_importance(model: DualEncoder, split: PairedSplit, batch_size: int = 64) -> dict[str, list[np.ndarray]]:
    """Sum over the split of |activation * d itc / d activation| per FFN neuron."""
    scores = {enc: [np.zeros(la.ffn) for la in model.arch[enc]] for enc in ENCODERS}
    for batch in _saliency_pass(model, split, batch_size):
        for enc in ENCODERS:
            for l in range(len(model.arch[enc])):
                act, grad = batch[enc][("ffn", l)]
                scores[enc][l] += np.abs(act * grad).reshape(-1, act.shape[-1]).sum(axis=0)
    return scores


def rewire_ffn(
    model: DualEncoder, split: PairedSplit, batch_size: int = 64
) -> tuple[DualEncoder, dict[str, dict[int, list[int]]]]:
    """Sort every layer's FFN neurons by descending importance (ties by index)."""
    imp = neuron_importance(model, split, batch_size)
    perms = {
        enc: {l: np.argsort(-s, kind="stable").tolist() for l, s in enumerate(imp[enc])}
        for enc in ENCODERS
    }
    return apply_permutations(model, perms), perms


# -- baseline metrics ----------------------------------------------------------------------


def _magnitude(model: DualEncoder, kind: str, n_groups: int) -> dict[ModuleId, float]:
    dh = model.config.d_head
    out = {}
    for enc in ENCODERS:
        for l, la in enumerate(model.arch[enc]):
            p = lambda name: model.params[f"{enc}.layers.{l}.{name}"]  # noqa: E731
            if kind == "head":
                for h in range(la.heads):
                    sl = slice(h * dh, (h + 1) * dh)
                    parts = [p("wq")[:, sl], p("wk")[:, sl], p("wv")[:, sl], p("wo")[sl, :]]
                    out[ModuleId.head(enc, l, h)] = float(np.sqrt(sum((x * x).sum() for x in parts)))
            else:
                for g, (lo, hi) in enumerate(group_bounds(la.ffn, n_groups)):
                    sq = (p("w1")[:, lo:hi] ** 2).sum() + (p("w2")[lo:hi, :] ** 2).sum()
                    out[ModuleId.group(enc, l, g)] = float(np.sqrt(sq))
    return out


def _loss_gradient(model: DualEncoder, kind: str, split: PairedSplit, n_groups: int, batch_size: int):
    acc: dict[ModuleId, float] = {}
    for batch in _saliency_pass(model, split, batch_size):
        for enc in ENCODERS:
            for l, la in enumerate(model.arch[enc]):
                act, grad = batch[enc][("ffn", l)]
                neuron = np.abs(act * grad).reshape(-1, act.shape[-1]).sum(axis=0)
                heads = []
                for h in range(la.heads):
                    ctx, g = batch[enc][("head", l, h)]
                    heads.append(float(np.abs(ctx * g).sum()))
                if kind == "layer":
                    keys_vals = [(ModuleId.whole_layer(enc, l), float(neuron.sum()) + sum(heads))]
                elif kind == "head":
                    keys_vals = [(ModuleId.head(enc, l, h), v) for h, v in enumerate(heads)]
                else:
                    keys_vals = [
                        (ModuleId.group(enc, l, g), float(neuron[lo:hi].sum()))
                        for g, (lo, hi) in enumerate(group_bounds(la.ffn, n_groups))
                    ]
                for k, v in keys_vals:
                    acc[k] = acc.get(k, 0.0) + v
    return acc


def baseline_importance(
    model: DualEncoder,
    metric: ImportanceMetric | str,
    kind: str = "layer",
    split: PairedSplit | None = None,
    n_groups: int = DEFAULT_GROUPS,
    objective=Objective.RECALL_MEAN,
    batch_size: int = 64,
) -> dict[ModuleId, float]:
    """Importance scores under a baseline metric; higher means keep.

    Positional layer strategies express their removal order as scores:
    ``top-layers`` drops the highest layers first, ``bottom-layers`` the
    lowest, ``every-other`` the odd-indexed layers first.
    """
    metric = ImportanceMetric(metric)
    if kind not in TABLE_KINDS:
        raise UsageError(f"unknown module kind {kind!r}")
    if metric in POSITIONAL and kind != "layer":
        raise UsageError(f"{metric.value} ranks layers only")
    if metric is ImportanceMetric.MAGNITUDE and kind == "layer":
        raise UsageError("magnitude ranks heads and neuron groups only")
    if metric in (ImportanceMetric.LOSS_GRADIENT, ImportanceMetric.MOPE) and split is None:
        raise UsageError(f"{metric.value} needs an evaluation split")

    if metric is ImportanceMetric.MOPE:
        return score_modules(model, model.all_module_ids(kind, n_groups), split, objective, n_groups)
    if metric is ImportanceMetric.MAGNITUDE:
        return _magnitude(model, kind, n_groups)
    if metric is ImportanceMetric.LOSS_GRADIENT:
        return _loss_gradient(model, kind, split, n_groups, batch_size)
    out = {}
    for enc in ENCODERS:
        for l in range(len(model.arch[enc])):
            if metric is ImportanceMetric.TOP_LAYERS:
                s = -float(l)
            elif metric is ImportanceMetric.BOTTOM_LAYERS:
                s = float(l)
            else:
                s = float(l % 2 == 0)
            out[ModuleId.whole_layer(enc, l)] = s
    return out


# -- cost tables ------------------------------------------------------------------------------


@dataclass
class CostTables:
    heads: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    layers: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def table(self, kind: str) -> dict:
        return getattr(self, TABLE_KINDS[kind])

    def with_layers(self, other: "CostTables") -> "CostTables":
        """Copy of these tables carrying ``other``'s layer table and its provenance."""
        meta = dict(self.meta)
        meta["layers_model_hash"] = other.meta["model_hash"]
        meta["layers_z_full"] = other.meta["z_full"]
        return CostTables(dict(self.heads), dict(self.groups), dict(other.layers), meta)

    def to_dict(self) -> dict:
        def enc(t):
            return {str(k): clean_float(v) for k, v in t.items()}

        return {"heads": enc(self.heads), "groups": enc(self.groups), "layers": enc(self.layers), "meta": self.meta}

    def to_json(self) -> str:
        return canonical_dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data) -> "CostTables":
        def dec(t):
            return {ModuleId.parse(k): float(v) for k, v in t.items()}

        return cls(dec(data["heads"]), dec(data["groups"]), dec(data["layers"]), dict(data["meta"]))

    def permutations(self) -> dict | None:
        perms = self.meta.get("permutations")
        if not perms:
            return None
        return {enc: {int(l): list(p) for l, p in layers.items()} for enc, layers in perms.items()}


def build_cost_tables(
    model: DualEncoder,
    split: PairedSplit,
    cfg: ScoreConfig = ScoreConfig(),
    kinds=("head", "group", "layer"),
) -> CostTables:
    """Score every module of the requested kinds on ``split``.

    Heads and layers are scored on ``model`` itself, groups on the rewired
    model; the rewiring permutations are recorded in ``meta`` so plans can be
    replayed on the original weights.
    """
    tables = CostTables()
    meta = {
        "objective": cfg.objective.value,
        "split": split_key(split),
        "split_id": cfg.split_id,
        "n_groups": cfg.n_groups,
        "model_hash": model.param_hash(),
        "z_full": full_objective(model, split, cfg.objective),
    }
    if "head" in kinds:
        tables.heads = score_modules(model, model.all_module_ids("head"), split, cfg.objective, cfg.n_groups, cfg.workers)
    if "group" in kinds:
        rewired, perms = rewire_ffn(model, split, cfg.importance_batch)
        tables.groups = score_modules(
            rewired, rewired.all_module_ids("group", cfg.n_groups), split, cfg.objective, cfg.n_groups, cfg.workers
        )
        meta["permutations"] = {enc: {str(l): p for l, p in layers.items()} for enc, layers in perms.items()}
        meta["rewired_hash"] = rewired.param_hash()
    if "layer" in kinds:
        tables.layers = score_modules(model, model.all_module_ids("layer"), split, cfg.objective, cfg.n_groups, cfg.workers)
        meta["layers_model_hash"] = meta["model_hash"]
    tables.meta = meta
    return tables
