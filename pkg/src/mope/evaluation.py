"""Cross-modal retrieval metrics and the scalar objective used for scoring.

Ground truth is the diagonal pairing: image ``i`` matches caption ``i``.
Recall Mean is taken as the mean of the six entries
{TR, IR} x {R@1, R@5, R@10}.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from mope.model import EMPTY, AblationSet, DualEncoder, encode_features

DEFAULT_KS = (1, 5, 10)


class EvalError(ValueError):
    pass


class Objective(str, enum.Enum):
    TR_MEAN = "tr-mean"
    IR_MEAN = "ir-mean"
    RECALL_MEAN = "recall-mean"


@dataclass(frozen=True)
class PairedSplit:
    """Aligned token rows for both modalities; row ``i`` of each is a pair."""

    name: str
    vision: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        if len(self.vision) != len(self.text):
            raise EvalError(f"split {self.name!r}: {len(self.vision)} vision rows vs {len(self.text)} text rows")

    def __len__(self) -> int:
        return len(self.vision)

    def subset(self, idx) -> "PairedSplit":
        return PairedSplit(self.name, self.vision[idx], self.text[idx])


@dataclass(frozen=True)
class RetrievalMetrics:
    tr_at: dict = field(default_factory=dict)
    ir_at: dict = field(default_factory=dict)

    @property
    def tr_mean(self) -> float:
        return float(np.mean([self.tr_at[k] for k in sorted(self.tr_at)]))

    @property
    def ir_mean(self) -> float:
        return float(np.mean([self.ir_at[k] for k in sorted(self.ir_at)]))

    @property
    def recall_mean(self) -> float:
        vals = [self.tr_at[k] for k in sorted(self.tr_at)] + [self.ir_at[k] for k in sorted(self.ir_at)]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "tr_at": {str(k): v for k, v in sorted(self.tr_at.items())},
            "ir_at": {str(k): v for k, v in sorted(self.ir_at.items())},
            "tr_mean": self.tr_mean,
            "ir_mean": self.ir_mean,
            "recall_mean": self.recall_mean,
        }

    @classmethod
    def from_dict(cls, data) -> "RetrievalMetrics":
        return cls(
            {int(k): float(v) for k, v in data["tr_at"].items()},
            {int(k): float(v) for k, v in data["ir_at"].items()},
        )


def similarity_matrix(fv: np.ndarray, fl: np.ndarray) -> np.ndarray:
    fv, fl = np.asarray(fv, dtype=np.float64), np.asarray(fl, dtype=np.float64)
    if fv.ndim != 2 or fl.ndim != 2 or fv.shape[1] != fl.shape[1]:
        raise EvalError(f"feature shapes {fv.shape} and {fl.shape} do not share an embedding dim")
    return fv @ fl.T


def match_ranks(sim: np.ndarray, direction: str = "i2t") -> np.ndarray:
    """0-based rank of the true match per query.

    Candidates scoring strictly higher, or equal with a lower index, rank
    ahead of the true match.
    """
    s = np.asarray(sim, dtype=np.float64)
    if direction == "t2i":
        s = s.T
    elif direction != "i2t":
        raise EvalError(f"unknown direction {direction!r}")
    n = s.shape[0]
    diag = s[np.arange(n), np.arange(n)][:, None]
    idx = np.arange(n)
    ahead = (s > diag) | ((s == diag) & (idx[None, :] < idx[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(sim: np.ndarray, k: int, direction: str = "i2t") -> float:
    n = sim.shape[0]
    if not 1 <= k <= n:
        raise EvalError(f"k={k} outside [1, {n}]")
    return float(np.mean(match_ranks(sim, direction) < k))


def metrics_from_similarity(sim: np.ndarray, ks=DEFAULT_KS) -> RetrievalMetrics:
    n = sim.shape[0]
    if n == 0:
        raise EvalError("empty similarity matrix")
    if max(ks) > n:
        warnings.warn(f"recall K clamped to split size {n}", stacklevel=2)
    tr_rank = match_ranks(sim, "i2t")
    ir_rank = match_ranks(sim, "t2i")
    tr = {k: float(np.mean(tr_rank < min(k, n))) for k in ks}
    ir = {k: float(np.mean(ir_rank < min(k, n))) for k in ks}
    return RetrievalMetrics(tr, ir)


def evaluate(
    model: DualEncoder,
    split: PairedSplit,
    ablation: AblationSet = EMPTY,
    ks=DEFAULT_KS,
    batch_size: int = 256,
) -> RetrievalMetrics:
    if len(split) == 0:
        raise EvalError(f"split {split.name!r} is empty")
    fv = encode_features(model, "vision", split.vision, ablation, batch_size)
    fl = encode_features(model, "text", split.text, ablation, batch_size)
    return metrics_from_similarity(similarity_matrix(fv, fl), ks)


def objective_value(metrics: RetrievalMetrics, objective: Objective | str = Objective.RECALL_MEAN) -> float:
    objective = Objective(objective)
    if objective is Objective.TR_MEAN:
        return metrics.tr_mean
    if objective is Objective.IR_MEAN:
        return metrics.ir_mean
    return metrics.recall_mean
