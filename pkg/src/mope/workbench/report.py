"""Comparison tables rendered from stored metrics artifacts.

Every number in a report is copied from an artifact file, never recomputed;
each table names the artifact it came from and that file's sha256.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from mope.canonical import sha256_bytes
from mope.scoring import UsageError

LOSS_LABELS = {
    "full": "Full",
    "no-sim": "w/o L_sim",
    "no-feat": "w/o L_feat",
    "no-hidn": "w/o L_hidn",
    "no-distill": "w/o Distillation",
}


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Artifact:
    name: str
    sha256: str
    doc: dict


def load_artifact(path: str | Path) -> Artifact:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"artifact {str(p)!r} not found")
    raw = p.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ReportError(f"artifact {p.name} is not JSON: {exc}") from None
    return Artifact(p.name, sha256_bytes(raw), doc)


@dataclass(frozen=True)
class Table:
    title: str
    source: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]


def cell(value) -> str:
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _ks(d: dict) -> list[str]:
    return sorted(d, key=int)


def _metric_columns(m: dict) -> list[str]:
    return [f"TR@{k}" for k in _ks(m["tr_at"])] + [f"IR@{k}" for k in _ks(m["ir_at"])] + ["Recall Mean"]


def _metric_cells(m: dict) -> list[str]:
    vals = [m["tr_at"][k] for k in _ks(m["tr_at"])] + [m["ir_at"][k] for k in _ks(m["ir_at"])]
    return [cell(v) for v in vals] + [cell(m["recall_mean"])]


def _need(doc: dict, key: str, art: Artifact):
    if key not in doc:
        raise ReportError(f"artifact {art.name} lacks field {key!r}")
    return doc[key]


def _compare_table(art: Artifact) -> Table:
    rows = _need(art.doc, "rows", art)
    if not rows:
        raise UsageError(f"artifact {art.name}: empty strategy list")
    family = art.doc.get("family", "depth")
    ks_tr = sorted({c[3:] for c in rows[0] if c.startswith("TR@")}, key=int)
    ks_ir = sorted({c[3:] for c in rows[0] if c.startswith("IR@")}, key=int)
    metric_cols = [f"TR@{k}" for k in ks_tr] + [f"IR@{k}" for k in ks_ir]
    by_name = {r["strategy"]: r for r in rows}

    if family == "loss":
        missing = [LOSS_LABELS[k] for k in LOSS_LABELS if k not in by_name]
        if missing:
            raise ReportError(f"artifact {art.name}: loss-ablation report missing rows {', '.join(missing)}")
        order = list(LOSS_LABELS)
        label = LOSS_LABELS.__getitem__
        title = "Loss ablation"
        first = "Variant"
    else:
        order = [r["strategy"] for r in sorted(rows, key=lambda r: r["rank"])]
        label = str
        title = {"depth": "Layer selection strategies", "framework": "Pruning frameworks"}.get(family, "Strategies")
        first = "Strategy"
    body = []
    for name in order:
        r = by_name[name]
        body.append(
            (label(name), cell(r["params"]), *(cell(r[c]) for c in metric_cols), cell(r["recall_mean"]), cell(r["rank"]))
        )
    cols = (first, "Params", *metric_cols, "Recall Mean", "Rank")
    return Table(title, f"{art.name} sha256:{art.sha256}", cols, tuple(body))


def _pipeline_table(art: Artifact) -> Table:
    phases = _need(art.doc, "phases", art)
    teacher = _need(art.doc, "teacher_metrics", art)
    cols = ("Model", "Params", *_metric_columns(teacher))
    body = [("teacher", cell(_need(art.doc, "teacher_params", art)), *_metric_cells(teacher))]
    for ph in phases:
        body.append((f"after {ph['name']}", cell(ph["params"]), *_metric_cells(ph["metrics"])))
    title = f"{art.doc.get('stage', '?')} pipeline"
    return Table(title, f"{art.name} sha256:{art.sha256}", cols, tuple(body))


def _eval_table(art: Artifact) -> Table:
    m = _need(art.doc, "metrics", art)
    cols = ("Split", "Params", *_metric_columns(m))
    body = ((art.doc.get("split", "?"), cell(art.doc.get("params")), *_metric_cells(m)),)
    title = {"eval": "Evaluation", "distill": "Distilled student", "train-teacher": "Teacher"}[art.doc["kind"]]
    return Table(title, f"{art.name} sha256:{art.sha256}", cols, body)


_BUILDERS = {
    "compare": _compare_table,
    "pipeline": _pipeline_table,
    "eval": _eval_table,
    "distill": _eval_table,
    "train-teacher": _eval_table,
}


@dataclass(frozen=True)
class Report:
    tables: tuple[Table, ...]

    def markdown(self) -> str:
        out = ["# Pruning report", ""]
        for t in self.tables:
            out += [f"## {t.title}", "", f"Source: `{t.source}`", ""]
            out.append("| " + " | ".join(t.columns) + " |")
            out.append("|" + "|".join("---" for _ in t.columns) + "|")
            out += ["| " + " | ".join(r) + " |" for r in t.rows]
            out.append("")
        return "\n".join(out)

    def csv(self) -> str:
        """One block per table: a header row starting with ``table``, then its rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for t in self.tables:
            w.writerow(["table", "source", *t.columns])
            for r in t.rows:
                w.writerow([t.title, t.source, *r])
        return buf.getvalue()


def report_markdown(artifacts) -> Report:
    """Tables for each artifact, in the order given.

    ``artifacts`` holds :class:`Artifact` values or paths. Compare artifacts
    from the loss family must carry all five variants.
    """
    arts = [a if isinstance(a, Artifact) else load_artifact(a) for a in artifacts]
    if not arts:
        raise UsageError("report needs at least one artifact")
    tables = []
    for art in arts:
        kind = art.doc.get("kind")
        if kind not in _BUILDERS:
            raise ReportError(f"artifact {art.name}: cannot report kind {kind!r}")
        tables.append(_BUILDERS[kind](art))
    return Report(tuple(tables))
