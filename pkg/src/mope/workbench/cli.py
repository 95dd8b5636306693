"""Command line entry point.

Every subcommand reads the run config (``--config`` JSON plus flag
overrides), writes its artifacts into ``--out`` and records them in
``manifest.json``. Failures print one JSON line on stderr,
``{"error": <code>, "message": <text>}``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from mope import __version__
from mope.canonical import canonical_dumps, read_json, sha256_bytes, sha256_file, sha256_json
from mope.distill import TrainingError, train_distill
from mope.evaluation import evaluate
from mope.model import PruneError, init_model, param_count
from mope.pruning import (
    PlanningError,
    PruningPlan,
    _strategy_family,
    apply_plan,
    combine_plans,
    compare_strategies,
    make_depth_plan,
    make_width_plan,
    run_finetune_pipeline,
    run_pretrain_pipeline,
)
from mope.scoring import (
    POSITIONAL,
    CostTables,
    ImportanceMetric,
    UsageError,
    baseline_importance,
    build_cost_tables,
    split_key,
)
from mope.workbench.checkpoint import FormatError, checkpoint_bytes, load_checkpoint
from mope.workbench.config import RunConfig, load_config, parse_assignment
from mope.workbench.data import SPLITS, SpecError, dataset_bytes, dataset_hash, generate_dataset, load_dataset
from mope.workbench.report import ReportError, load_artifact, report_markdown

LOCK_NAME = ".mope.lock"

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "missing-input": 3,
    "hash-mismatch": 4,
    "format": 5,
    "plan": 6,
    "training": 7,
    "report": 8,
    "locked": 9,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class HashMismatch(CliError):
    def __init__(self, message: str):
        super().__init__("hash-mismatch", message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- flags ------------------------------------------------------------------------------------

FLAGS = {
    "config": dict(help="run config JSON document"),
    "seed": dict(type=int, help="seed for data, initialisation and training"),
    "data": dict(help="split name, dataset path, or PATH:SPLIT"),
    "model": dict(help="input checkpoint"),
    "teacher": dict(help="teacher checkpoint"),
    "tables": dict(help="cost_tables.json from `score`"),
    "plan": dict(help="plan.json from `plan`"),
    "width": dict(type=float, help="fraction of heads and neuron groups kept per layer"),
    "depth": dict(type=int, help="layers kept per encoder"),
    "budget": dict(type=int, help="global parameter budget (switches to budget mode)"),
    "strategy": dict(help="importance metric; for compare a comma-separated list"),
    "objective": dict(choices=["tr-mean", "ir-mean", "recall-mean"]),
    "workers": dict(type=int, help="scoring threads (default: $MOPE_WORKERS or 1)"),
    "stage": dict(choices=["finetune", "pretrain"]),
    "out": dict(help="output directory"),
}

COMMON = ("config", "seed", "out")
COMMANDS = {
    "gen-data": (),
    "train-teacher": ("data",),
    "score": ("data", "model", "strategy", "objective", "workers"),
    "plan": ("model", "tables", "width", "depth", "budget"),
    "prune": ("model", "plan"),
    "distill": ("data", "model", "teacher"),
    "eval": ("data", "model"),
    "pipeline": ("data", "teacher", "stage", "width", "depth", "budget", "strategy", "objective", "workers"),
    "compare": ("data", "teacher", "width", "depth", "budget", "strategy", "objective", "workers"),
    "report": (),
}

_LEAF = {
    "seed": "seed",
    "width": "target.width",
    "depth": "target.depth",
    "budget": "target.budget",
    "objective": "score.objective",
    "workers": "score.workers",
    "stage": "stage",
    "strategy": "strategy",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mope", description="Module-level pruning for dual-encoder retrieval models.")
    parser.add_argument("--version", action="version", version=f"mope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, extra in COMMANDS.items():
        p = sub.add_parser(name)
        for flag in (*COMMON, *extra):
            p.add_argument(f"--{flag}", **FLAGS[flag])
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config leaf")
        if name == "report":
            p.add_argument("artifacts", nargs="*", help="metrics.json files to tabulate")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {}
    for flag, leaf in _LEAF.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "strategy" and args.command == "compare":
            overrides["strategies"] = [s for s in value.split(",") if s]
        else:
            overrides[leaf] = value
    if getattr(args, "budget", None) is not None:
        overrides["target.mode"] = "budget"
    for item in args.set:
        key, value = parse_assignment(item)
        overrides[key] = value
    return load_config(args.config, overrides)


# -- run bookkeeping --------------------------------------------------------------------------


class Run:
    """Collects input/output hashes and timings for one subcommand."""

    def __init__(self, command: str, cfg: RunConfig, out: Path | None):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.times: dict[str, float] = {}
        self._t0 = time.perf_counter()

    @contextlib.contextmanager
    def timed(self, label: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.times[label] = time.perf_counter() - t

    def _write(self, name: str, data: bytes) -> str:
        path = self.out / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
        self.outputs[name] = sha256_bytes(data)
        return self.outputs[name]

    def write_json(self, name: str, obj) -> str:
        return self._write(name, (canonical_dumps(obj) + "\n").encode("ascii"))

    def write_bytes(self, name: str, data: bytes) -> str:
        return self._write(name, data)

    def write_text(self, name: str, text: str) -> str:
        return self._write(name, text.encode("utf-8"))

    def manifest(self) -> dict:
        self.times["total"] = time.perf_counter() - self._t0
        return {
            "tool": "mope",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "wall_time": {k: round(v, 6) for k, v in sorted(self.times.items())},
        }

    def finish(self) -> dict:
        m = self.manifest()
        if self.out is not None:
            (self.out / "manifest.json").write_text(canonical_dumps(m) + "\n")
        return m


def manifest_digest(manifest: dict) -> str:
    """Hash of a manifest with wall times removed; equal digests mean an identical rerun."""
    return sha256_json({k: v for k, v in manifest.items() if k != "wall_time"})


@contextlib.contextmanager
def out_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError("locked", f"output directory {str(out)!r} is in use (remove {LOCK_NAME} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# -- inputs -----------------------------------------------------------------------------------


def resolve_data(arg: str | None, cfg: RunConfig, default_split: str):
    """(spec, splits, chosen split name, dataset hash) for a ``--data`` value.

    A bare split name (or no value) regenerates the dataset from the config;
    anything else is a dataset file, optionally suffixed ``:SPLIT``.
    """
    path, split = None, default_split
    if arg:
        if arg in SPLITS:
            split = arg
        else:
            head, sep, tail = arg.rpartition(":")
            if sep and tail in SPLITS:
                path, split = head, tail
            else:
                path = arg
    if path is None:
        spec = cfg.data_spec()
        splits = generate_dataset(spec)
        return spec, splits, split, dataset_hash(spec, splits)
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset {path!r} not found")
    spec, splits = load_dataset(path)
    if split not in splits:
        raise UsageError(f"dataset has no split {split!r}")
    return spec, splits, split, sha256_file(path)


def load_model(path: str | None, role: str, run: Run):
    if path is None:
        raise UsageError(f"--{role} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{role} checkpoint {path!r} not found")
    model = load_checkpoint(path)
    run.inputs[role] = sha256_file(path)
    return model


def _load_json(path: str | None, flag: str, run: Run):
    if path is None:
        raise UsageError(f"--{flag} is required")
    if not Path(path).is_file():
        raise FileNotFoundError(f"{flag} file {path!r} not found")
    run.inputs[flag] = sha256_file(path)
    try:
        return read_json(path)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{flag} file {path!r} is not JSON: {exc}") from None


def _hashes_in(obj):
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k == "model_hash" and v is not None:
                yield v
            else:
                yield from _hashes_in(v)


def _train_teacher(cfg: RunConfig, spec, splits, data_hash: str, run: Run):
    model = init_model(cfg.model_config(spec))
    model.provenance = {"role": "teacher", "dataset": data_hash, "seed": cfg.seed}
    with run.timed("train"):
        teacher, rep = train_distill(model, None, splits["train"], cfg.teacher_config())
    return teacher, rep


def _teacher_or_train(args, cfg, spec, splits, data_hash, run: Run):
    if args.teacher:
        return load_model(args.teacher, "teacher", run)
    teacher, _ = _train_teacher(cfg, spec, splits, data_hash, run)
    run.write_bytes("teacher.ckpt", checkpoint_bytes(teacher))
    return teacher


def _print(obj) -> None:
    print(canonical_dumps(obj))


# -- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args, cfg, run: Run):
    spec = cfg.data_spec()
    h = run.write_bytes("dataset.json", dataset_bytes(spec, generate_dataset(spec)))
    _print({"dataset": h})


def cmd_train_teacher(args, cfg, run: Run):
    spec, splits, _, dh = resolve_data(args.data, cfg, "val")
    run.inputs["dataset"] = dh
    teacher, rep = _train_teacher(cfg, spec, splits, dh, run)
    val = evaluate(teacher, splits["val"])
    test = evaluate(teacher, splits[cfg.eval_split])
    run.write_bytes("teacher.ckpt", checkpoint_bytes(teacher))
    run.write_json("metrics.json", {
        "kind": "train-teacher",
        "split": cfg.eval_split,
        "metrics": test.to_dict(),
        "val_metrics": val.to_dict(),
        "params": param_count(teacher),
        "train": rep.to_dict(),
    })
    _print({"val_recall_at_1": (val.tr_at[1] + val.ir_at[1]) / 2, "recall_mean": test.recall_mean})


def _baseline_tables(model, metric: ImportanceMetric, kinds, split, cfg: RunConfig) -> CostTables:
    sc = cfg.score_config()
    allowed = {"layer"} if metric in POSITIONAL else (
        {"head", "group"} if metric is ImportanceMetric.MAGNITUDE else {"head", "group", "layer"}
    )
    use = [k for k in kinds if k in allowed]
    if not use:
        raise UsageError(f"{metric.value} scores none of the requested kinds {list(kinds)}")
    t = CostTables(meta={
        "objective": sc.objective.value,
        "split": split_key(split),
        "split_id": sc.split_id,
        "n_groups": sc.n_groups,
        "model_hash": model.param_hash(),
    })
    for kind in use:
        scores = baseline_importance(model, metric, kind, split, sc.n_groups, sc.objective, sc.importance_batch)
        setattr(t, {"head": "heads", "group": "groups", "layer": "layers"}[kind], scores)
    if "layer" in use:
        t.meta["layers_model_hash"] = t.meta["model_hash"]
    return t


def cmd_score(args, cfg, run: Run):
    model = load_model(args.model, "model", run)
    _, splits, name, dh = resolve_data(args.data, cfg, cfg.score["split"])
    run.inputs["dataset"] = dh
    metric = ImportanceMetric(cfg.strategy)
    kinds = tuple(cfg.score["kinds"])
    sc = cfg.score_config()
    with run.timed("score"):
        if metric is ImportanceMetric.MOPE:
            tables = build_cost_tables(model, splits[name], replace(sc, split_id=name), kinds)
        else:
            tables = _baseline_tables(model, metric, kinds, splits[name], cfg)
    tables.meta["strategy"] = metric.value
    h = run.write_json("cost_tables.json", tables.to_dict())
    _print({"cost_tables": h, "z_full": tables.meta.get("z_full")})


def cmd_plan(args, cfg, run: Run):
    model = load_model(args.model, "model", run)
    tables = CostTables.from_dict(_load_json(args.tables, "tables", run))
    mh = model.param_hash()
    for key in ("model_hash", "layers_model_hash"):
        declared = tables.meta.get(key)
        if declared is not None and declared != mh and (key == "model_hash" or tables.layers):
            raise HashMismatch(f"cost tables {key} {declared[:12]} does not match model {mh[:12]}")
    target = cfg.prune_target()
    mode = cfg.plan_mode()
    width_wanted = mode == "budget" or cfg.target["width"] < 1
    depth_wanted = cfg.target["depth"] is not None
    if not (width_wanted or depth_wanted):
        raise UsageError("target removes nothing; set --width below 1, --depth or --budget")
    plans = []
    if width_wanted:
        plans.append(make_width_plan(tables, model, target, mode))
    if depth_wanted:
        if not tables.layers:
            raise UsageError("cost tables carry no layer scores; rerun score with layer in score.kinds")
        strategy = tables.meta.get("strategy", ImportanceMetric.MOPE.value)
        plans.append(make_depth_plan(tables, model, cfg.target["depth"], strategy))
    plan = combine_plans(model, *plans) if len(plans) == 2 else plans[0]
    h = run.write_json("plan.json", plan.to_dict())
    _print({"plan": h, "predicted_params": plan.predicted_params, "removed": len(plan.remove)})


def cmd_prune(args, cfg, run: Run):
    model = load_model(args.model, "model", run)
    plan = PruningPlan.from_dict(_load_json(args.plan, "plan", run))
    mh = model.param_hash()
    for declared in _hashes_in(plan.provenance):
        if declared != mh:
            raise HashMismatch(f"plan was made for model {declared[:12]}, loaded model is {mh[:12]}")
    student = apply_plan(model, plan)
    student.provenance = {"role": "student", "source_hash": mh, "plan": run.inputs["plan"]}
    run.write_bytes("pruned.ckpt", checkpoint_bytes(student))
    params = param_count(student)
    run.write_json("metrics.json", {"kind": "prune", "params": params, "predicted_params": plan.predicted_params})
    _print({"params": params, "predicted_params": plan.predicted_params})


def cmd_distill(args, cfg, run: Run):
    student = load_model(args.model, "model", run)
    teacher = load_model(args.teacher, "teacher", run) if args.teacher else None
    if teacher is not None:
        declared = student.provenance.get("source_hash")
        if declared is not None and declared != teacher.param_hash():
            raise HashMismatch(
                f"student was pruned from {declared[:12]}, teacher is {teacher.param_hash()[:12]}"
            )
    _, splits, _, dh = resolve_data(args.data, cfg, "train")
    run.inputs["dataset"] = dh
    with run.timed("train"):
        out, rep = train_distill(student, teacher, splits["train"], cfg.distill_config())
    m = evaluate(out, splits[cfg.eval_split])
    run.write_bytes("student.ckpt", checkpoint_bytes(out))
    run.write_json("metrics.json", {
        "kind": "distill",
        "split": cfg.eval_split,
        "metrics": m.to_dict(),
        "params": param_count(out),
        "train": rep.to_dict(),
    })
    _print({"recall_mean": m.recall_mean, "distilled": teacher is not None})


def cmd_eval(args, cfg, run: Run):
    model = load_model(args.model, "model", run)
    _, splits, name, dh = resolve_data(args.data, cfg, cfg.eval_split)
    run.inputs["dataset"] = dh
    m = evaluate(model, splits[name])
    if run.out is not None:
        run.write_json("metrics.json", {"kind": "eval", "split": name, "metrics": m.to_dict(), "params": param_count(model)})
    _print(m.to_dict())


def cmd_pipeline(args, cfg, run: Run):
    spec, splits, _, dh = resolve_data(args.data, cfg, "val")
    run.inputs["dataset"] = dh
    teacher = _teacher_or_train(args, cfg, spec, splits, dh, run)
    stage_cfg = cfg.stage_config()
    runner = run_finetune_pipeline if cfg.stage == "finetune" else run_pretrain_pipeline
    with run.timed("pipeline"):
        result = runner(teacher, splits, cfg.prune_target(), stage_cfg)
    tables = result.phases[0].tables
    if cfg.stage == "finetune" and result.phases[1].tables is not None:
        tables = tables.with_layers(result.phases[1].tables)
    run.write_json("cost_tables.json", tables.to_dict())
    run.write_json("plan.json", {
        "stage": cfg.stage,
        "phases": [{"name": p.name, "plan": p.plan.to_dict()} for p in result.phases],
    })
    run.write_bytes("student.ckpt", checkpoint_bytes(result.student))
    run.write_json("metrics.json", {
        "kind": "pipeline",
        "stage": cfg.stage,
        "split": cfg.eval_split,
        "teacher_params": param_count(teacher),
        "teacher_metrics": result.teacher_metrics.to_dict(),
        "phases": [
            {"name": p.name, "params": p.params, "metrics": p.metrics.to_dict(), "train": p.train.to_dict()}
            for p in result.phases
        ],
        "final_params": result.phases[-1].params,
    })
    _print({"stage": cfg.stage, "params": result.phases[-1].params, "recall_mean": result.final_metrics.recall_mean})


def cmd_compare(args, cfg, run: Run):
    if not cfg.strategies:
        raise UsageError("empty strategy list; pass --strategy a,b,...")
    spec, splits, _, dh = resolve_data(args.data, cfg, "val")
    run.inputs["dataset"] = dh
    teacher = _teacher_or_train(args, cfg, spec, splits, dh, run)
    family = {_strategy_family(s) for s in cfg.strategies}
    with run.timed("compare"):
        rows = compare_strategies(teacher, splits, cfg.prune_target(), cfg.strategies, cfg.stage_config("finetune"))
    run.write_json("metrics.json", {
        "kind": "compare",
        "family": family.pop(),
        "split": cfg.eval_split,
        "target": cfg.prune_target().to_dict(),
        "rows": rows,
    })
    _print({"ranking": [r["strategy"] for r in rows]})


def cmd_report(args, cfg, run: Run):
    arts = [load_artifact(p) for p in args.artifacts]
    for i, a in enumerate(arts):
        run.inputs[f"artifact{i}:{a.name}"] = a.sha256
    rep = report_markdown(arts)
    run.write_text("report.md", rep.markdown())
    run.write_text("report.csv", rep.csv())
    _print({"tables": len(rep.tables)})


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "score": cmd_score,
    "plan": cmd_plan,
    "prune": cmd_prune,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "compare": cmd_compare,
    "report": cmd_report,
}


# -- entry ------------------------------------------------------------------------------------


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return "missing-input"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, (PlanningError, PruneError)):
        return "plan"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, ReportError):
        return "report"
    if isinstance(exc, (UsageError, SpecError, ValueError, KeyError)):
        return "usage"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
        out = Path(args.out) if args.out else None
        if out is None and args.command != "eval":
            raise UsageError(f"{args.command} needs --out")
        run = Run(args.command, cfg, out)
        lock = out_lock(out) if out is not None else contextlib.nullcontext()
        with lock:
            HANDLERS[args.command](args, cfg, run)
            if out is not None:
                run.finish()
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        code = _classify(exc)
        message = exc.message if isinstance(exc, CliError) else str(exc)
        sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
        return EXIT_CODES[code]


def run() -> None:
    sys.exit(main())
