"""``taskmerge`` command-line driver.

Exit codes: 0 success, 2 usage error, 3 missing input file, 4 malformed
checkpoint or dataset, 5 merge precondition violated (digest or key
mismatch), 6 teacher below the sanity floor, 7 invalid configuration or
arguments, 8 training failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

from . import __version__
from . import data as sd
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigFileError, PipelineConfig
from .distill import DistillError, DistillRecipe, TeacherGateError, distill, format_report, resource_report, train_teacher
from .evaluation import (
    ProbeError,
    ScoreTable,
    DegenerateDenominatorError,
    parse_grid,
    rank_average,
    read_baselines_csv,
    read_score_csv,
    superb_score,
    sweep,
    train_probe,
    write_csv,
)
from .manifest import write_manifest
from .merge import DivergentInitError, KeyMismatchError, MergeError, MergeSpec, TaskVector, merge, merge_average, task_vector
from .models import ConfigError, SignalError, config_from_meta, init_student_from_teacher

log = logging.getLogger("taskmerge")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_MERGE = 5
EXIT_GATE = 6
EXIT_CONFIG = 7
EXIT_TRAINING = 8

# most specific first
ERROR_CODES = (
    (FileNotFoundError, EXIT_MISSING),
    (CheckpointError, EXIT_FORMAT),
    (DivergentInitError, EXIT_MERGE),
    (KeyMismatchError, EXIT_MERGE),
    (MergeError, EXIT_MERGE),
    (TeacherGateError, EXIT_GATE),
    (DistillError, EXIT_TRAINING),
    (ConfigFileError, EXIT_CONFIG),
    (ConfigError, EXIT_CONFIG),
    (SignalError, EXIT_CONFIG),
    (ProbeError, EXIT_CONFIG),
    (DegenerateDenominatorError, EXIT_CONFIG),
    (sd.DataError, EXIT_CONFIG),
    (ValueError, EXIT_CONFIG),
)


def exit_code_for(exc: BaseException) -> int:
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_ERROR


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _pipeline_config(args) -> PipelineConfig:
    pcfg = PipelineConfig.read(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for flag, key in getattr(args, "_overrides", ()):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return pcfg.replace(**overrides) if overrides else pcfg


def _model_config(args, ps=None, student_layers=None):
    """Flags/config file first, then the config recorded in the checkpoint."""
    if getattr(args, "config", None):
        cfg = _pipeline_config(args).model_config()
    else:
        cfg = (config_from_meta(ps) if ps is not None else None) or PipelineConfig().model_config()
    if student_layers is not None and student_layers != cfg.student_layers:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "student_layers": student_layers})
    return cfg


def _out_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


def _finish(args, out, started, config=None, seeds=None, inputs=None):
    write_manifest(
        _out_dir(out),
        argv=["taskmerge", *args._argv],
        config=config,
        seeds=seeds,
        inputs=inputs,
        wall_clock=time.time() - started,
        artifact=os.path.basename(out),
        outputs=[out],
    )


def _split_weighted(text):
    path, sep, lam = text.rpartition(":")
    if not sep or not path:
        raise ValueError(f"--tv expects file:lambda, got {text!r}")
    return path, float(lam)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    started = time.time()
    examples = sd.generate(args.domain, args.split, args.n, args.seed)
    sd.export_dataset(args.out, examples, {"domain": args.domain, "split": args.split, "n": args.n, "seed": args.seed})
    _finish(args, args.out, started, seeds={"data": args.seed})
    print(f"wrote {args.n} {args.domain}/{args.split} examples to {args.out}")


def cmd_train_teacher(args):
    started = time.time()
    pcfg = _pipeline_config(args)
    seed = args.seed if args.seed is not None else (pcfg.teacher_seed_s if args.domain == "S" else pcfg.teacher_seed_m)
    teacher = train_teacher(pcfg.model_config(), args.domain, pcfg.teacher_budget(), seed=seed)
    write_checkpoint(teacher, args.out)
    _finish(args, args.out, started, config=pcfg.to_kv(), seeds={"teacher": seed})
    acc = " ".join(f"{k}={v}" for k, v in teacher.meta.items() if k.startswith("dev_acc."))
    print(f"teacher({args.domain}) {acc} -> {args.out}")


def cmd_distill(args):
    started = time.time()
    pcfg = _pipeline_config(args)
    teachers = [read_checkpoint(p) for p in args.teacher]
    init_from = read_checkpoint(args.init_from) if args.init_from else None
    cfg = _model_config(args, teachers[0], args.student_layers)
    recipe = DistillRecipe(
        teachers,
        cfg,
        data=sd.parse_mixture(args.data) if args.data else pcfg.distill_mixture(t.meta.get("domain", "S") for t in teachers),
        steps=pcfg.distill_steps,
        batch=pcfg.distill_batch,
        lr=pcfg.distill_lr,
        loss_lambda=pcfg.loss_lambda,
        seed=pcfg.distill_seed,
        init_from=init_from,
        head_seed=pcfg.head_seed,
        method=args.method or "",
    )
    record = distill(recipe)
    write_checkpoint(record.student, args.out)
    rec_path = args.record or os.path.splitext(args.out)[0] + ".record.json"
    row = resource_report([record])[0]
    with open(rec_path, "w") as fh:
        json.dump({**row, "steps": record.steps, "loss_curve": record.loss_curve}, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    inputs = {f"teacher{i}": p for i, p in enumerate(args.teacher)}
    if args.init_from:
        inputs["init_from"] = args.init_from
    _finish(args, args.out, started, config=pcfg.to_kv(), seeds={"distill": pcfg.distill_seed, "heads": pcfg.head_seed}, inputs=inputs)
    print(format_report([row]))


def cmd_init_student(args):
    started = time.time()
    pcfg = _pipeline_config(args)
    teacher = read_checkpoint(args.teacher)
    cfg = _model_config(args, teacher, args.student_layers)
    theta0 = init_student_from_teacher(teacher, cfg, n_teachers=args.n_teachers, seed=pcfg.head_seed)
    write_checkpoint(theta0, args.out)
    _finish(args, args.out, started, config=pcfg.to_kv(), seeds={"heads": pcfg.head_seed}, inputs={"teacher": args.teacher})
    print(f"student init {theta0.init_digest[:12]} ({theta0.num_parameters()} parameters) -> {args.out}")


def cmd_task_vector(args):
    started = time.time()
    tv = task_vector(read_checkpoint(args.ft), read_checkpoint(args.base), include_heads=args.include_heads, source=args.source)
    write_checkpoint(tv, args.out)
    _finish(args, args.out, started, inputs={"ft": args.ft, "base": args.base})
    print(f"task vector ({tv.num_parameters()} values, source={tv.source or '?'}) -> {args.out}")


def cmd_merge(args):
    started = time.time()
    base = read_checkpoint(args.base)
    terms, inputs = [], {"base": args.base}
    for i, spec in enumerate(args.tv):
        path, lam = _split_weighted(spec)
        terms.append((TaskVector.from_parameter_set(read_checkpoint(path)), lam))
        inputs[f"tv{i}"] = path
    merged = merge(MergeSpec(base, terms, mode=args.mode, ties_density=args.density, include_heads=args.include_heads))
    write_checkpoint(merged, args.out)
    _finish(args, args.out, started, config={"mode": args.mode, "density": args.density}, inputs=inputs)
    print(f"merged ({args.mode}, lambdas={merged.meta['lambdas']}) -> {args.out}")


def cmd_avg_merge(args):
    started = time.time()
    models = [read_checkpoint(p) for p in args.model]
    digests = {m.init_digest for m in models}
    if (len(digests) != 1 or None in digests) and not args.unsafe_allow_digest_mismatch:
        raise DivergentInitError(
            "models do not share an init digest; averaging unrelated models is the naive-merge experiment, "
            "pass --unsafe-allow-digest-mismatch to run it anyway"
        )
    merged = merge_average(models)
    write_checkpoint(merged, args.out)
    _finish(args, args.out, started, inputs={f"model{i}": p for i, p in enumerate(args.model)})
    print(f"average of {len(args.model)} models -> {args.out}")


def cmd_probe(args):
    started = time.time()
    model = read_checkpoint(args.model)
    pcfg = _pipeline_config(args)
    cfg = _model_config(args, model)
    if args.task not in sd.TASK_DOMAIN:
        raise ProbeError(f"unknown task {args.task!r}; known: {', '.join(sorted(sd.TASK_DOMAIN))}")
    result = train_probe(model, cfg, args.task, pcfg.probe_config(), seed=args.seed)
    print(f"model={args.model} task={args.task} seed={args.seed} accuracy={result.accuracy:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"model": args.model, "task": args.task, "seed": args.seed, "accuracy": result.accuracy}, fh, indent=2)
            fh.write("\n")
        _finish(args, args.out, started, config=pcfg.to_kv(), seeds={"probe": args.seed}, inputs={"model": args.model})


def score_report(table: ScoreTable, tasks, reference=None, baselines=None, rank_models=None):
    """Rows of (model, superb, rank average) for a score table."""
    table.baselines = dict(baselines or {})
    table.set_reference_best(reference or table.models)
    ranked = rank_models or table.models
    ranks = rank_average(table, tasks, ranked)
    rows = []
    for m in table.models:
        rows.append({"model": m, "superb": superb_score(table, m, tasks), "rank_average": ranks.get(m)})
    return rows


def cmd_score(args):
    table = read_score_csv(args.table)
    tasks = args.tasks.split(",") if args.tasks else table.tasks
    unknown = [t for t in tasks if t not in table.directions]
    if unknown:
        raise ValueError(f"tasks not in table: {unknown}")
    reference = args.reference.split(",") if args.reference else None
    exclude = set(args.exclude.split(",")) if args.exclude else set()
    baselines = read_baselines_csv(args.baselines) if args.baselines else None
    rows = score_report(table, tasks, reference, baselines, [m for m in table.models if m not in exclude])
    width = max(len(r["model"]) for r in rows)
    print(f"{'model'.ljust(width)}  superb     rank_average")
    for r in rows:
        rank = "-" if r["rank_average"] is None else f"{r['rank_average']:.2f}"
        print(f"{r['model'].ljust(width)}  {r['superb']:9.2f}  {rank}")
    if args.out:
        write_csv(args.out, rows, ["model", "superb", "rank_average"])


def cmd_sweep(args):
    started = time.time()
    base = read_checkpoint(args.base)
    tv_s = TaskVector.from_parameter_set(read_checkpoint(args.tv_s))
    tv_m = TaskVector.from_parameter_set(read_checkpoint(args.tv_m))
    pcfg = _pipeline_config(args)
    cfg = _model_config(args, base)
    grid = parse_grid(args.grid) if args.grid else pcfg.grid
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else pcfg.probe_seeds
    rows = sweep(base, tv_s, tv_m, cfg, grid, probe_cfg=pcfg.probe_config(), seeds=seeds)
    write_csv(args.out, rows)
    _finish(args, args.out, started, config=pcfg.to_kv(), seeds={"probe": list(seeds)}, inputs={"base": args.base, "tv_s": args.tv_s, "tv_m": args.tv_m})
    for r in rows:
        print(" ".join(f"{k}={v:.4f}" for k, v in r.items()))


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args):
    """Consolidate pipeline output directories into one table."""
    dirs = []
    for root, _, files in os.walk(args.dir):
        if "summary.csv" in files:
            dirs.append(root)
    if not dirs:
        raise FileNotFoundError(f"no pipeline outputs (summary.csv) under {args.dir}")
    rows, lines = [], []
    for d in sorted(dirs):
        run = os.path.relpath(d, args.dir)
        lines.append(f"== {run}")
        summary = _read_rows(os.path.join(d, "summary.csv"))
        cols = [c for c in summary[0] if c != "model"]
        width = max(len(r["model"]) for r in summary)
        lines.append("  ".join(["model".ljust(width), *(c.rjust(12) for c in cols)]))
        for r in summary:
            lines.append("  ".join([r["model"].ljust(width), *(_short(r[c]).rjust(12) for c in cols)]))
            rows.append({"run": run, **r})
        res = os.path.join(d, "resources.txt")
        if os.path.exists(res):
            with open(res) as fh:
                lines += ["", fh.read().rstrip()]
        lines.append("")
    text = "\n".join(lines)
    print(text)
    out_csv = args.out or os.path.join(args.dir, "report.csv")
    write_csv(out_csv, rows, list(rows[0].keys()))
    with open(os.path.splitext(out_csv)[0] + ".txt", "w") as fh:
        fh.write(text + "\n")


def _short(v):
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v or "-"


def cmd_pipeline(args):
    from .pipeline import run_pipeline

    pcfg = _pipeline_config(args)
    res = run_pipeline(pcfg, args.out, teacher_dir=args.teacher_dir, argv=["taskmerge", *args._argv])
    print(f"pipeline outputs in {args.out}")
    for m in res.accuracy:
        accs = " ".join(f"{t}={a:.3f}" for t, a in res.accuracy[m].items())
        print(f"  {m}: {accs}")
    print(format_report(resource_report(list(res.records.values()))))


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="taskmerge", description="Distill, merge and probe toy encoders.")
    p.add_argument("--version", action="version", version=f"taskmerge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn, _overrides=())
        return sp

    sp = add("gen-data", cmd_gen_data, "write a synthetic dataset container")
    sp.add_argument("--domain", required=True, choices=sd.DOMAINS)
    sp.add_argument("--split", default="train", choices=sd.SPLITS)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train-teacher", cmd_train_teacher, "train a supervised teacher on one domain")
    sp.add_argument("--domain", required=True, choices=("S", "M"))
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(_overrides=(("steps", "teacher_steps"),))

    sp = add("distill", cmd_distill, "distill one teacher (or two: ensemble) into a student")
    sp.add_argument("--teacher", action="append", required=True)
    sp.add_argument("--init-from")
    sp.add_argument("--data")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--student-layers", type=int)
    sp.add_argument("--method")
    sp.add_argument("--config")
    sp.add_argument("--record")
    sp.add_argument("--out", required=True)
    sp.set_defaults(_overrides=(("steps", "distill_steps"), ("lr", "distill_lr"), ("seed", "distill_seed")))

    sp = add("init-student", cmd_init_student, "write the shared student start copied from a teacher")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student-layers", type=int)
    sp.add_argument("--n-teachers", type=int, default=1, choices=(1, 2))
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("task-vector", cmd_task_vector, "theta_ft - theta_0")
    sp.add_argument("--ft", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--source")
    sp.add_argument("--include-heads", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("merge", cmd_merge, "add weighted task vectors to a base")
    sp.add_argument("--base", required=True)
    sp.add_argument("--tv", action="append", required=True, metavar="FILE:LAMBDA")
    sp.add_argument("--mode", default="linear", choices=("linear", "ties"))
    sp.add_argument("--density", type=float, default=0.2)
    sp.add_argument("--include-heads", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("avg-merge", cmd_avg_merge, "plain parameter average")
    sp.add_argument("--model", action="append", required=True)
    sp.add_argument("--unsafe-allow-digest-mismatch", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("probe", cmd_probe, "linear probe on a frozen model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.set_defaults(_overrides=(("epochs", "probe_epochs"),))

    sp = add("score", cmd_score, "SUPERB-style score and rank average of a score table")
    sp.add_argument("--table", required=True)
    sp.add_argument("--tasks")
    sp.add_argument("--baselines")
    sp.add_argument("--reference", help="comma-separated models whose per-task best is the denominator")
    sp.add_argument("--exclude", help="comma-separated models left out of the ranking")
    sp.add_argument("--out")

    sp = add("sweep", cmd_sweep, "merge and probe over a lambda grid")
    sp.add_argument("--base", required=True)
    sp.add_argument("--tv-s", required=True)
    sp.add_argument("--tv-m", required=True)
    sp.add_argument("--grid")
    sp.add_argument("--seeds")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(_overrides=(("epochs", "probe_epochs"),))

    sp = add("report", cmd_report, "consolidate pipeline runs")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out")

    sp = add("pipeline", cmd_pipeline, "run the whole experiment matrix")
    sp.add_argument("--config")
    sp.add_argument("--student-layers", type=int)
    sp.add_argument("--teacher-dir")
    sp.add_argument("--out", required=True)
    sp.set_defaults(_overrides=(("student_layers", "student_layers"),))
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "out", None):
            # pipeline --out is a directory, everything else a file
            os.makedirs(args.out if args.command == "pipeline" else _out_dir(args.out), exist_ok=True)
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code_for(exc)
        print(f"taskmerge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
