"""End-to-end desk-scale experiment: teachers -> students -> task vectors -> merges -> probes.

Everything lands flat in one output directory next to a single
``manifest.json``. CSV files hold only seed-determined values, so two runs
with the same config produce identical CSVs; wall-clock numbers go to
``resources.txt`` and ``run_records.json``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as sd
from .checkpoint import init_digest, read_checkpoint, write_checkpoint
from .config import PipelineConfig, format_kv
from .distill import (
    DistillRecipe,
    combined_record,
    distill,
    format_report,
    merge_only_record,
    resource_report,
    train_teacher,
)
from .evaluation import FeatureCache, ScoreTable, probe_features, rank_average, spearman, superb_score, write_csv
from .manifest import write_manifest
from .merge import MergeSpec, compat_check, merge, merge_average, merge_linear, task_vector
from .models import init_student_from_teacher

log = logging.getLogger(__name__)

TASKS = ("seq_class", "speaker_id", "pitch_class", "timbre_id")
# models ranked like the published comparison table (the teacher average is reported but not ranked)
RANKED = ("teacher_S", "teacher_M", "student_S", "student_M", "student_ensemble", "task_arithmetic")


@dataclass
class PipelineResult:
    out_dir: str
    accuracy: dict = field(default_factory=dict)  # model -> task -> mean over seeds
    per_seed: dict = field(default_factory=dict)  # model -> task -> [acc per seed]
    sweep: list = field(default_factory=list)
    endpoints: list = field(default_factory=list)
    records: dict = field(default_factory=dict)
    superb: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)
    cosines: dict = field(default_factory=dict)
    trend: dict = field(default_factory=dict)  # task -> Spearman vs its own domain's weight

    def path(self, name):
        return os.path.join(self.out_dir, name)


class _Prober:
    """Probe suite over several seeds; features cached per model content."""

    def __init__(self, cfg, probe_cfg, seeds):
        self.cache = FeatureCache(cfg, probe_cfg)
        self.probe_cfg = probe_cfg
        self.seeds = tuple(seeds)
        self._feats = {}

    def __call__(self, model):
        key = init_digest(model)
        out = {}
        for domain in sd.CONTENT_TASK:
            if (key, domain) not in self._feats:
                self._feats[key, domain] = self.cache.features(model, domain)
            ftr, ytr, fte, yte = self._feats[key, domain]
            for task in sd.TASKS[domain]:
                out[task] = [probe_features(task, ftr, ytr, fte, yte, self.probe_cfg, s).accuracy for s in self.seeds]
        return {t: out[t] for t in TASKS}


def _load_or_train_teacher(cfg, pcfg, domain, seed, teacher_dir):
    if teacher_dir:
        path = os.path.join(teacher_dir, f"teacher_{domain}.safetensors")
        if os.path.exists(path):
            t = read_checkpoint(path)
            want = {
                "arch_id": cfg.arch_id("teacher"),
                "steps": str(pcfg.teacher_steps),
                "seed": str(seed),
                "domain": domain,
                "lr": str(pcfg.teacher_lr),
                "batch": str(pcfg.teacher_batch),
            }
            if all(t.meta.get(k) == v for k, v in want.items()):
                log.info("reusing teacher(%s) from %s", domain, path)
                return t, 0.0
    start = time.perf_counter()
    t = train_teacher(cfg, domain, pcfg.teacher_budget(), seed=seed)
    return t, time.perf_counter() - start


def run_pipeline(pcfg: PipelineConfig, out_dir, teacher_dir=None, argv=None) -> PipelineResult:
    """Run the whole experiment matrix into ``out_dir``.

    ``teacher_dir`` may point at an earlier run whose teachers match this
    config (same architecture, budget and seed); they are then loaded
    instead of retrained.
    """
    started = time.time()
    os.makedirs(out_dir, exist_ok=True)
    cfg = pcfg.model_config()
    res = PipelineResult(out_dir)
    write = lambda ps, name: write_checkpoint(ps, res.path(name + ".safetensors"))  # noqa: E731

    # teachers
    tS, time_s = _load_or_train_teacher(cfg, pcfg, "S", pcfg.teacher_seed_s, teacher_dir)
    tM, time_m = _load_or_train_teacher(cfg, pcfg, "M", pcfg.teacher_seed_m, teacher_dir)
    write(tS, "teacher_S")
    write(tM, "teacher_M")
    t_avg = merge_average([tS, tM])
    write(t_avg, "teacher_avg")

    # students: both single-teacher runs start from the speech teacher's trunk
    common = dict(
        student_cfg=cfg,
        steps=pcfg.distill_steps,
        batch=pcfg.distill_batch,
        lr=pcfg.distill_lr,
        loss_lambda=pcfg.loss_lambda,
        seed=pcfg.distill_seed,
        init_from=tS,
        head_seed=pcfg.head_seed,
    )
    rec_s = distill(DistillRecipe([tS], method="Distill S", data=pcfg.distill_mixture("S"), **common))
    rec_m = distill(DistillRecipe([tM], method="Distill M", data=pcfg.distill_mixture("M"), **common))
    records = [rec_s, rec_m]
    if pcfg.ensemble:
        rec_e = distill(DistillRecipe([tS, tM], method="Ensemble", data=pcfg.distill_mixture("SM"), **common))
        records.append(rec_e)
        write(rec_e.student, "student_ensemble")
    records += [combined_record([rec_s, rec_m]), merge_only_record()]
    res.records = {r.method: r for r in records}
    write(rec_s.student, "student_S")
    write(rec_m.student, "student_M")

    theta0 = init_student_from_teacher(tS, cfg, seed=pcfg.head_seed)
    write(theta0, "theta0")
    tv_s = task_vector(rec_s.student, theta0, source="S")
    tv_m = task_vector(rec_m.student, theta0, source="M")
    write(tv_s, "tv_S")
    write(tv_m, "tv_M")
    lams = [(tv_s, pcfg.lambda_s), (tv_m, pcfg.lambda_m)]
    arith = merge(MergeSpec(theta0, lams))
    ties = merge(MergeSpec(theta0, lams, mode="ties", ties_density=pcfg.ties_density))
    write(arith, "task_arithmetic")
    write(ties, "ties")

    # probes
    prober = _Prober(cfg, pcfg.probe_config(), pcfg.probe_seeds)
    models = {
        "teacher_S": tS,
        "teacher_M": tM,
        "teacher_avg": t_avg,
        "theta0": theta0,
        "student_S": rec_s.student,
        "student_M": rec_m.student,
        "task_arithmetic": arith,
        "ties": ties,
    }
    if pcfg.ensemble:
        models["student_ensemble"] = rec_e.student
    probe_rows = []
    for name, model in models.items():
        accs = prober(model)
        res.per_seed[name] = accs
        res.accuracy[name] = {t: float(np.mean(a)) for t, a in accs.items()}
        for t, a in accs.items():
            probe_rows += [{"model": name, "task": t, "seed": s, "accuracy": float(v)} for s, v in zip(pcfg.probe_seeds, a)]
        log.info("probe %s %s", name, res.accuracy[name])
    write_csv(res.path("probes.csv"), probe_rows, ["model", "task", "seed", "accuracy"])
    write_csv(
        res.path("scores.csv"),
        [{"model": m, "task": t, "value": 100.0 * a, "direction": "higher"} for m, accs in res.accuracy.items() for t, a in accs.items()],
        ["model", "task", "value", "direction"],
    )

    # interpolation sweep, plus the pure endpoints
    for lam1, lam2 in pcfg.grid:
        merged = merge_linear(MergeSpec(theta0, [(tv_s, lam1), (tv_m, lam2)]))
        accs = prober(merged)
        row = {"lambda1": float(lam1), "lambda2": float(lam2)}
        row.update({t: float(np.mean(a)) for t, a in accs.items()})
        row.update({f"{t}.seed{s}": float(v) for t, a in accs.items() for s, v in zip(pcfg.probe_seeds, a)})
        res.sweep.append(row)
    write_csv(res.path("sweep.csv"), res.sweep)
    for t in TASKS:
        lam = "lambda1" if sd.TASK_DOMAIN[t] == "S" else "lambda2"
        res.trend[t] = spearman([r[lam] for r in res.sweep], [r[t] for r in res.sweep])
    write_csv(res.path("trend.csv"), [{"task": t, "weight": "lambda1" if sd.TASK_DOMAIN[t] == "S" else "lambda2", "spearman": v} for t, v in res.trend.items()])
    for (lam1, lam2), pure in (((1.0, 0.0), "student_S"), ((0.0, 1.0), "student_M")):
        accs = prober(merge_linear(MergeSpec(theta0, [(tv_s, lam1), (tv_m, lam2)])))
        for t, a in accs.items():
            for s, v, p in zip(pcfg.probe_seeds, a, res.per_seed[pure][t]):
                res.endpoints.append({"lambda1": lam1, "lambda2": lam2, "pure": pure, "task": t, "seed": s, "merged": float(v), "student": float(p)})
    write_csv(res.path("endpoints.csv"), res.endpoints)

    # aggregate metrics
    table = ScoreTable(
        rows={m: {t: 100.0 * a for t, a in accs.items()} for m, accs in res.accuracy.items()},
        directions=dict.fromkeys(TASKS, "higher"),
    )
    table.set_reference_best(["teacher_S", "teacher_M"])
    ranked = [m for m in RANKED if m in table.rows]
    res.ranks = rank_average(table, TASKS, ranked)
    res.superb = {m: superb_score(table, m, TASKS) for m in table.rows}
    write_csv(
        res.path("summary.csv"),
        [{"model": m, "superb": res.superb[m], "rank_average": res.ranks.get(m, "")} | res.accuracy[m] for m in table.rows],
        ["model", "superb", "rank_average", *TASKS],
    )

    # weight-space distances
    compat_lines = []
    for label, a, b in (("teachers", tS, tM), ("students", rec_s.student, rec_m.student)):
        rep = compat_check(a, b)
        res.cosines[label] = rep.cosine
        compat_lines += [f"[{label}]", *rep.lines(), ""]
    order = "students" if res.cosines["students"] > res.cosines["teachers"] else "teachers"
    compat_lines.append(f"higher trunk cosine: {order}")
    with open(res.path("compat.txt"), "w") as fh:
        fh.write("\n".join(compat_lines) + "\n")

    # loss curves are seed-determined; timings are not
    write_csv(
        res.path("loss_curves.csv"),
        [{"method": r.method, "window": i, "loss": float(v)} for r in records for i, v in enumerate(r.loss_curve)],
        ["method", "window", "loss"],
    )
    report = resource_report(records)
    with open(res.path("resources.txt"), "w") as fh:
        fh.write(format_report(report) + "\n")
    with open(res.path("run_records.json"), "w") as fh:
        json.dump({"resources": report, "teacher_seconds": {"S": time_s, "M": time_m}}, fh, indent=2, ensure_ascii=False)
        fh.write("\n")
    with open(res.path("config.txt"), "w") as fh:
        fh.write(format_kv(pcfg.to_kv()))

    write_manifest(
        out_dir,
        argv=argv,
        config=pcfg.to_kv(),
        seeds={"teacher_S": pcfg.teacher_seed_s, "teacher_M": pcfg.teacher_seed_m, "distill": pcfg.distill_seed, "probe": list(pcfg.probe_seeds)},
        inputs={},
        wall_clock=time.time() - started,
        artifact="pipeline",
        outputs=[res.path(f) for f in sorted(os.listdir(out_dir)) if f.endswith((".safetensors", ".csv"))],
    )
    return res
