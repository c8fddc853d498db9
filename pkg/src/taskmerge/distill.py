"""Teacher training and multi-layer hidden-state distillation."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import data as sd
from .checkpoint import ParameterSet, init_digest
from .models import (
    ModelConfig,
    build_model,
    count_layers,
    encode,
    init_student_from_teacher,
    init_tensors,
    predict_heads,
)

log = logging.getLogger(__name__)

CLS_PREFIX = "cls_heads."
TEACHER_GATE = 0.95


class TeacherGateError(RuntimeError):
    """A teacher missed the dev-accuracy floor; downstream experiments are meaningless."""

    def __init__(self, domain, accuracies, gate=TEACHER_GATE):
        self.domain = domain
        self.accuracies = accuracies
        acc = ", ".join(f"{t}={a:.3f}" for t, a in accuracies.items())
        super().__init__(f"teacher({domain}) below the {gate:.2f} dev-accuracy floor: {acc}")


class DistillError(RuntimeError):
    pass


def mean_pool(state):
    """[batch, frames, d] -> [batch, d]."""
    return ad.mean(state, axis=1)


def _batches(domain_specs, batch, steps, seed):
    stream = sd.mixture(domain_specs, batch * steps, seed, split="train")
    for _ in range(steps):
        yield sd.stack(itertools.islice(stream, batch))


def _adam_update(nodes, grads, state, lr):
    values = {k: n.value for k, n in nodes.items()}
    new, state = ad.adam_step(values, grads, state, lr)
    for k, v in new.items():
        nodes[k].value = v
    return state


# ---------------------------------------------------------------- teachers


@dataclass
class TeacherBudget:
    steps: int = 1500
    batch: int = 16
    lr: float = 1e-3
    n_dev: int = 400
    gate: float = TEACHER_GATE
    cosine_decay: bool = True

    def lr_at(self, step):
        if not self.cosine_decay:
            return self.lr
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))


def teacher_accuracy(params, cfg, domain, signals, labels, batch=64):
    """Dev accuracy of a teacher through its temporary classification heads."""
    correct = dict.fromkeys(sd.TASKS[domain], 0)
    for i in range(0, len(signals), batch):
        states = encode(params, cfg, signals[i : i + batch], cfg.teacher_layers)
        pooled = states[-1].value.mean(axis=1)
        for task in correct:
            logits = pooled @ params[f"{CLS_PREFIX}{task}.weight"] + params[f"{CLS_PREFIX}{task}.bias"]
            correct[task] += int((logits.argmax(axis=1) == labels[task][i : i + batch]).sum())
    return {t: c / len(signals) for t, c in correct.items()}


def train_teacher(cfg: ModelConfig, domain: str, budget: TeacherBudget | None = None, seed: int = 0) -> ParameterSet:
    """Supervised teacher for ``domain``'s tasks; classification heads are stripped on return.

    Raises :class:`TeacherGateError` if dev accuracy on any task stays below
    ``budget.gate``.
    """
    budget = budget or TeacherBudget()
    if domain not in sd.CONTENT_TASK:
        raise sd.DataError(f"teachers are trained on labeled domains S or M, not {domain!r}")
    init = build_model(cfg, "teacher", seed)
    shapes = {}
    for task, k in sd.TASKS[domain].items():
        shapes[f"{CLS_PREFIX}{task}.weight"] = (cfg.d_model, k)
        shapes[f"{CLS_PREFIX}{task}.bias"] = (k,)
    entries = dict(init.items())
    entries.update(init_tensors(shapes, seed + 7919))
    nodes = {k: ad.Node(v.copy(), requires_grad=True) for k, v in entries.items()}
    state = ad.AdamState()
    with threadpool_limits(1):
        batches = _batches([(domain, 1.0)], budget.batch, budget.steps, seed)
        for step, (signals, labels, _) in enumerate(batches):
            pooled = mean_pool(encode(nodes, cfg, signals, cfg.teacher_layers)[-1])
            loss = None
            for task in sd.TASKS[domain]:
                logits = ad.add(ad.matmul(pooled, nodes[f"{CLS_PREFIX}{task}.weight"]), nodes[f"{CLS_PREFIX}{task}.bias"])
                term = ad.cross_entropy(logits, labels[task])
                loss = term if loss is None else ad.add(loss, term)
            if not np.isfinite(loss.value):
                raise DistillError(f"teacher({domain}) loss became non-finite at step {step}")
            grads = ad.backward(loss, nodes)
            state = _adam_update(nodes, grads, state, budget.lr_at(step))
            if step % 100 == 0:
                log.debug("teacher(%s) step %d loss %.4f", domain, step, float(loss.value))
        dev_signals, dev_labels = sd.arrays(domain, "dev", budget.n_dev, seed)
        acc = teacher_accuracy({k: n.value for k, n in nodes.items()}, cfg, domain, dev_signals, dev_labels)
    log.info("teacher(%s) dev accuracy %s", domain, acc)
    if min(acc.values()) < budget.gate:
        raise TeacherGateError(domain, acc, budget.gate)
    trunk = {k: n.value for k, n in nodes.items() if not k.startswith(CLS_PREFIX)}
    meta = dict(init.meta)
    meta.update(kind="teacher", steps=budget.steps, domain=domain, seed=seed, lr=budget.lr, batch=budget.batch)
    meta.update({f"dev_acc.{t}": f"{a:.6f}" for t, a in acc.items()})
    return ParameterSet(trunk, meta)


# ---------------------------------------------------------------- distillation


def distill_loss(head_outputs, teacher_states, head_targets, loss_lambda=1.0):
    """Sum over heads of L1 + (-loss_lambda * log sigmoid(cosine)), each averaged over frames.

    ``teacher_states[k]`` is the teacher's hidden state after layer k
    (index 0 is the frontend); head i regresses onto
    ``teacher_states[head_targets[i]]``.
    """
    if len(head_outputs) != len(head_targets):
        raise ad.ShapeError("distill_loss", (len(head_outputs),), (len(head_targets),))
    total = None
    for pred, layer in zip(head_outputs, head_targets):
        target = ad.lift(teacher_states[layer])
        if pred.shape != target.shape:
            raise ad.ShapeError("distill_loss", pred.shape, target.shape)
        term = ad.l1_mean(pred, target)
        if loss_lambda:
            cos_term = ad.mean(ad.log_sigmoid(ad.cosine_similarity(pred, target)))
            term = ad.add(term, ad.scale(cos_term, -loss_lambda))
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class DistillRecipe:
    teachers: list
    student_cfg: ModelConfig
    data: list = field(default_factory=lambda: [("S", 1.0)])
    steps: int = 2000
    batch: int = 16
    lr: float = 5e-4
    loss_lambda: float = 1.0
    seed: int = 0
    init_from: ParameterSet | None = None
    head_seed: int = 0
    method: str = ""

    def __post_init__(self):
        if not 1 <= len(self.teachers) <= 2:
            raise DistillError(f"distillation takes one or two teachers, got {len(self.teachers)}")
        if self.steps <= 0:
            raise DistillError("steps must be positive")


@dataclass
class DistillRunRecord:
    method: str
    student: ParameterSet | None
    loss_curve: list
    seconds_per_step: float
    wall_clock: float
    peak_memory_bytes: int
    parameters: int | None
    steps: int

    @property
    def seconds_per_epoch(self):
        # one "epoch" = 100 steps at desk scale
        return self.seconds_per_step * 100


def _graph_bytes(root):
    seen, stack, total = set(), [root], 0
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        total += node.value.nbytes
        stack.extend(node.parents)
    return total


def _check_dims(teacher, cfg):
    if count_layers(teacher) != cfg.teacher_layers:
        raise DistillError(f"teacher has {count_layers(teacher)} layers, config expects {cfg.teacher_layers}")
    w = teacher.entries.get("frontend.conv1.weight")
    if w is None or w.shape[0] != cfg.d_model or teacher["frontend.pos_embed"].shape != (cfg.max_positions, cfg.d_model):
        raise DistillError("teacher/student dimension mismatch")


def distill(recipe: DistillRecipe) -> DistillRunRecord:
    """Train a student to predict teacher hidden states; return the final checkpoint."""
    cfg = recipe.student_cfg
    for t in recipe.teachers:
        _check_dims(t, cfg)
    source = recipe.init_from if recipe.init_from is not None else recipe.teachers[0]
    theta0 = init_student_from_teacher(source, cfg, n_teachers=len(recipe.teachers), seed=recipe.head_seed)
    nodes = {k: ad.Node(v.copy(), requires_grad=True) for k, v in theta0.items()}
    n_heads = len(recipe.teachers) * len(cfg.head_targets)
    teacher_params = [dict(t.items()) for t in recipe.teachers]
    state = ad.AdamState()
    curve, window = [], []
    peak = 0
    start = time.perf_counter()
    with threadpool_limits(1):
        batches = _batches(recipe.data, recipe.batch, recipe.steps, recipe.seed)
        for step, (signals, _, _) in enumerate(batches):
            states = encode(nodes, cfg, signals, cfg.student_layers)
            outs = predict_heads(nodes, states[-1], n_heads)
            loss = None
            per_teacher = len(cfg.head_targets)
            for j, tp in enumerate(teacher_params):
                # frozen teacher: plain arrays, no tape
                t_states = [s.value for s in encode(tp, cfg, signals, cfg.teacher_layers)]
                term = distill_loss(outs[j * per_teacher : (j + 1) * per_teacher], t_states, cfg.head_targets, recipe.loss_lambda)
                loss = term if loss is None else ad.add(loss, term)
            value = float(loss.value)
            if not np.isfinite(value):
                raise DistillError(f"non-finite distillation loss at step {step} (method={recipe.method or 'distill'})")
            if step == 0:
                peak = _graph_bytes(loss)
            grads = ad.backward(loss, nodes)
            state = _adam_update(nodes, grads, state, recipe.lr)
            window.append(value)
            if len(window) == 100 or step == recipe.steps - 1:
                curve.append(float(np.mean(window)))
                window = []
    elapsed = time.perf_counter() - start
    param_bytes = sum(v.nbytes for v in theta0.entries.values())
    teacher_bytes = sum(sum(v.nbytes for v in t.entries.values()) for t in recipe.teachers)
    student_entries = {k: n.value for k, n in nodes.items()}
    meta = dict(theta0.meta)
    meta.update(
        kind="student",
        steps=recipe.steps,
        init_digest=init_digest(theta0),
        teachers=",".join(t.meta.get("domain", "?") for t in recipe.teachers),
        data=",".join(f"{d}:{w:g}" for d, w in recipe.data),
        lr=recipe.lr,
        batch=recipe.batch,
        loss_lambda=recipe.loss_lambda,
        seed=recipe.seed,
        adam="beta1=0.9,beta2=0.999,eps=1e-08",
    )
    student = ParameterSet(student_entries, meta)
    return DistillRunRecord(
        method=recipe.method or ("ensemble" if len(recipe.teachers) == 2 else "distill"),
        student=student,
        loss_curve=curve,
        seconds_per_step=elapsed / recipe.steps,
        wall_clock=elapsed,
        # tape + params + two Adam moments + frozen teachers
        peak_memory_bytes=peak + 3 * param_bytes + teacher_bytes,
        parameters=student.num_parameters(),
        steps=recipe.steps,
    )


def merge_only_record(method="Task Arithmetic (case 2)") -> DistillRunRecord:
    """Merging already-distilled students costs no training."""
    return DistillRunRecord(method, None, [], 0.0, 0.0, 0, None, 0)


def combined_record(records, method="Task Arithmetic (case 1)") -> DistillRunRecord:
    """Separate distillations followed by merging: times add, memory is the max of one run."""
    steps = sum(r.steps for r in records)
    wall = sum(r.wall_clock for r in records)
    return DistillRunRecord(
        method,
        None,
        [],
        wall / steps if steps else 0.0,
        wall,
        max(r.peak_memory_bytes for r in records),
        max(r.parameters for r in records),
        steps,
    )


REPORT_COLUMNS = ("method", "seconds_per_step", "seconds_per_epoch", "wall_clock", "peak_memory_mb", "parameters")


def resource_report(records) -> list:
    """Table-2-shaped rows, sorted (stably) by method name."""
    rows = []
    for r in sorted(records, key=lambda r: r.method):
        rows.append(
            {
                "method": r.method,
                "seconds_per_step": round(r.seconds_per_step, 6),
                "seconds_per_epoch": round(r.seconds_per_epoch, 4),
                "wall_clock": round(r.wall_clock, 3),
                "peak_memory_mb": round(r.peak_memory_bytes / 2**20, 3),
                "parameters": "-" if r.parameters is None else r.parameters,
            }
        )
    return rows


def format_report(rows) -> str:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in REPORT_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS))
    return "\n".join(lines)
