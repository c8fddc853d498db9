"""Linear probes on frozen representations and aggregate ranking metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import data as sd
from .checkpoint import ParameterSet
from .merge import MergeSpec, merge_linear
from .models import ModelConfig, count_layers, forward
from .validation import check_features, check_signals


class ProbeError(ValueError):
    pass


class DegenerateDenominatorError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 20
    n_train: int = 1000
    n_test: int = 600
    data_seed: int = 0
    override: bool = False

    def __post_init__(self):
        if not self.override and (self.lr != 1e-3 or self.batch != 64):
            raise ProbeError("probe lr/batch are fixed at 1e-3/64; pass override=True to change them")


# ---------------------------------------------------------------- estimators


class FrozenEncoder(TransformerMixin, BaseEstimator):
    """Signals -> mean-pooled hidden state of one layer of a frozen model.

    Stateless apart from validation: ``fit`` only checks the model against
    the config. ``layer=-1`` is the last transformer layer.
    """

    def __init__(self, model=None, config=None, layer=-1, batch_size=64):
        self.model = model
        self.config = config
        self.layer = layer
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.model is None or self.config is None:
            raise ProbeError("FrozenEncoder needs a model and a config")
        self.n_layers_ = count_layers(self.model)
        self.n_features_out_ = self.config.d_model
        return self

    def transform(self, X):
        check_is_fitted(self, "n_layers_")
        X = check_signals(X, self.config)
        out = []
        with threadpool_limits(1):
            for i in range(0, len(X), self.batch_size):
                states = forward(self.model, self.config, X[i : i + self.batch_size], self.n_layers_)
                out.append(states[self.layer].mean(axis=1))
        return np.concatenate(out).astype(np.float32)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Single linear softmax layer trained with Adam on fixed features."""

    def __init__(self, lr=1e-3, batch_size=64, epochs=20, random_state=0):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        n, d = X.shape
        k = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        bound = 1.0 / np.sqrt(d)
        w = ad.Node(rng.uniform(-bound, bound, (d, k)).astype(np.float32), requires_grad=True)
        b = ad.Node(np.zeros(k, np.float32), requires_grad=True)
        params = {"weight": w, "bias": b}
        state = ad.AdamState()
        with threadpool_limits(1):
            for _ in range(self.epochs):
                order = rng.permutation(n)
                for i in range(0, n, self.batch_size):
                    idx = order[i : i + self.batch_size]
                    loss = ad.cross_entropy(ad.add(ad.matmul(X[idx], w), b), y_idx[idx])
                    grads = ad.backward(loss, params)
                    new, state = ad.adam_step({"weight": w.value, "bias": b.value}, grads, state, self.lr)
                    w.value, b.value = new["weight"], new["bias"]
        self.coef_ = w.value
        self.intercept_ = b.value
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_features(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return ad.softmax(self.decision_function(X)).value

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]


# ---------------------------------------------------------------- probes


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    weight: np.ndarray
    bias: np.ndarray
    seed: int


class FeatureCache:
    """Per-model, per-domain features of the probe train/test splits."""

    def __init__(self, cfg: ModelConfig, probe_cfg: ProbeConfig):
        self.cfg = cfg
        self.probe_cfg = probe_cfg
        self._signals = {}

    def signals(self, domain):
        if domain not in self._signals:
            pc = self.probe_cfg
            self._signals[domain] = (
                sd.arrays(domain, "train", pc.n_train, pc.data_seed),
                sd.arrays(domain, "test", pc.n_test, pc.data_seed),
            )
        return self._signals[domain]

    def features(self, model, domain):
        (xtr, ytr), (xte, yte) = self.signals(domain)
        enc = FrozenEncoder(model, self.cfg).fit()
        return enc.transform(xtr), ytr, enc.transform(xte), yte


def probe_features(task, ftr, ytr, fte, yte, probe_cfg: ProbeConfig, seed=0) -> ProbeResult:
    clf = LinearProbe(probe_cfg.lr, probe_cfg.batch, probe_cfg.epochs, seed).fit(ftr, ytr[task])
    return ProbeResult(task, float(clf.score(fte, yte[task])), clf.coef_, clf.intercept_, seed)


def train_probe(model: ParameterSet, cfg: ModelConfig, task: str, probe_cfg: ProbeConfig | None = None, seed=0, cache=None) -> ProbeResult:
    """Linear probe on the mean-pooled last layer; the model is only read."""
    probe_cfg = probe_cfg or ProbeConfig()
    if task not in sd.TASK_DOMAIN:
        raise ProbeError(f"unknown task {task!r}; known: {sorted(sd.TASK_DOMAIN)}")
    cache = cache or FeatureCache(cfg, probe_cfg)
    ftr, ytr, fte, yte = cache.features(model, sd.TASK_DOMAIN[task])
    return probe_features(task, ftr, ytr, fte, yte, probe_cfg, seed)


def probe_suite(model, cfg, tasks=None, probe_cfg=None, seeds=(0,), cache=None) -> dict:
    """Task -> accuracy averaged over probe seeds."""
    probe_cfg = probe_cfg or ProbeConfig()
    cache = cache or FeatureCache(cfg, probe_cfg)
    tasks = list(tasks or sd.TASK_DOMAIN)
    out = {}
    for domain in sd.CONTENT_TASK:
        dom_tasks = [t for t in tasks if sd.TASK_DOMAIN[t] == domain]
        if not dom_tasks:
            continue
        ftr, ytr, fte, yte = cache.features(model, domain)
        for task in dom_tasks:
            accs = [probe_features(task, ftr, ytr, fte, yte, probe_cfg, s).accuracy for s in seeds]
            out[task] = float(np.mean(accs))
    return {t: out[t] for t in tasks}


# ---------------------------------------------------------------- score tables


@dataclass
class ScoreTable:
    rows: dict = field(default_factory=dict)
    directions: dict = field(default_factory=dict)
    denominators: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)

    @property
    def models(self):
        return list(self.rows)

    @property
    def tasks(self):
        return list(self.directions)

    def validate(self):
        for model, scores in self.rows.items():
            missing = [t for t in self.directions if t not in scores]
            if missing:
                raise ValueError(f"model {model!r} has no score for {missing}")
        for t, d in self.directions.items():
            if d not in ("higher", "lower"):
                raise ValueError(f"direction of {t!r} must be 'higher' or 'lower', got {d!r}")

    def normalized(self, model, task):
        """Higher-is-better value; lower-better percentages become 100 - x."""
        x = self.rows[model][task]
        return 100.0 - x if self.directions[task] == "lower" else x

    def set_reference_best(self, models):
        """Denominator of each task = best normalized score among ``models``."""
        self.denominators = {t: max(self.normalized(m, t) for m in models) for t in self.directions}
        return self


def superb_score(table: ScoreTable, model, tasks=None) -> float:
    """1000/|T| * Σ_t (s_t - b_t) / (best_t - b_t), on direction-normalized scores."""
    tasks = list(tasks or table.tasks)
    total = 0.0
    for t in tasks:
        b = table.baselines.get(t, 0.0)
        best = table.denominators[t]
        if not best > b:
            raise DegenerateDenominatorError(f"task {t!r}: reference {best} is not above baseline {b}")
        total += (table.normalized(model, t) - b) / (best - b)
    return 1000.0 * (total / len(tasks))


def average_ranks(values, descending=True):
    """1-based ranks; tied entries share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    keys = -values if descending else values
    order = np.argsort(keys, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and keys[order[j + 1]] == keys[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def task_ranks(table: ScoreTable, task, models=None) -> dict:
    models = list(models or table.models)
    ranks = average_ranks([table.normalized(m, task) for m in models])
    return dict(zip(models, ranks.tolist()))


def rank_average(table: ScoreTable, tasks=None, models=None) -> dict:
    models = list(models or table.models)
    if len(models) < 2:
        raise ValueError("ranking needs at least two models")
    tasks = list(tasks or table.tasks)
    per_task = [task_ranks(table, t, models) for t in tasks]
    return {m: float(np.mean([r[m] for r in per_task])) for m in models}


def spearman(x, y) -> float:
    """Spearman rank correlation; nan if either input is constant."""
    rx = average_ranks(x, descending=False)
    ry = average_ranks(y, descending=False)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else float("nan")


# ---------------------------------------------------------------- csv io


def read_score_csv(text_or_path) -> ScoreTable:
    """Rows of ``model,task,value,direction``."""
    text = _read_text(text_or_path)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["model", "task", "value", "direction"]:
        raise ValueError("score csv header must be model,task,value,direction")
    table = ScoreTable()
    for row in reader:
        model, task = row["model"].strip(), row["task"].strip()
        direction = row["direction"].strip()
        if table.directions.setdefault(task, direction) != direction:
            raise ValueError(f"task {task!r} has conflicting directions")
        table.rows.setdefault(model, {})[task] = float(row["value"])
    table.validate()
    return table


def read_baselines_csv(text_or_path) -> dict:
    """Rows of ``task,value``."""
    reader = csv.DictReader(io.StringIO(_read_text(text_or_path)))
    return {row["task"].strip(): float(row["value"]) for row in reader}


def _read_text(text_or_path):
    if isinstance(text_or_path, str) and "\n" in text_or_path:
        return text_or_path
    with open(text_or_path, newline="") as fh:
        return fh.read()


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row[c]) for c in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 6))
    return v


# ---------------------------------------------------------------- sweep

DEFAULT_GRID = ((0.1, 0.9), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (0.9, 0.1))


def parse_grid(text: str):
    """``"0.1:0.9,0.5:0.5"`` -> [(0.1, 0.9), (0.5, 0.5)]."""
    grid = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        a, sep, b = part.partition(":")
        if not sep:
            raise ValueError(f"grid point {part!r} must look like a:b")
        grid.append((float(a), float(b)))
    if not grid:
        raise ValueError("empty grid")
    return grid


def sweep(theta0, tv_s, tv_m, cfg, grid=DEFAULT_GRID, tasks=None, probe_cfg=None, seeds=(0,), cache=None) -> list:
    """One linear merge and probe suite per grid point; rows are plot-ready."""
    probe_cfg = probe_cfg or ProbeConfig()
    cache = cache or FeatureCache(cfg, probe_cfg)
    rows = []
    for lam_s, lam_m in grid:
        merged = merge_linear(MergeSpec(theta0, [(tv_s, lam_s), (tv_m, lam_m)]))
        accs = probe_suite(merged, cfg, tasks, probe_cfg, seeds, cache)
        rows.append({"lambda1": float(lam_s), "lambda2": float(lam_m), **accs})
    return rows
