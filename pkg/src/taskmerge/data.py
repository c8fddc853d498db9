"""Deterministic synthetic signal domains.

``S`` (speech-like): four constant-frequency segments whose symbol sequence
is one of ten pattern families, shaped by one of twenty speaker envelopes.
Tasks: ``seq_class`` (10) and ``speaker_id`` (20).

``M`` (music-like): three harmonics of one of twelve fundamentals with
harmonic amplitude ratios from one of twenty timbre profiles. Tasks:
``pitch_class`` (12) and ``timbre_id`` (20).

``A`` (broad audio stand-in): unlabeled white-noise bursts.

Every example is a pure function of (domain, split, index, seed). Labels are
assigned by per-block permutations, so any prefix of a split is class
balanced to within one example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import read_tensors, write_tensors

N_SAMPLES = 2000
NOISE_STD = 0.05
DOMAINS = ("S", "M", "A")
SPLITS = ("train", "dev", "test")

TASKS = {
    "S": {"seq_class": 10, "speaker_id": 20},
    "M": {"pitch_class": 12, "timbre_id": 20},
    "A": {},
}
CONTENT_TASK = {"S": "seq_class", "M": "pitch_class"}
TASK_DOMAIN = {task: dom for dom, tasks in TASKS.items() for task in tasks}

# S: symbol codebook and pattern families
SYMBOL_FREQS = np.geomspace(0.02, 0.16, 10)
N_SEGMENTS = 4
# M: fundamentals and harmonics
FUNDAMENTALS = np.geomspace(0.03, 0.12, 12)
N_HARMONICS = 3

_DOMAIN_ID = {d: i for i, d in enumerate(DOMAINS)}
_SPLIT_ID = {s: i for i, s in enumerate(SPLITS)}


class DataError(ValueError):
    pass


def _families():
    rng = np.random.default_rng(20240611)
    fams = set()
    while len(fams) < 10:
        fams.add(tuple(int(s) for s in rng.choice(10, N_SEGMENTS, replace=False)))
    return [list(f) for f in sorted(fams)]


FAMILIES = _families()


def _speaker_profiles():
    # 5 loudness levels x 4 envelope shapes
    profiles = []
    for level in np.linspace(0.35, 0.85, 5):
        for shape in ("flat", "rise", "fall", "peak"):
            profiles.append((float(level), shape))
    return profiles


SPEAKERS = _speaker_profiles()


def _timbre_profiles():
    # 5 second-harmonic levels x 4 third-harmonic levels, log-spaced
    return [(1.0, r2, r3) for r2 in (0.15, 0.4, 1.0, 2.5, 6.0) for r3 in (0.15, 0.45, 1.2, 3.0)]


TIMBRES = _timbre_profiles()


@dataclass
class Example:
    signal: np.ndarray
    domain: str
    labels: dict


def _check(domain, split):
    if domain not in DOMAINS:
        raise DataError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")


def _rng(seed, domain, split, *extra):
    return np.random.default_rng([int(seed), _DOMAIN_ID[domain], _SPLIT_ID[split], *extra])


def label_for(domain, split, index, seed, task) -> int:
    k = TASKS[domain][task]
    task_id = list(TASKS[domain]).index(task)
    perm = _rng(seed, domain, split, 1, task_id, index // k).permutation(k)
    return int(perm[index % k])


def _envelope(shape, t):
    u = t / (len(t) - 1)
    if shape == "flat":
        return np.ones_like(u)
    if shape == "rise":
        return 0.55 + 0.9 * u
    if shape == "fall":
        return 1.45 - 0.9 * u
    return 0.55 + 0.9 * np.sin(np.pi * u)


def _speech(labels, rng):
    t = np.arange(N_SAMPLES, dtype=np.float64)
    seg = N_SAMPLES // N_SEGMENTS
    level, shape = SPEAKERS[labels["speaker_id"]]
    x = np.zeros(N_SAMPLES)
    for i, sym in enumerate(FAMILIES[labels["seq_class"]]):
        f = SYMBOL_FREQS[sym] * (1.0 + rng.uniform(-0.01, 0.01))
        span = slice(i * seg, (i + 1) * seg)
        x[span] = np.sin(2 * np.pi * f * t[span] + rng.uniform(0, 2 * np.pi))
    return level * _envelope(shape, t) * x / 1.45


def _music(labels, rng):
    t = np.arange(N_SAMPLES, dtype=np.float64)
    f0 = FUNDAMENTALS[labels["pitch_class"]] * (1.0 + rng.uniform(-0.02, 0.02))
    ratios = TIMBRES[labels["timbre_id"]]
    x = np.zeros(N_SAMPLES)
    for h, r in enumerate(ratios, start=1):
        x += r * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    return 0.8 * x / sum(ratios)


def _bursts(rng):
    x = np.zeros(N_SAMPLES)
    for _ in range(int(rng.integers(2, 6))):
        length = int(rng.integers(100, 500))
        start = int(rng.integers(0, N_SAMPLES - length))
        x[start : start + length] += rng.uniform(0.2, 0.6) * rng.standard_normal(length)
    return x


def make_example(domain, split, index, seed) -> Example:
    _check(domain, split)
    labels = {task: label_for(domain, split, index, seed, task) for task in TASKS[domain]}
    rng = _rng(seed, domain, split, 0, index)
    if domain == "S":
        x = _speech(labels, rng)
    elif domain == "M":
        x = _music(labels, rng)
    else:
        x = _bursts(rng)
    x = x + NOISE_STD * rng.standard_normal(N_SAMPLES)
    return Example(np.clip(x, -1.0, 1.0).astype(np.float32), domain, labels)


def generate(domain, split, n, seed, start=0):
    """Yield ``n`` examples of ``domain`` starting at index ``start``."""
    if n <= 0:
        raise DataError("n must be positive")
    _check(domain, split)
    for i in range(start, start + n):
        yield make_example(domain, split, i, seed)


def _parse_specs(specs):
    if not specs:
        raise DataError("mixture needs at least one (domain, weight) pair")
    specs = [(d, float(w)) for d, w in specs]
    for d, w in specs:
        if d not in DOMAINS:
            raise DataError(f"unknown domain {d!r}")
        if w <= 0:
            raise DataError(f"mixture weight for {d} must be positive")
    if abs(sum(w for _, w in specs) - 1.0) > 1e-6:
        raise DataError("mixture weights must sum to 1")
    return specs


def mixture_domains(specs, n):
    """Deterministic interleaving: each position goes to the domain furthest behind its quota."""
    specs = _parse_specs(specs)
    counts = [0] * len(specs)
    order = []
    for i in range(n):
        deficits = [w * (i + 1) - c for (_, w), c in zip(specs, counts)]
        j = int(np.argmax(deficits))
        counts[j] += 1
        order.append(specs[j][0])
    return order


def mixture(specs, n, seed, split="train", start=0):
    """Interleaved examples drawn by weight; domain streams keep their own indices.

    Positions ``start..start+n`` of the full interleaving are yielded.
    """
    if n <= 0:
        raise DataError("n must be positive")
    order = mixture_domains(specs, start + n)
    seen = dict.fromkeys(DOMAINS, 0)
    for pos, d in enumerate(order):
        if pos >= start:
            yield make_example(d, split, seen[d], seed)
        seen[d] += 1


def parse_mixture(text: str):
    """``"S"`` or ``"S:0.5,M:0.5"`` -> [(domain, weight), ...]."""
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) == 1 and ":" not in parts[0]:
        return [(parts[0], 1.0)]
    out = []
    for p in parts:
        d, _, w = p.partition(":")
        out.append((d, float(w)))
    return _parse_specs(out)


def stack(examples):
    """Examples -> (signals [n, samples], labels task -> int array (-1 where absent), domains list)."""
    examples = list(examples)
    signals = np.stack([e.signal for e in examples])
    tasks = sorted({t for e in examples for t in e.labels})
    labels = {t: np.array([e.labels.get(t, -1) for e in examples], dtype=np.int64) for t in tasks}
    return signals, labels, [e.domain for e in examples]


def arrays(domain, split, n, seed):
    signals, labels, _ = stack(generate(domain, split, n, seed))
    return signals, labels


def export_dataset(path, examples, meta=None):
    """Write examples with the checkpoint tensor encoding (labels stored as F32)."""
    signals, labels, domains = stack(examples)
    tensors = {"signal": signals, "domain": np.array([_DOMAIN_ID[d] for d in domains], np.float32)}
    for task, y in labels.items():
        tensors[f"labels.{task}"] = y.astype(np.float32)
    write_tensors(path, tensors, {"format": "taskmerge-dataset", **(meta or {})})


def import_dataset(path):
    tensors, meta = read_tensors(path)
    if meta.get("format") != "taskmerge-dataset":
        raise DataError(f"{path} is not a dataset container")
    signals = tensors["signal"]
    domains = [DOMAINS[int(c)] for c in tensors["domain"]]
    labels = {k.split(".", 1)[1]: v.astype(np.int64) for k, v in tensors.items() if k.startswith("labels.")}
    out = []
    for i, d in enumerate(domains):
        lab = {t: int(y[i]) for t, y in labels.items() if y[i] >= 0 and t in TASKS[d]}
        out.append(Example(signals[i].copy(), d, lab))
    return out, meta
