"""Task vectors and merge strategies: linear interpolation, plain averaging, TIES."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ParameterSet, init_digest
from .models import ARCH_KEYS, HEAD_PREFIX


class MergeError(ValueError):
    pass


class KeyMismatchError(MergeError):
    def __init__(self, missing=(), extra=(), shapes=()):
        self.missing, self.extra, self.shapes = list(missing), list(extra), list(shapes)
        parts = []
        if self.missing:
            parts.append(f"missing keys {self.missing}")
        if self.extra:
            parts.append(f"unexpected keys {self.extra}")
        if self.shapes:
            parts.append("shape conflicts " + ", ".join(f"{k}: {a} vs {b}" for k, a, b in self.shapes))
        super().__init__("; ".join(parts))


class DivergentInitError(MergeError):
    """The fine-tuned model did not start from the given initialization."""


class MergeWeightWarning(UserWarning):
    pass


class TaskVector(ParameterSet):
    """Per-key deltas θ_FT − θ0, tagged with the digest of θ0."""

    @property
    def source(self):
        return self.meta.get("source_teacher", "")

    @classmethod
    def from_parameter_set(cls, ps):
        if ps.kind != "task_vector":
            raise MergeError(f"expected a task_vector checkpoint, got kind={ps.kind!r}")
        return cls(dict(ps.items()), dict(ps.meta))


def _arch(ps):
    return {k: ps.meta[k] for k in ARCH_KEYS if k in ps.meta}


def _keep(name, include_heads):
    return include_heads or not name.startswith(HEAD_PREFIX)


def _filtered(ps, include_heads):
    return {k: v for k, v in ps.items() if _keep(k, include_heads)}


def check_keys(reference: dict, other: dict):
    missing = sorted(set(reference) - set(other))
    extra = sorted(set(other) - set(reference))
    shapes = [(k, reference[k].shape, other[k].shape) for k in sorted(set(reference) & set(other)) if reference[k].shape != other[k].shape]
    if missing or extra or shapes:
        raise KeyMismatchError(missing, extra, shapes)


def task_vector(theta_ft: ParameterSet, theta_0: ParameterSet, include_heads=False, source=None) -> TaskVector:
    base_digest = init_digest(theta_0)
    if theta_ft.init_digest != base_digest:
        raise DivergentInitError(
            f"divergent initialization: model records init digest {theta_ft.init_digest or '<none>'}, base digest is {base_digest}"
        )
    ft = _filtered(theta_ft, include_heads)
    base = _filtered(theta_0, include_heads)
    check_keys(base, ft)
    deltas = {k: ft[k] - base[k] for k in base}
    meta = {
        "kind": "task_vector",
        "init_digest": base_digest,
        "source_teacher": source if source is not None else theta_ft.meta.get("teachers", ""),
        "steps": theta_ft.steps,
        "include_heads": int(include_heads),
    }
    meta.update(_arch(theta_ft))
    return TaskVector(deltas, meta)


@dataclass
class MergeSpec:
    base: ParameterSet
    terms: list
    mode: str = "linear"
    ties_density: float = 0.2
    include_heads: bool = False
    ties_granularity: str = "global"
    base_digest: str = field(init=False, default="")

    def validate(self):
        if self.mode not in ("linear", "ties"):
            raise MergeError(f"unknown merge mode {self.mode!r}")
        if not self.terms:
            raise MergeError("merge needs at least one task vector")
        if not 0.0 < self.ties_density <= 1.0:
            raise MergeError(f"ties_density must be in (0, 1], got {self.ties_density}")
        if self.ties_granularity not in ("global", "tensor"):
            raise MergeError(f"ties_granularity must be global or tensor, got {self.ties_granularity!r}")
        self.base_digest = init_digest(self.base)
        base = _filtered(self.base, self.include_heads)
        for tv, _ in self.terms:
            if tv.init_digest != self.base_digest:
                raise DivergentInitError(
                    f"divergent initialization: task vector {tv.meta.get('source_teacher', '?')!r} was taken against "
                    f"{tv.init_digest or '<none>'}, base digest is {self.base_digest}"
                )
            check_keys(base, _filtered(tv, self.include_heads))
        total = sum(lam for _, lam in self.terms)
        if abs(total - 1.0) > 1e-9:
            warnings.warn(f"interpolation weights sum to {total:g}, not 1", MergeWeightWarning, stacklevel=3)
        return base

    def _meta(self, **extra):
        meta = {
            "kind": "merged",
            "init_digest": self.base_digest,
            "steps": 0,
            "merge_mode": self.mode,
            "lambdas": ",".join(repr(float(lam)) for _, lam in self.terms),
            "labels": ",".join(tv.meta.get("source_teacher", "") for tv, _ in self.terms),
            "source_digests": ",".join(init_digest(tv) for tv, _ in self.terms),
        }
        meta.update(_arch(self.base))
        meta.update(extra)
        return meta


def merge_linear(spec: MergeSpec) -> ParameterSet:
    """θ0 + Σ λ_i · τ_i, accumulated per element in term order."""
    base = spec.validate()
    out = {}
    for k, theta in base.items():
        acc = theta.copy()
        for tv, lam in spec.terms:
            acc = acc + np.float32(lam) * tv[k]
        out[k] = acc
    return ParameterSet(out, spec._meta())


def merge_average(models) -> ParameterSet:
    """Per-key arithmetic mean; no shared-initialization requirement."""
    models = list(models)
    if len(models) < 2:
        raise MergeError("averaging needs at least two models")
    ref = dict(models[0].items())
    for m in models[1:]:
        check_keys(ref, dict(m.items()))
    n = np.float32(len(models))
    out = {}
    for k in ref:
        acc = models[0][k].copy()
        for m in models[1:]:
            acc = acc + m[k]
        out[k] = acc / n
    digests = {m.init_digest for m in models}
    merged = ParameterSet(out, {"kind": "merged", "steps": 0, "merge_mode": "average", "source_digests": ",".join(init_digest(m) for m in models)})
    if len(digests) == 1 and None not in digests:
        shared = digests.pop()
    else:
        # no common origin: the average is its own initialization
        shared = init_digest(merged)
    meta = dict(merged.meta, init_digest=shared)
    meta.update(_arch(models[0]))
    return ParameterSet(out, meta)


def _trim_mask(values, density):
    n = values.size
    k = min(n, max(1, int(np.ceil(density * n - 1e-9))))
    order = np.argsort(-np.abs(values), kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


def ties_vector(vectors, density: float, granularity="global", sizes=None):
    """TRIM / ELECT / DISJOINT-MEAN over flat float32 task vectors.

    With ``granularity="tensor"``, ``sizes`` gives the consecutive segment
    lengths trimmed independently.
    """
    stacked = np.stack([np.asarray(v, dtype=np.float32) for v in vectors])
    trimmed = np.zeros_like(stacked)
    for i, v in enumerate(stacked):
        if granularity == "global":
            mask = _trim_mask(v, density)
        else:
            mask = np.zeros(v.size, dtype=bool)
            start = 0
            for size in sizes:
                mask[start : start + size] = _trim_mask(v[start : start + size], density)
                start += size
        trimmed[i] = np.where(mask, v, np.float32(0))
    total = np.zeros(stacked.shape[1], dtype=np.float32)
    for row in trimmed:
        total = total + row
    elected = np.sign(total)
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    acc = np.zeros_like(total)
    for row, keep in zip(trimmed, agree):
        acc = acc + np.where(keep, row, np.float32(0))
    count = agree.sum(axis=0)
    return np.where(count > 0, acc / np.maximum(count, 1).astype(np.float32), np.float32(0))


def merge_ties(spec: MergeSpec) -> ParameterSet:
    """TIES merge scaled by the mean of the term weights and added to θ0."""
    base = spec.validate()
    keys = list(base)
    flat = [np.concatenate([tv[k].ravel() for k in keys]) if keys else np.zeros(0, np.float32) for tv, _ in spec.terms]
    sizes = [base[k].size for k in keys]
    merged = ties_vector(flat, spec.ties_density, spec.ties_granularity, sizes)
    lam = np.float32(np.mean([lam for _, lam in spec.terms]))
    out, start = {}, 0
    for k, size in zip(keys, sizes):
        out[k] = base[k] + lam * merged[start : start + size].reshape(base[k].shape)
        start += size
    return ParameterSet(out, spec._meta(ties_density=spec.ties_density, ties_lambda=repr(float(lam)), ties_granularity=spec.ties_granularity))


def merge(spec: MergeSpec) -> ParameterSet:
    return merge_ties(spec) if spec.mode == "ties" else merge_linear(spec)


@dataclass
class CompatReport:
    missing_in_a: list
    missing_in_b: list
    shape_conflicts: list
    digest_relation: str
    cosine: float | None
    shared_parameters: int

    @property
    def conflicts(self):
        return self.missing_in_a + self.missing_in_b + [k for k, _, _ in self.shape_conflicts]

    def lines(self):
        yield f"missing in a: {len(self.missing_in_a)}"
        yield f"missing in b: {len(self.missing_in_b)}"
        yield f"shape conflicts: {len(self.shape_conflicts)}"
        yield f"init digests: {self.digest_relation}"
        yield f"flattened cosine over {self.shared_parameters} shared parameters: " + ("n/a" if self.cosine is None else f"{self.cosine:.6f}")


def compat_check(a: ParameterSet, b: ParameterSet, include_heads=False) -> CompatReport:
    fa, fb = _filtered(a, include_heads), _filtered(b, include_heads)
    shared = sorted(set(fa) & set(fb))
    shapes = [(k, fa[k].shape, fb[k].shape) for k in shared if fa[k].shape != fb[k].shape]
    same = [k for k in shared if fa[k].shape == fb[k].shape]
    if a.init_digest and b.init_digest:
        relation = "equal" if a.init_digest == b.init_digest else "different"
    else:
        relation = "unknown"
    cosine = None
    count = sum(fa[k].size for k in same)
    if same:
        va = np.concatenate([fa[k].ravel() for k in same]).astype(np.float64)
        vb = np.concatenate([fb[k].ravel() for k in same]).astype(np.float64)
        denom = np.linalg.norm(va) * np.linalg.norm(vb)
        cosine = float(va @ vb / denom) if denom > 0 else 0.0
    return CompatReport(sorted(set(fb) - set(fa)), sorted(set(fa) - set(fb)), shapes, relation, cosine, count)
