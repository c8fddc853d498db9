"""Toy convolution-frontend transformer encoders.

Parameter naming (stable; merge key matching depends on it)::

    frontend.conv0.weight   [conv_channels, 1, 10]
    frontend.conv0.bias     [conv_channels]
    frontend.conv1.weight   [d_model, conv_channels, 8]
    frontend.conv1.bias     [d_model]
    frontend.pos_embed      [max_positions, d_model]
    encoder.layer.{i}.ln1.gain / .bias              [d_model]
    encoder.layer.{i}.attn.{q,k,v,o}.weight         [d_model, d_model]
    encoder.layer.{i}.attn.{q,k,v,o}.bias           [d_model]
    encoder.layer.{i}.ln2.gain / .bias              [d_model]
    encoder.layer.{i}.ffn.in.weight / .bias         [d_model, ffn_mult*d_model] / [ffn_mult*d_model]
    encoder.layer.{i}.ffn.out.weight / .bias        [ffn_mult*d_model, d_model] / [d_model]
    heads.{j}.weight / .bias                        [d_model, d_model] / [d_model]   (students only)

Layers are numbered from 0 in names; hidden state k is the output of layer
k-1 and hidden state 0 is the frontend output (after positional embeddings).
Linear weights are stored [in, out] and applied as ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import ParameterSet, init_digest

HEAD_PREFIX = "heads."
CONV_STAGES = ((10, 5), (8, 4))


class ConfigError(ValueError):
    pass


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    teacher_layers: int = 6
    student_layers: int = 2
    conv_channels: int = 32
    max_positions: int = 256
    head_targets: tuple = (2, 4, 6)

    def __post_init__(self):
        object.__setattr__(self, "head_targets", tuple(int(t) for t in self.head_targets))
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        t = self.head_targets
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] < 1 or t[-1] > self.teacher_layers:
            raise ConfigError(f"head_targets {t} must be strictly increasing within 1..{self.teacher_layers}")
        if not 1 <= self.student_layers < self.teacher_layers:
            raise ConfigError(f"student_layers={self.student_layers} must be in 1..{self.teacher_layers - 1}")

    def to_dict(self):
        d = asdict(self)
        d["head_targets"] = list(self.head_targets)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def n_layers(self, role):
        return self.teacher_layers if role == "teacher" else self.student_layers

    def _role_dict(self, role):
        cfg = self.to_dict()
        if role == "teacher":
            # the student depth does not change a teacher
            del cfg["student_layers"]
        return cfg

    def arch_id(self, role, n_heads_out=0) -> str:
        blob = json.dumps({"cfg": self._role_dict(role), "role": role, "pred_heads": n_heads_out}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def meta(self, role, n_heads_out=0) -> dict:
        """Metadata tying a checkpoint to this architecture."""
        return {"arch_id": self.arch_id(role, n_heads_out), "model_config": json.dumps(self._role_dict(role), sort_keys=True)}

    @property
    def receptive_field(self):
        rf, jump = 1, 1
        for k, s in CONV_STAGES:
            rf += (k - 1) * jump
            jump *= s
        return rf

    def frames(self, samples: int) -> int:
        n = samples
        for k, s in CONV_STAGES:
            n = (n - k) // s + 1
        return n


ARCH_KEYS = ("arch_id", "model_config")


def config_from_meta(ps) -> ModelConfig | None:
    """The ModelConfig recorded in a checkpoint, or None for foreign files."""
    text = ps.meta.get("model_config")
    if not text:
        return None
    try:
        return ModelConfig.from_dict(json.loads(text))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"unreadable model_config metadata: {exc}") from None


def layer_shapes(cfg: ModelConfig, i: int) -> dict:
    d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
    p = f"encoder.layer.{i}."
    shapes = {p + "ln1.gain": (d,), p + "ln1.bias": (d,), p + "ln2.gain": (d,), p + "ln2.bias": (d,)}
    for name in "qkvo":
        shapes[p + f"attn.{name}.weight"] = (d, d)
        shapes[p + f"attn.{name}.bias"] = (d,)
    shapes[p + "ffn.in.weight"] = (d, f)
    shapes[p + "ffn.in.bias"] = (f,)
    shapes[p + "ffn.out.weight"] = (f, d)
    shapes[p + "ffn.out.bias"] = (d,)
    return shapes


def frontend_shapes(cfg: ModelConfig) -> dict:
    (k0, _), (k1, _) = CONV_STAGES
    c = cfg.conv_channels
    return {
        "frontend.conv0.weight": (c, 1, k0),
        "frontend.conv0.bias": (c,),
        "frontend.conv1.weight": (cfg.d_model, c, k1),
        "frontend.conv1.bias": (cfg.d_model,),
        "frontend.pos_embed": (cfg.max_positions, cfg.d_model),
    }


def head_shapes(cfg: ModelConfig, n_heads: int) -> dict:
    d = cfg.d_model
    shapes = {}
    for j in range(n_heads):
        shapes[f"heads.{j}.weight"] = (d, d)
        shapes[f"heads.{j}.bias"] = (d,)
    return shapes


def _init_tensor(name, shape, rng):
    if name.endswith(".bias"):
        return np.zeros(shape, np.float32)
    if name.endswith(".gain"):
        return np.ones(shape, np.float32)
    if name.endswith("pos_embed"):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_tensors(shapes: dict, seed: int) -> dict:
    """Deterministic init; tensors drawn in lexicographic name order."""
    rng = np.random.default_rng(seed)
    return {name: _init_tensor(name, shapes[name], rng) for name in sorted(shapes)}


def build_model(cfg: ModelConfig, role: str = "teacher", seed: int = 0, n_pred_heads: int | None = None) -> ParameterSet:
    """Freshly initialized teacher or student.

    Students get ``n_pred_heads`` prediction heads (default: one per head
    target).
    """
    if role not in ("teacher", "student"):
        raise ConfigError(f"role must be teacher or student, got {role!r}")
    shapes = dict(frontend_shapes(cfg))
    for i in range(cfg.n_layers(role)):
        shapes.update(layer_shapes(cfg, i))
    n_pred = 0
    if role == "student":
        n_pred = len(cfg.head_targets) if n_pred_heads is None else n_pred_heads
        shapes.update(head_shapes(cfg, n_pred))
    ps = ParameterSet(init_tensors(shapes, seed), {**cfg.meta(role, n_pred), "kind": role, "steps": 0})
    if role == "student":
        ps = ps.with_meta(init_digest=init_digest(ps))
    return ps


def init_student_from_teacher(teacher: ParameterSet, cfg: ModelConfig, n_teachers: int = 1, seed: int = 0) -> ParameterSet:
    """Student θ0: frontend and the first ``student_layers`` layers copied from ``teacher``.

    Prediction heads (``n_teachers * len(head_targets)``) are freshly drawn
    from ``seed``.
    """
    expected = dict(frontend_shapes(cfg))
    for i in range(cfg.student_layers):
        expected.update(layer_shapes(cfg, i))
    missing = [k for k in expected if k not in teacher]
    if missing:
        raise ConfigError(f"teacher lacks {len(missing)} parameters needed by the student, e.g. {missing[:3]}")
    bad = [k for k, s in expected.items() if teacher[k].shape != s]
    if bad:
        raise ConfigError(f"shape incompatibility between teacher and student config: {bad[:3]}")
    entries = {k: teacher[k].copy() for k in expected}
    n_pred = n_teachers * len(cfg.head_targets)
    entries.update(init_tensors(head_shapes(cfg, n_pred), seed))
    ps = ParameterSet(entries, {**cfg.meta("student", n_pred), "kind": "student", "steps": 0})
    return ps.with_meta(init_digest=init_digest(ps))


def count_heads(ps) -> int:
    return len({k.split(".")[1] for k in ps.keys() if k.startswith(HEAD_PREFIX)})


def count_layers(ps) -> int:
    return len({k.split(".")[2] for k in ps.keys() if k.startswith("encoder.layer.")})


# ---------------------------------------------------------------- forward


def _linear(params, prefix, x):
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def _layer(params, cfg, i, h):
    p = f"encoder.layer.{i}."
    b, t, d = h.shape
    nh, dh = cfg.n_heads, d // cfg.n_heads

    x = ad.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])

    def split(z):
        return ad.permute(ad.reshape(z, (b, t, nh, dh)), (0, 2, 1, 3))

    q = split(ad.scale(_linear(params, p + "attn.q", x), 1.0 / np.sqrt(dh)))
    k = split(_linear(params, p + "attn.k", x))
    v = split(_linear(params, p + "attn.v", x))
    att = ad.softmax(ad.matmul(q, ad.transpose(k)))
    ctx = ad.reshape(ad.permute(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    h = ad.add(h, _linear(params, p + "attn.o", ctx))

    x = ad.layer_norm(h, params[p + "ln2.gain"], params[p + "ln2.bias"])
    x = _linear(params, p + "ffn.out", ad.gelu(_linear(params, p + "ffn.in", x)))
    return ad.add(h, x)


def check_signal(cfg: ModelConfig, samples: int):
    if samples < cfg.receptive_field:
        raise SignalError(f"signal of {samples} samples is shorter than the receptive field {cfg.receptive_field}")
    frames = cfg.frames(samples)
    if frames > cfg.max_positions:
        raise SignalError(f"signal yields {frames} frames, more than max_positions={cfg.max_positions}")
    return frames


def encode(params: dict, cfg: ModelConfig, signal, n_layers: int) -> list:
    """Graph-level forward. ``params`` maps names to Nodes or arrays.

    ``signal`` is [samples] or [batch, samples]; returns ``n_layers + 1``
    Nodes of shape [batch, frames, d_model].
    """
    params = {k: ad.lift(v) for k, v in params.items()}
    sig = np.asarray(signal)
    if sig.ndim == 1:
        sig = sig[None]
    sig = ad.as_array(sig)
    frames = check_signal(cfg, sig.shape[-1])
    (_, s0), (_, s1) = CONV_STAGES
    x = ad.Node(sig[..., None])
    x = ad.gelu(ad.add(ad.conv1d(x, params["frontend.conv0.weight"], s0), params["frontend.conv0.bias"]))
    x = ad.gelu(ad.add(ad.conv1d(x, params["frontend.conv1.weight"], s1), params["frontend.conv1.bias"]))
    pos = ad.embedding(params["frontend.pos_embed"], np.arange(frames))
    h = ad.add(x, pos)
    states = [h]
    for i in range(n_layers):
        h = _layer(params, cfg, i, h)
        states.append(h)
    return states


def forward(ps: ParameterSet, cfg: ModelConfig, signal, n_layers: int | None = None) -> list:
    """Per-layer hidden states as float32 arrays, no gradient tape."""
    if n_layers is None:
        n_layers = count_layers(ps)
    states = encode(dict(ps.items()), cfg, signal, n_layers)
    squeeze = np.asarray(signal).ndim == 1
    return [s.value[0] if squeeze else s.value for s in states]


def predict_heads(params: dict, last_state, n_heads: int) -> list:
    """Prediction-head outputs, each a linear map of the last hidden state."""
    params = {k: ad.lift(v) for k, v in params.items()}
    return [_linear(params, f"heads.{j}", last_state) for j in range(n_heads)]


def parameter_count(cfg: ModelConfig, role: str, n_pred_heads: int = 0) -> int:
    shapes = dict(frontend_shapes(cfg))
    for i in range(cfg.n_layers(role)):
        shapes.update(layer_shapes(cfg, i))
    shapes.update(head_shapes(cfg, n_pred_heads))
    return sum(int(np.prod(s)) for s in shapes.values())
