"""Plain-text ``key = value`` experiment configs.

Blank lines and ``#`` comments are ignored. Values are parsed by the type of
the field they set; tuples are comma separated, a grid is ``a:b,c:d``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import data as sd
from .distill import TeacherBudget
from .evaluation import DEFAULT_GRID, ProbeConfig, parse_grid
from .models import ModelConfig


class ConfigFileError(ValueError):
    pass


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected key = value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_kv(path) -> dict:
    with open(path) as fh:
        return parse_kv(fh.read())


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _to_text(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ",".join(f"{a!r}:{b!r}" for a, b in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _from_text(current, text, key):
    try:
        if isinstance(current, bool):
            return _parse_bool(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple) and current and isinstance(current[0], tuple):
            return tuple(parse_grid(text))
        if isinstance(current, tuple):
            kind = type(current[0]) if current else int
            return tuple(kind(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigFileError(f"{key}: {exc}") from None


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the end-to-end experiment; defaults are the desk profile."""

    # model
    d_model: int = 32
    n_heads: int = 2
    ffn_mult: int = 4
    teacher_layers: int = 6
    student_layers: int = 2
    conv_channels: int = 16
    max_positions: int = 256
    head_targets: tuple = (2, 4, 6)
    # teachers
    teacher_steps: int = 1500
    teacher_batch: int = 16
    teacher_lr: float = 1e-3
    teacher_gate: float = 0.95
    teacher_seed_s: int = 0
    teacher_seed_m: int = 1
    # distillation
    distill_steps: int = 2000
    distill_batch: int = 16
    distill_lr: float = 5e-4
    loss_lambda: float = 1.0
    distill_data: str = "matched"
    distill_seed: int = 0
    head_seed: int = 0
    ensemble: bool = True
    # merging
    lambda_s: float = 0.9
    lambda_m: float = 0.1
    ties_density: float = 0.2
    grid: tuple = field(default=DEFAULT_GRID)
    # probing
    probe_seeds: tuple = (0, 1, 2)
    probe_epochs: int = 20
    probe_n_train: int = 1000
    probe_n_test: int = 600
    probe_data_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            ffn_mult=self.ffn_mult,
            teacher_layers=self.teacher_layers,
            student_layers=self.student_layers,
            conv_channels=self.conv_channels,
            max_positions=self.max_positions,
            head_targets=self.head_targets,
        )

    def teacher_budget(self) -> TeacherBudget:
        return TeacherBudget(steps=self.teacher_steps, batch=self.teacher_batch, lr=self.teacher_lr, gate=self.teacher_gate)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(epochs=self.probe_epochs, n_train=self.probe_n_train, n_test=self.probe_n_test, data_seed=self.probe_data_seed)

    def distill_mixture(self, domains) -> list:
        """Data mixture for a student of teachers from ``domains``.

        ``"matched"`` draws each teacher's own domain, split evenly; anything
        else is parsed as a fixed mixture shared by every student.
        """
        if self.distill_data == "matched":
            domains = list(domains)
            return sd.parse_mixture(",".join(f"{d}:{1 / len(domains)}" for d in domains))
        return sd.parse_mixture(self.distill_data)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_kv(self) -> dict:
        return {f.name: _to_text(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_kv(cls, values: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigFileError(f"unknown config keys {unknown}")
        changes = {k: _from_text(getattr(base, k), v, k) for k, v in values.items()}
        cfg = dataclasses.replace(base, **changes)
        cfg.model_config()
        try:
            cfg.distill_mixture(["S", "M"])
        except ValueError as exc:
            raise ConfigFileError(f"distill_data: {exc}") from None
        return cfg

    @classmethod
    def read(cls, path) -> "PipelineConfig":
        return cls.from_kv(read_kv(path))
