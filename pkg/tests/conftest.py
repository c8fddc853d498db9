import csv
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from taskmerge.config import PipelineConfig, format_kv
from taskmerge.manifest import read_manifest
from taskmerge.pipeline import run_pipeline

# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"

    return record


# ---------------------------------------------------------------- pipeline runs


@dataclass
class Run:
    path: Path
    seconds: float

    def csv(self, name):
        with open(self.path / name, newline="") as fh:
            return list(csv.DictReader(fh))

    def per_seed(self):
        """model -> task -> {seed: accuracy}"""
        out = {}
        for r in self.csv("probes.csv"):
            out.setdefault(r["model"], {}).setdefault(r["task"], {})[int(r["seed"])] = float(r["accuracy"])
        return out

    def accuracy(self, model, task):
        seeds = self.per_seed()[model][task]
        return sum(seeds.values()) / len(seeds)

    def records(self):
        rows = json.loads((self.path / "run_records.json").read_text())["resources"]
        return {r["method"]: r for r in rows}


def _complete(out, pcfg):
    """An earlier run with the same config can stand in for a new one."""
    try:
        entry = read_manifest(out)["artifacts"]["pipeline"]
        return (out / "config.txt").read_text() == format_kv(pcfg.to_kv()) and entry
    except (OSError, KeyError, ValueError):
        return None


def _run(pcfg, out, teacher_dir=None):
    if os.environ.get("TASKMERGE_REUSE_RUNS"):
        entry = _complete(out, pcfg)
        if entry:
            return Run(out, float(entry["wall_clock_seconds"]))
    start = time.perf_counter()
    run_pipeline(pcfg, str(out), teacher_dir=None if teacher_dir is None else str(teacher_dir))
    return Run(out, time.perf_counter() - start)


@dataclass
class Runs:
    two: Run
    two_again: Run
    three: Run


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """Default pipeline twice (determinism) and once with 3-layer students.

    Set TASKMERGE_ACCEPT_DIR to keep the outputs; add TASKMERGE_REUSE_RUNS=1
    to reuse finished runs with an identical config instead of recomputing.
    """
    root = os.environ.get("TASKMERGE_ACCEPT_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("pipeline")
    base = PipelineConfig()
    two = _run(base, root / "layers2")
    two_again = _run(base, root / "layers2_repeat")
    three = _run(base.replace(student_layers=3), root / "layers3", teacher_dir=root / "layers2")
    return Runs(two, two_again, three)
