"""Run manifests: one ``manifest.json`` per artifact directory.

Each artifact written into a directory gets an entry (command line, config
snapshot, seeds, input digests, tool version, wall clock). Writing a second
artifact into the same directory adds an entry instead of a second file.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import sys

from . import __version__

MANIFEST = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(directory) -> dict:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        return {"tool": "taskmerge", "artifacts": {}}
    with open(path) as fh:
        return json.load(fh)


def write_manifest(directory, argv=None, config=None, seeds=None, inputs=None, wall_clock=0.0, artifact="*", outputs=None):
    """Record one artifact; ``inputs`` maps labels to file paths (digested here)."""
    directory = directory or "."
    manifest = read_manifest(directory)
    digests = {}
    for label, path in (inputs or {}).items():
        digests[label] = {"path": str(path), "sha256": file_digest(path)}
    out_digests = {}
    for path in outputs or ():
        out_digests[os.path.basename(path)] = file_digest(path)
    manifest["artifacts"][artifact] = {
        "command": list(sys.argv if argv is None else argv),
        "config": dict(config or {}),
        "seeds": dict(seeds or {}),
        "inputs": digests,
        "outputs": out_digests,
        "version": __version__,
        "python": platform.python_version(),
        "wall_clock_seconds": round(float(wall_clock), 3),
    }
    tmp = os.path.join(directory, MANIFEST + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(directory, MANIFEST))
    return manifest
