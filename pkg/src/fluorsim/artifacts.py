"""Output directory handling: plot CSVs, summary JSON and run manifests."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np

from . import __version__

SUMMARY_SCHEMA_VERSION = 1


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays converted, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_curve(path, columns):
    """Plot-ready CSV; ``columns`` maps unit-suffixed names to equal-length arrays."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[k], dtype=float) for k in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


class RunDirectory:
    """Collects artifacts of one command under ``out_dir``.

    Every path handed out is checked to stay inside the directory.
    """

    def __init__(self, out_dir, command):
        self.root = Path(out_dir).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.outputs = {}
        self.timings = {}
        self._t0 = time.perf_counter()

    def path(self, name, label=None) -> Path:
        p = (self.root / name).resolve()
        if self.root not in p.parents:
            raise ValueError(f"refusing to write outside the output directory: {name}")
        self.outputs[label or name] = name
        return p

    def timed(self, stage):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[stage] = run.timings.get(stage, 0.0) + time.perf_counter() - self.t
                return False

        return _Timer()

    def write_summary(self, config_hash, seed, repetitions, fits, results, warnings_list):
        summary = {
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "command": self.command,
            "tool_version": __version__,
            "config_hash": config_hash,
            "seeds": {"master": seed, "streams": "(master, repetition, sweep_point)"},
            "repetitions": repetitions,
            "fits": fits,
            "results": results,
            "warnings": list(warnings_list),
        }
        dump_json(summary, self.path("summary.json"))
        return summary

    def write_manifest(self, config_hash, seed, argv):
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {
            "tool_version": __version__,
            "command": self.command,
            "argv": list(argv),
            "config_hash": config_hash,
            "master_seed": seed,
            "outputs": dict(self.outputs),
            "timings_s": dict(self.timings),
        }
        self.outputs["manifest"] = "manifest.json"
        manifest["outputs"]["manifest"] = "manifest.json"
        dump_json(manifest, self.root / "manifest.json")
        return manifest
