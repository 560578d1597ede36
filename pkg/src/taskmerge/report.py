"""Writes grid results to disk.

Layout under the output directory::

    results.json            every cell, source model, conditioning run and reference
    table1.csv              seed-mean accuracy per (method, arm) x scenario
    history/<run>.csv       conditioning curves
    reliability/<cell>.csv  pooled reliability bins per cell

Table cells read ``"abs (norm)"``: absolute accuracy and normalized accuracy
(per-task ratio to the individual model, then averaged), both in percent with
two decimals.  Rows whose arm has no passing cell are left out; the columns
are always the four scenarios.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .distac import DistacStep, write_distac_history
from .errors import DomainError, TaskMergeError
from .merging import METHODS
from .metrics import ReliabilityBin, ReliabilityReport

TABLE_SCENARIOS = ("original", "norm_mismatch", "low_confidence", "combined")
TABLE_ARMS = ("raw", "distac", "kappa_only")
TABLE_HEADER = ("method", "arm") + TABLE_SCENARIOS


class ReportError(TaskMergeError, OSError):
    pass


def _as_dict(results) -> dict:
    d = results.to_dict() if hasattr(results, "to_dict") else results
    if not isinstance(d, dict) or not d.get("cells"):
        raise DomainError("results are empty")
    return d


def _cell_text(acc: float, norm: float) -> str:
    return f"{100 * acc:.2f} ({100 * norm:.2f})"


def table1_rows(results) -> list[tuple[str, ...]]:
    d = _as_dict(results)
    cells = d["cells"]
    rows = []

    def mean_of(scenario, method, arm):
        sel = [c["aggregate"] for c in cells
               if (c["scenario"], c["method"], c["arm"]) == (scenario, method, arm)
               and c["status"] == "pass"]
        if not sel:
            return None
        return (float(np.mean([a["accuracy"] for a in sel])),
                float(np.mean([a["normalized_accuracy"] for a in sel])))

    # reference rows: scenario-independent ones repeat across present columns
    present = [any(c["scenario"] == s for c in cells) for s in TABLE_SCENARIOS]

    def spread(value):
        return tuple(f"{100 * value:.2f}" if on else "" for on in present)

    refs = d.get("references", [])
    zs = [np.mean(r["zero_shot"]) for r in refs if r.get("zero_shot")]
    if zs:
        rows.append(("zero_shot", "reference", *spread(float(np.mean(zs)))))
    individual = []
    for scenario in TABLE_SCENARIOS:
        per_seed = {}
        for c in cells:
            if c["scenario"] == scenario and c["arm"] == "raw" and c["status"] == "pass":
                per_seed.setdefault(c["seed"], float(np.mean(
                    [np.mean([p["individual_accuracy"] for p in run["per_task"]]) for run in c["runs"]])))
        vals = list(per_seed.values())
        individual.append(_cell_text(float(np.mean(vals)), 1.0) if vals else "")
    if any(individual):
        rows.append(("individual", "reference", *individual))
    mtl = [np.mean(r["mtl"]) for r in refs if r.get("mtl")]
    if mtl:
        rows.append(("mtl", "reference", *spread(float(np.mean(mtl)))))

    methods = [m for m in METHODS if any(c["method"] == m for c in cells)]
    for arm in TABLE_ARMS:
        for method in methods:
            vals = [mean_of(s, method, arm) for s in TABLE_SCENARIOS]
            if all(v is None for v in vals):
                continue
            rows.append((method, arm, *("" if v is None else _cell_text(*v) for v in vals)))
    return rows


def _table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for row in table1_rows(results):
        w.writerow(row)
    return buf.getvalue()


def results_json(results) -> str:
    return json.dumps(_as_dict(results), sort_keys=True, indent=1, allow_nan=True) + "\n"


def report_emit(results, out_dir) -> list[Path]:
    """Write the full report; returns the written paths in a fixed order."""
    d = _as_dict(results)
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        p = out / "results.json"
        p.write_text(results_json(d))
        written.append(p)
        p = out / "table1.csv"
        p.write_text(_table_csv(d))
        written.append(p)
        for name, rows in sorted(d.get("histories", {}).items()):
            p = out / "history" / f"{name}.csv"
            write_distac_history([DistacStep(**r) for r in rows], p)
            written.append(p)
        for c in d["cells"]:
            if c["status"] != "pass" or "reliability" not in c:
                continue
            rel = c["reliability"]
            rep = ReliabilityReport([ReliabilityBin(**b) for b in rel["bins"]], rel["ece"])
            p = out / "reliability" / f"seed{c['seed']}_{c['scenario']}_{c['method']}_{c['arm']}.csv"
            rep.write_csv(p)
            written.append(p)
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from exc
    return written


def load_results(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
