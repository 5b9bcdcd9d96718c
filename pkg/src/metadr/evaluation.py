"""Accuracy matrices, cross-seed aggregation, and report emission.

The JSON report schema is versioned as "metadr-report/1". Domain and stage
names are restricted to [A-Za-z0-9_-] so the CSV dialect needs no quoting.
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import __version__ as _version

__all__ = [
    "AccuracyMatrix",
    "RunReport",
    "evaluate",
    "forgetting",
    "aggregate",
    "emit",
    "parse_report",
]

_NAME_RE = re.compile(r"^[A-Za-z0-9_-]+$")
SCHEMA = "metadr-report/1"


def evaluate(model, test_ds) -> float:
    """Fraction of argmax-correct predictions on a test split. Logit ties
    resolve to the lowest class index."""
    if len(test_ds) == 0:
        raise ValueError("evaluate: empty test set")
    pred = model.predict(test_ds.images.astype(np.float32))
    return float((pred == test_ds.labels).mean())


@dataclass
class AccuracyMatrix:
    """R[i][j]: accuracy on the test set of domain j after finishing
    training stage i."""

    domains: list
    rows: list = field(default_factory=list)  # list of list[float]

    def add_row(self, accs):
        accs = [float(a) for a in accs]
        if len(accs) != len(self.domains):
            raise ValueError("accuracy row length mismatch")
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError("accuracy entries must lie in [0, 1]")
        self.rows.append(accs)

    @property
    def final_row(self) -> list:
        return list(self.rows[-1])

    def to_dict(self):
        return {"domains": list(self.domains), "rows": [list(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d):
        m = cls(domains=list(d["domains"]))
        for r in d["rows"]:
            m.add_row(r)
        return m


def forgetting(matrix: AccuracyMatrix) -> dict:
    """Per-domain accuracy drop: R[j][j] minus the final-row entry, for
    every domain except the last."""
    out = {}
    last = len(matrix.rows) - 1
    for j, name in enumerate(matrix.domains):
        if j >= last:
            break
        out[name] = matrix.rows[j][j] - matrix.rows[last][j]
    return out


@dataclass
class RunReport:
    config: dict
    matrix: AccuracyMatrix
    seed: int
    train_logs: list = field(default_factory=list)
    version: str = _version

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "matrix": self.matrix.to_dict(),
            "final_accuracies": dict(zip(self.matrix.domains, self.matrix.final_row)),
            "forgetting": forgetting(self.matrix),
            "train_logs": self.train_logs,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unknown report schema: {d.get('schema')!r}")
        return cls(
            config=d["config"],
            matrix=AccuracyMatrix.from_dict(d["matrix"]),
            seed=d["seed"],
            train_logs=d.get("train_logs", []),
            version=d.get("version", _version),
        )


def _config_key(cfg: dict) -> str:
    cfg = {k: v for k, v in cfg.items() if k != "seed"}
    return json.dumps(cfg, sort_keys=True)


def aggregate(reports) -> dict:
    """Per-cell mean and population std across seeds. All reports must
    share an identical config apart from the seed."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate: no reports")
    keys = {_config_key(r.config) for r in reports}
    if len(keys) != 1:
        raise ValueError("aggregate: reports have mismatched configs")
    domains = reports[0].matrix.domains
    stack = np.array([r.matrix.rows for r in reports])  # (seeds, stages, domains)
    return {
        "schema": SCHEMA + "/aggregate",
        "config": {k: v for k, v in reports[0].config.items() if k != "seed"},
        "seeds": [r.seed for r in reports],
        "domains": list(domains),
        "mean": stack.mean(axis=0).tolist(),
        "std": stack.std(axis=0).tolist(),  # population std over n seeds
        "final_mean": dict(zip(domains, stack.mean(axis=0)[-1].tolist())),
        "final_std": dict(zip(domains, stack.std(axis=0)[-1].tolist())),
    }


# ---------------------------------------------------------------------------
# emission


def _as_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def _as_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write("stage," + ",".join(report.matrix.domains) + "\n")
    for i, row in enumerate(report.matrix.rows):
        buf.write(f"after_{report.matrix.domains[i]}," + ",".join(f"{a:.6f}" for a in row) + "\n")
    return buf.getvalue()


def _as_table(report: RunReport) -> str:
    domains = report.matrix.domains
    width = max(16, max(len(d) for d in domains) + 2)
    head = "stage".ljust(width) + "".join(d.rjust(width) for d in domains)
    lines = [head, "-" * len(head)]
    for i, row in enumerate(report.matrix.rows):
        lines.append(
            f"after {domains[i]}".ljust(width)
            + "".join(f"{100 * a:.1f}".rjust(width) for a in row)
        )
    return "\n".join(lines) + "\n"


def emit(report: RunReport, fmt: str, path) -> None:
    """Write a report in json, csv, or table format with stable ordering:
    identical reports produce byte-identical files."""
    for name in report.matrix.domains:
        if not _NAME_RE.match(name):
            raise ValueError(f"domain name not CSV-safe: {name!r}")
    renderers = {"json": _as_json, "csv": _as_csv, "table": _as_table}
    if fmt not in renderers:
        raise ValueError(f"unknown report format: {fmt!r}")
    with open(path, "w") as f:
        f.write(renderers[fmt](report))


def parse_report(path) -> RunReport:
    with open(path) as f:
        return RunReport.from_dict(json.load(f))
