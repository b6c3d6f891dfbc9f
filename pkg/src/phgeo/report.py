"""ExperimentReport: the serialised result of one verification experiment."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__

TIMING_FIELDS = ("wall_time",)


def _clean(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _restore_float(x):
    if isinstance(x, str) and x in ("nan", "inf", "-inf"):
        return float(x)
    return x


@dataclass
class Assertion:
    """One checked quantity: ``value <relation> tolerance``."""

    name: str
    value: float
    tolerance: float
    relation: str = "<"

    @property
    def passed(self) -> bool:
        v, t = _restore_float(self.value), self.tolerance
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return False
        return {"<": v < t, "<=": v <= t, ">": v > t, ">=": v >= t, "==": v == t}[self.relation]

    def to_dict(self):
        return {"name": self.name, "value": _clean(self.value), "tolerance": _clean(self.tolerance),
                "relation": self.relation, "passed": self.passed}


@dataclass
class ExperimentReport:
    experiment: str
    chart: str
    ledger_hash: str
    parameters: dict
    assertions: list = field(default_factory=list)
    seed: int = 0
    version: str = __version__
    wall_time: float = 0.0
    data: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.assertions) and all(a.passed for a in self.assertions)

    def check(self, name, value, tolerance, relation="<"):
        if isinstance(value, (np.bool_, bool, np.integer)):
            value = int(value)
        elif isinstance(value, (np.floating, float)):
            value = float(value)
        self.assertions.append(Assertion(name, value, float(tolerance), relation))
        return self

    def to_dict(self, timing=True):
        d = {
            "experiment": self.experiment,
            "chart": self.chart,
            "ledger_hash": self.ledger_hash,
            "parameters": _clean(self.parameters),
            "assertions": [a.to_dict() for a in self.assertions],
            "passed": self.passed,
            "seed": int(self.seed),
            "version": self.version,
            "data": _clean(self.data),
            "error": self.error,
        }
        if timing:
            d["wall_time"] = float(self.wall_time)
        return d

    def to_json(self, timing=True) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d) -> "ExperimentReport":
        rep = cls(
            experiment=d["experiment"],
            chart=d["chart"],
            ledger_hash=d["ledger_hash"],
            parameters=d["parameters"],
            seed=d.get("seed", 0),
            version=d.get("version", __version__),
            wall_time=d.get("wall_time", 0.0),
            data=d.get("data", {}),
            error=d.get("error"),
        )
        for a in d.get("assertions", []):
            rep.assertions.append(Assertion(a["name"], _restore_float(a["value"]), _restore_float(a["tolerance"]),
                                            a["relation"]))
        return rep

    @classmethod
    def from_json(cls, text) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "chart", "assertion", "value", "relation", "tolerance", "passed"])
        for a in self.assertions:
            w.writerow([self.experiment, self.chart, a.name, repr(a.value), a.relation, repr(a.tolerance), a.passed])
        return buf.getvalue()

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = ""
        if self.error:
            worst = f" error: {self.error}"
        else:
            bad = [a for a in self.assertions if not a.passed]
            if bad:
                worst = " failing: " + ", ".join(f"{a.name}={a.value!r} (need {a.relation} {a.tolerance:g})" for a in bad[:3])
        return f"[{status}] {self.experiment} on {self.chart}{worst}"


def dump_reports(reports, timing=True) -> str:
    """Deterministic JSON for a list of reports (sorted keys, fixed order)."""
    return json.dumps({"version": __version__, "reports": [r.to_dict(timing) for r in reports],
                       "passed": all(r.passed for r in reports)}, sort_keys=True, indent=2)


def load_reports(text):
    d = json.loads(text)
    return [ExperimentReport.from_dict(r) for r in d["reports"]]


def table_csv(rows, columns=None) -> str:
    """CSV for a list of dict rows (column order from the first row unless given)."""
    rows = list(rows)
    if not rows:
        return ""
    columns = columns or list(rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(v):
    v = _clean(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    return "" if v is None else str(v)


__all__ = ["Assertion", "ExperimentReport", "dump_reports", "load_reports", "table_csv", "TIMING_FIELDS"]
