"""Report containers with deterministic JSON and CSV emission."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .stats import Estimate

REPORT_SCHEMA_VERSION = 1


def _plain(obj):
    """Recursively convert to JSON-safe builtins; non-finite floats become null."""
    if isinstance(obj, Estimate):
        return _plain(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return _plain(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(self.header) + "\n")
        for r in self.rows:
            out.write(",".join(_cell(v) for v in r) + "\n")
        return out.getvalue()


@dataclass
class DiagnosticsReport:
    kind: str
    config_hash: str
    seeds: dict
    sigma2_walk: dict = field(default_factory=dict)
    sigma2_dual: Optional[Estimate] = None
    theta_mean: Optional[Estimate] = None
    ks_table: list = field(default_factory=list)
    martingale_stats: dict = field(default_factory=dict)
    sublinearity_ratios: dict = field(default_factory=dict)
    r_beta_curve: list = field(default_factory=list)
    tightness_quantiles: list = field(default_factory=list)
    W_ref: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    stage_status: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.checks.values())

    @property
    def failed_checks(self) -> list:
        return sorted(k for k, v in self.checks.items() if not v)

    def to_dict(self) -> dict:
        return _plain({
            "schema_version": self.schema_version, "kind": self.kind,
            "config_hash": self.config_hash, "seeds": self.seeds,
            "sigma2_walk": self.sigma2_walk, "sigma2_dual": self.sigma2_dual,
            "theta_mean": self.theta_mean, "ks_table": self.ks_table,
            "martingale_stats": self.martingale_stats,
            "sublinearity_ratios": self.sublinearity_ratios, "r_beta_curve": self.r_beta_curve,
            "tightness_quantiles": self.tightness_quantiles, "W_ref": self.W_ref,
            "sections": self.sections, "checks": self.checks, "stage_status": self.stage_status,
            "tables": sorted(self.tables),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def write(self, out_dir, fmt: str = "json") -> list:
        """Write report.json (json) or one CSV per table (csv); returns the paths."""
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        if fmt == "json":
            p = d / "report.json"
            p.write_text(self.to_json())
            written.append(p)
        else:
            for name in sorted(self.tables):
                p = d / f"{name}.csv"
                p.write_text(self.tables[name].to_csv())
                written.append(p)
        return written
