"""Dynamical conductance fields on Z: laws, realized windows, shifts.

A field is described by an :class:`EnvSpec` and a 64-bit seed.  All values
are computed procedurally from counter-based hashes, so an
:class:`EnvironmentWindow` is a cheap view (bounds + seed + shift offset) and
its per-edge :class:`RateTrack` lists are materialized only on demand.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict, replace
from functools import cached_property
from typing import Iterable, Optional, Union

import numpy as np
import yaml
from scipy import integrate

from . import _envcore as core
from ._rng import derive, TAG_STATIC, TAG_CELL
from .errors import ConfigError, RangeError

SCHEMA_VERSION = 1

KINDS = (
    "constant",
    "static_iid",
    "onoff",
    "homogeneous",
    "static_heavy_inverse",
    "homogeneous_heavy_upper",
)


@dataclass(frozen=True)
class Edge:
    """Nearest-neighbour edge {x, x+1}, identified by its left vertex."""

    left_vertex: int

    @classmethod
    def between(cls, x: int, y: int) -> "Edge":
        if abs(x - y) != 1:
            raise ConfigError(f"vertices {x} and {y} are not neighbours")
        return cls(min(x, y))


def _edge_index(edge: Union[Edge, int]) -> int:
    return edge.left_vertex if isinstance(edge, Edge) else int(edge)


@dataclass(frozen=True)
class LevelLaw:
    """Marginal law of a conductance level.

    family "discrete": ``values`` with probabilities ``weights``;
    family "pareto": P(level > u) = (scale/u)^alpha for u >= scale;
    family "power": level = U**alpha + scale with U uniform on (0, 1).
    """

    family: str = "discrete"
    values: tuple = ()
    weights: tuple = ()
    alpha: float = 1.0
    scale: float = 1.0

    def validate(self, allow_zero: bool = False) -> None:
        if self.family == "discrete":
            if len(self.values) == 0 or len(self.values) != len(self.weights):
                raise ConfigError("discrete law needs matching values and weights")
            w = np.asarray(self.weights, float)
            v = np.asarray(self.values, float)
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
                raise ConfigError("law weights must be nonnegative and sum to 1")
            if np.any(~np.isfinite(v)) or np.any(v < 0) or (not allow_zero and np.any(v == 0)):
                raise ConfigError("law values must be positive and finite")
        elif self.family == "pareto":
            if not (self.alpha > 0 and self.scale > 0):
                raise ConfigError("pareto law needs alpha > 0 and scale > 0")
        elif self.family == "power":
            if not (self.alpha > 0 and self.scale >= 0):
                raise ConfigError("power law needs exponent > 0 and floor >= 0")
        else:
            raise ConfigError(f"unknown law family {self.family!r}")

    @property
    def code(self) -> int:
        return {"discrete": core.LAW_DISCRETE, "pareto": core.LAW_PARETO, "power": core.LAW_POWER}[self.family]

    def mean(self) -> float:
        if self.family == "discrete":
            return float(np.dot(self.values, self.weights))
        if self.family == "pareto":
            return math.inf if self.alpha <= 1 else self.alpha * self.scale / (self.alpha - 1)
        return 1.0 / (self.alpha + 1.0) + self.scale

    def mean_inverse(self) -> float:
        if self.family == "discrete":
            v = np.asarray(self.values, float)
            if np.any(v == 0):
                return math.inf
            return float(np.dot(1.0 / v, self.weights))
        if self.family == "pareto":
            return self.alpha / ((self.alpha + 1.0) * self.scale)
        if self.scale == 0:
            return math.inf if self.alpha >= 1 else 1.0 / (1.0 - self.alpha)
        val, _ = integrate.quad(lambda u: 1.0 / (u ** self.alpha + self.scale), 0.0, 1.0, limit=200)
        return float(val)

    def upper_bound(self) -> float:
        if self.family == "discrete":
            return float(max(self.values))
        if self.family == "pareto":
            return math.inf
        return 1.0 + self.scale

    def arrays(self):
        if self.family == "discrete":
            v = np.asarray(self.values, dtype=np.float64)
            cum = np.cumsum(np.asarray(self.weights, dtype=np.float64))
            return v, cum[:-1].copy()
        return np.zeros(1), np.zeros(0)


@dataclass(frozen=True)
class EnvSpec:
    """Law of a conductance field.

    Build instances with the classmethod constructors.  For the ON/OFF kind,
    ``rate_on`` is the rate at which an edge leaves the high (ON) state and
    ``rate_off`` the rate at which it leaves the low (OFF) state, so the
    long-run fraction of time spent high is rate_off / (rate_on + rate_off).
    """

    kind: str
    c: float = 1.0
    law: Optional[LevelLaw] = None
    rate_on: float = 1.0
    rate_off: float = 1.0
    low_value: float = 0.1
    high_value: float = 1.0
    switch_rate: float = 1.0
    exponent: float = 2.0
    floor: float = 0.0
    pareto_alpha: float = 0.75
    pareto_scale: float = 1.0
    out_of_theory: bool = False
    assumption1_compliant: Optional[bool] = None

    # constructors -----------------------------------------------------
    @classmethod
    def constant(cls, c: float) -> "EnvSpec":
        return cls(kind="constant", c=float(c)).validated()

    @classmethod
    def static_iid(cls, values: Iterable[float], weights: Optional[Iterable[float]] = None) -> "EnvSpec":
        values = tuple(float(v) for v in values)
        if weights is None:
            weights = tuple(1.0 / len(values) for _ in values)
        law = LevelLaw("discrete", values, tuple(float(w) for w in weights))
        return cls(kind="static_iid", law=law).validated()

    @classmethod
    def onoff(cls, rate_on: float, rate_off: float, low_value: float, high_value: float,
              out_of_theory: bool = False) -> "EnvSpec":
        return cls(kind="onoff", rate_on=float(rate_on), rate_off=float(rate_off),
                   low_value=float(low_value), high_value=float(high_value),
                   out_of_theory=out_of_theory).validated()

    @classmethod
    def homogeneous(cls, law: LevelLaw, switch_rate: float) -> "EnvSpec":
        return cls(kind="homogeneous", law=law, switch_rate=float(switch_rate)).validated()

    @classmethod
    def static_heavy_inverse(cls, exponent: float, floor: float = 0.0) -> "EnvSpec":
        return cls(kind="static_heavy_inverse", exponent=float(exponent), floor=float(floor)).validated()

    @classmethod
    def homogeneous_heavy_upper(cls, pareto_alpha: float, switch_rate: float = 1.0,
                                pareto_scale: float = 1.0) -> "EnvSpec":
        return cls(kind="homogeneous_heavy_upper", pareto_alpha=float(pareto_alpha),
                   switch_rate=float(switch_rate), pareto_scale=float(pareto_scale)).validated()

    # derived properties ---------------------------------------------
    @property
    def level_law(self) -> LevelLaw:
        k = self.kind
        if k == "constant":
            return LevelLaw("discrete", (self.c,), (1.0,))
        if k in ("static_iid", "homogeneous"):
            return self.law
        if k == "onoff":
            p_high = self.rate_off / (self.rate_on + self.rate_off)
            return LevelLaw("discrete", (self.low_value, self.high_value), (1.0 - p_high, p_high))
        if k == "static_heavy_inverse":
            return LevelLaw("power", alpha=self.exponent, scale=self.floor)
        return LevelLaw("pareto", alpha=self.pareto_alpha, scale=self.pareto_scale)

    @property
    def is_dynamic(self) -> bool:
        return self.kind in ("onoff", "homogeneous", "homogeneous_heavy_upper")

    @property
    def is_spatially_homogeneous(self) -> bool:
        return self.kind in ("constant", "homogeneous", "homogeneous_heavy_upper")

    @property
    def refresh_rate(self) -> float:
        if self.kind == "onoff":
            return self.rate_on + self.rate_off
        if self.is_dynamic:
            return self.switch_rate
        return 0.0

    @property
    def cell_length(self) -> float:
        nu = self.refresh_rate
        return 4.0 / nu if nu > 0 else 1.0

    def mean_rate(self) -> float:
        return self.level_law.mean()

    def mean_inverse_rate(self) -> float:
        return self.level_law.mean_inverse()

    def rate_bound(self) -> float:
        return self.level_law.upper_bound()

    @property
    def failing_condition(self) -> Optional[str]:
        """Which moment/positivity requirement fails, or None."""
        law = self.level_law
        if self.kind == "onoff" and self.low_value == 0:
            return "positivity"
        if not math.isfinite(law.mean_inverse()):
            return "inverse-moment"
        if not math.isfinite(law.mean()):
            return "moment"
        return None

    @property
    def compliant(self) -> bool:
        return self.failing_condition is None

    def validated(self) -> "EnvSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown environment kind {self.kind!r}")
        if self.kind == "constant" and not (self.c > 0 and math.isfinite(self.c)):
            raise ConfigError("constant rate must be positive and finite")
        if self.kind in ("static_iid", "homogeneous"):
            if self.law is None:
                raise ConfigError(f"{self.kind} needs a level law")
            self.law.validate()
        if self.kind == "onoff":
            if not (self.rate_on > 0 and self.rate_off > 0):
                raise ConfigError("switching rates must be positive")
            if not (self.high_value > 0 and self.low_value >= 0):
                raise ConfigError("ON/OFF levels must be nonnegative with high > 0")
            if self.low_value == 0 and not self.out_of_theory:
                raise ConfigError("a zero OFF level requires out_of_theory=true")
        if self.is_dynamic and not self.refresh_rate > 0:
            raise ConfigError("switch rate must be positive")
        if self.kind == "static_heavy_inverse":
            self.level_law.validate()
        if self.kind == "homogeneous_heavy_upper":
            self.level_law.validate()
        if self.assumption1_compliant is True and not self.compliant:
            raise ConfigError(
                f"{self.kind} violates the {self.failing_condition} condition "
                "but was declared assumption1_compliant")
        return self

    def require_compliant(self, what: str = "this computation") -> None:
        if not self.compliant:
            raise ConfigError(f"{what} needs a compliant environment; "
                              f"{self.kind} fails the {self.failing_condition} condition")

    # compiled form ------------------------------------------------------
    def core(self, seed: int):
        law = self.level_law
        lvals, lcum = law.arrays()
        return (
            np.int64(1 if self.is_dynamic else 0),
            np.int64(1 if self.is_spatially_homogeneous else 0),
            np.int64(law.code),
            np.uint64(derive(seed, TAG_STATIC)),
            np.uint64(derive(seed, TAG_CELL)),
            float(self.refresh_rate) if self.is_dynamic else 1.0,
            float(self.cell_length),
            float(law.alpha),
            float(law.scale),
            lvals,
            lcum,
        )

    # serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "kind": self.kind}
        k = self.kind
        if k == "constant":
            d["c"] = self.c
        elif k in ("static_iid", "homogeneous"):
            d["law"] = {key: (list(v) if isinstance(v, tuple) else v) for key, v in asdict(self.law).items()}
            if k == "homogeneous":
                d["switch_rate"] = self.switch_rate
        elif k == "onoff":
            d.update(rate_on=self.rate_on, rate_off=self.rate_off,
                     low_value=self.low_value, high_value=self.high_value)
        elif k == "static_heavy_inverse":
            d.update(exponent=self.exponent, floor=self.floor)
        else:
            d.update(pareto_alpha=self.pareto_alpha, pareto_scale=self.pareto_scale,
                     switch_rate=self.switch_rate)
        d["out_of_theory"] = self.out_of_theory
        d["assumption1_compliant"] = self.compliant
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        d = dict(d)
        ver = d.pop("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"unsupported environment schema_version {ver}")
        if "kind" not in d:
            raise ConfigError("environment document lacks 'kind'")
        law = d.pop("law", None)
        if law is not None:
            law = dict(law)
            law["values"] = tuple(float(v) for v in law.get("values", ()))
            law["weights"] = tuple(float(v) for v in law.get("weights", ()))
            law = LevelLaw(**law)
        declared = d.pop("assumption1_compliant", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown environment keys: {sorted(unknown)}")
        try:
            spec = cls(law=law, assumption1_compliant=declared, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        spec = spec.validated()
        if declared is not None and bool(declared) == spec.compliant:
            # the flag is derived; keep documents and constructed specs equal
            spec = replace(spec, assumption1_compliant=None)
        return spec

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "EnvSpec":
        return cls.from_dict(yaml.safe_load(text))

    def spec_hash(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RateTrack:
    """Piecewise-constant rate of one edge; ``values[i]`` holds on [bp[i], bp[i+1])."""

    edge: Edge
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != len(self.breakpoints) - 1:
            raise ConfigError("values must have one entry per interval")

    def value_at(self, t: float) -> float:
        bp = self.breakpoints
        if not (bp[0] <= t <= bp[-1]):
            raise RangeError(f"time {t} outside [{bp[0]}, {bp[-1]}]")
        i = int(np.searchsorted(bp, t, side="right")) - 1
        return float(self.values[min(i, len(self.values) - 1)])

    def integral(self, t0: float, t1: float) -> float:
        bp = self.breakpoints
        if t1 < t0 or t0 < bp[0] or t1 > bp[-1]:
            raise RangeError(f"bad interval [{t0}, {t1}]")
        lo = np.clip(bp[:-1], t0, t1)
        hi = np.clip(bp[1:], t0, t1)
        return float(np.sum(self.values * (hi - lo)))


@dataclass(frozen=True, eq=False)
class EnvironmentWindow:
    """A realized field restricted to vertices [x_min, x_max] and times [t_min, t_max].

    Coordinates are those of the (possibly shifted) view; ``shift_offset``
    (s, y) maps view coordinates (t, x) to base coordinates (t + s, x + y).
    """

    spec: EnvSpec
    x_min: int
    x_max: int
    t_min: float
    t_max: float
    base_seed: int
    shift_offset: tuple = (0.0, 0)

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ConfigError("empty spatial window")
        if not self.t_min < self.t_max:
            raise ConfigError("empty time window")

    @cached_property
    def core(self):
        return self.spec.core(self.base_seed)

    @cached_property
    def _bufs(self):
        return np.empty(core.BUF), np.empty(core.BUF)

    def _check(self, x: int, t: float) -> None:
        if not (self.x_min <= x <= self.x_max - 1):
            raise RangeError(f"edge {x} outside window [{self.x_min}, {self.x_max - 1}]")
        if not (self.t_min <= t <= self.t_max):
            raise RangeError(f"time {t} outside [{self.t_min}, {self.t_max}]")

    def rate_at(self, edge: Union[Edge, int], t: float) -> float:
        x = _edge_index(edge)
        self._check(x, t)
        bt, bx = self.to_base(t, x)
        bt_, bu = self._bufs
        return float(core.rate_at_core(self.core, bx, bt, bt_, bu))

    def integrated_rate(self, edge: Union[Edge, int], t0: float, t1: float) -> float:
        x = _edge_index(edge)
        if t1 < t0:
            raise RangeError("reversed interval")
        self._check(x, t0)
        self._check(x, t1)
        s, y = self.shift_offset
        bt_, bu = self._bufs
        return float(core.integrate_core(self.core, x + y, t0 + s, t1 + s, bt_, bu))

    def to_base(self, t: float, x: int):
        s, y = self.shift_offset
        return t + s, x + y

    @property
    def edges(self) -> range:
        return range(self.x_min, self.x_max)

    def covers(self, x_lo: int, x_hi: int, t_lo: float, t_hi: float) -> bool:
        return self.x_min <= x_lo and x_hi <= self.x_max and self.t_min <= t_lo and t_hi <= self.t_max

    def shift(self, s: float, y: int) -> "EnvironmentWindow":
        s0, y0 = self.shift_offset
        return EnvironmentWindow(self.spec, self.x_min - y, self.x_max - y, self.t_min - s,
                                 self.t_max - s, self.base_seed, (s0 + s, y0 + int(y)))

    def extended(self, x_min: Optional[int] = None, x_max: Optional[int] = None,
                 t_min: Optional[float] = None, t_max: Optional[float] = None) -> "EnvironmentWindow":
        """Window on the union of the current bounds and the requested ones."""
        return EnvironmentWindow(
            self.spec,
            min(self.x_min, self.x_min if x_min is None else x_min),
            max(self.x_max, self.x_max if x_max is None else x_max),
            min(self.t_min, self.t_min if t_min is None else t_min),
            max(self.t_max, self.t_max if t_max is None else t_max),
            self.base_seed, self.shift_offset)

    def csr(self, x_lo: Optional[int] = None, x_hi: Optional[int] = None):
        """(ptr, starts, values) in base time for edges x_lo..x_hi (view labels)."""
        x_lo = self.x_min if x_lo is None else x_lo
        x_hi = self.x_max - 1 if x_hi is None else x_hi
        s, y = self.shift_offset
        span = self.t_max - self.t_min
        cap = int((x_hi - x_lo + 1) * (2.0 * self.spec.refresh_rate * span + 8)) + 64
        while True:
            ptr, st, va, ok = core.materialize(self.core, x_lo + y, x_hi + y, self.t_min + s,
                                               self.t_max + s, cap)
            if ok:
                return ptr, st, va
            cap *= 2

    @cached_property
    def tracks(self) -> dict:
        ptr, st, va = self.csr()
        s, _ = self.shift_offset
        out = {}
        for k, x in enumerate(self.edges):
            bp = np.append(st[ptr[k]:ptr[k + 1]] - s, self.t_max)
            bp[0] = self.t_min
            out[Edge(x)] = RateTrack(Edge(x), bp, va[ptr[k]:ptr[k + 1]].copy())
        return out

    def dumps(self) -> str:
        """Portable text dump: header, then one line per edge."""
        lines = [
            "# condsim-window v1",
            f"# spec_hash {self.spec.spec_hash()}",
            f"# seed {self.base_seed}",
            f"# shift {self.shift_offset[0]!r} {self.shift_offset[1]}",
            f"# bounds {self.x_min} {self.x_max} {self.t_min!r} {self.t_max!r}",
        ]
        for e, tr in self.tracks.items():
            bp = ",".join(repr(float(b)) for b in tr.breakpoints)
            vs = ",".join(repr(float(v)) for v in tr.values)
            lines.append(f"{e.left_vertex}\t{bp}\t{vs}")
        return "\n".join(lines) + "\n"


def parse_window_dump(text: str) -> dict:
    """Inverse of :meth:`EnvironmentWindow.dumps` (header fields + tracks)."""
    header, tracks = {}, {}
    for line in text.splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            header[parts[0]] = parts[1:]
        elif line.strip():
            e, bp, vs = line.split("\t")
            tracks[int(e)] = RateTrack(Edge(int(e)), np.array([float(v) for v in bp.split(",")]),
                                       np.array([float(v) for v in vs.split(",")]))
    return {"header": header, "tracks": tracks}


def build_env(spec: EnvSpec, x_min: int, x_max: int, t_min: float, t_max: float,
              base_seed: int) -> EnvironmentWindow:
    spec.validated()
    return EnvironmentWindow(spec, int(x_min), int(x_max), float(t_min), float(t_max),
                             int(base_seed) & 0xFFFFFFFFFFFFFFFF)


def rate_at(env: EnvironmentWindow, edge: Union[Edge, int], t: float) -> float:
    return env.rate_at(edge, t)


def integrated_rate(env: EnvironmentWindow, edge: Union[Edge, int], t0: float, t1: float) -> float:
    return env.integrated_rate(edge, t0, t1)


def shift_view(env: EnvironmentWindow, s: float, y: int) -> EnvironmentWindow:
    return env.shift(s, y)
