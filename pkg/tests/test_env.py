import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condsim import ConfigError, RangeError
from condsim.env import Edge, EnvSpec, LevelLaw, build_env

SPECS = [
    EnvSpec.constant(1.5),
    EnvSpec.static_iid([1.0, 2.0], [0.25, 0.75]),
    EnvSpec.onoff(1.0, 2.0, 0.1, 1.0),
    EnvSpec.homogeneous(LevelLaw("discrete", (0.5, 3.0), (0.5, 0.5)), 0.7),
    EnvSpec.static_heavy_inverse(2.0, 0.1),
    EnvSpec.homogeneous_heavy_upper(0.75),
]


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_spec_roundtrip(spec):
    assert EnvSpec.loads(spec.dumps()) == spec
    assert EnvSpec.from_dict(spec.to_dict()).spec_hash() == spec.spec_hash()


@given(st.lists(st.floats(0.05, 20.0), min_size=1, max_size=5), st.integers(0, 2 ** 63))
@settings(max_examples=40, deadline=None)
def test_static_roundtrip_and_rates_in_support(values, seed):
    spec = EnvSpec.static_iid(values)
    assert EnvSpec.loads(spec.dumps()) == spec
    env = build_env(spec, -5, 5, 0.0, 1.0, seed)
    for x in range(-5, 5):
        assert env.rate_at(x, 0.5) in spec.law.values


def test_compliance_flags():
    assert EnvSpec.static_iid([1.0, 2.0]).compliant
    assert EnvSpec.onoff(1, 1, 0.1, 1.0).compliant
    assert EnvSpec.static_heavy_inverse(2.0).failing_condition == "inverse-moment"
    assert EnvSpec.static_heavy_inverse(2.0, 0.1).compliant
    assert EnvSpec.homogeneous_heavy_upper(0.75).failing_condition == "moment"
    assert EnvSpec.homogeneous_heavy_upper(2.0).compliant
    with pytest.raises(ConfigError):
        EnvSpec.onoff(1, 1, 0.0, 1.0)
    assert EnvSpec.onoff(1, 1, 0.0, 1.0, out_of_theory=True).failing_condition == "positivity"


def test_declared_compliance_must_hold():
    d = EnvSpec.static_heavy_inverse(2.0).to_dict()
    d["assumption1_compliant"] = True
    with pytest.raises(ConfigError):
        EnvSpec.from_dict(d)


@pytest.mark.parametrize("bad", [
    {"kind": "nope"}, {"kind": "constant", "c": -1.0}, {"kind": "constant", "colour": 3},
    {"kind": "onoff", "rate_on": 0.0}, {"schema_version": 9, "kind": "constant"},
])
def test_invalid_specs_raise(bad):
    with pytest.raises(ConfigError):
        EnvSpec.from_dict(bad)


def test_integrated_rate_matches_track_sum():
    env = build_env(EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), -3, 3, 0.0, 20.0, 4)
    for e, tr in env.tracks.items():
        bp, v = tr.breakpoints, tr.values
        ref = float(np.sum(np.diff(bp) * v))
        assert env.integrated_rate(e, 0.0, 20.0) == pytest.approx(ref, rel=1e-12)
        # value_at agrees with rate_at at piece midpoints
        mids = 0.5 * (bp[:-1] + bp[1:])
        for m, val in zip(mids, v):
            assert env.rate_at(e, float(m)) == val


def test_onoff_time_fraction_high():
    spec = EnvSpec.onoff(1.0, 3.0, 0.1, 1.0)
    env = build_env(spec, 0, 40, 0.0, 500.0, 8)
    frac = np.mean([(env.integrated_rate(x, 0.0, 500.0) - 0.1 * 500) / (0.9 * 500) for x in range(40)])
    assert frac == pytest.approx(0.75, abs=0.02)


def test_field_does_not_depend_on_window():
    spec = EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)
    small = build_env(spec, -2, 2, 0.0, 5.0, 77)
    big = build_env(spec, -50, 50, -10.0, 50.0, 77)
    for x in range(-2, 2):
        for t in np.linspace(0, 5, 11):
            assert small.rate_at(x, t) == big.rate_at(x, t)


def test_shift_view_coordinates():
    env = build_env(EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), -20, 20, -5.0, 15.0, 3)
    view = env.shift(2.5, 4)
    for x, t in [(0, 0.0), (-3, 1.25), (5, 7.0)]:
        assert view.rate_at(x, t) == env.rate_at(x + 4, t + 2.5)


def test_range_errors():
    env = build_env(EnvSpec.constant(1.0), -2, 2, 0.0, 1.0, 0)
    with pytest.raises(RangeError):
        env.rate_at(5, 0.5)
    with pytest.raises(RangeError):
        env.rate_at(0, 2.0)
    assert Edge.between(3, 2) == Edge(2)


def test_level_law_moments():
    law = LevelLaw("discrete", (1.0, 2.0), (0.5, 0.5))
    assert law.mean() == 1.5
    assert law.mean_inverse() == 0.75
    assert math.isinf(LevelLaw("pareto", alpha=0.75).mean())
    assert math.isinf(LevelLaw("power", alpha=2.0, scale=0.0).mean_inverse())
    # E[1/(U^2 + 0.1)] = arctan(1/sqrt(0.1)) / sqrt(0.1)
    ref = math.atan(1 / math.sqrt(0.1)) / math.sqrt(0.1)
    assert LevelLaw("power", alpha=2.0, scale=0.1).mean_inverse() == pytest.approx(ref, rel=1e-6)


def test_window_dump_is_deterministic():
    spec = EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)
    a = build_env(spec, -3, 3, 0.0, 4.0, 5).dumps()
    b = build_env(spec, -3, 3, 0.0, 4.0, 5).dumps()
    assert a == b and a.startswith("# condsim-window v1")
