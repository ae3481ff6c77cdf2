import math

import numpy as np
import pytest
from scipy.special import ive

from condsim import ConfigError
from condsim.env import EnvSpec, build_env
from condsim.kernel import (WindowSpec, chi_eps_truncated, identity_suite, kernel_n, kernel_value,
                            gradient_identity_residual, phi_eps, phi_eps_field, shift_covariance_check,
                            solve_kernel, tail_horizon, weighted_l2_check)

from oracles import dual_law


@pytest.mark.parametrize("c,s", [(0.5, 1.0), (1.0, 1.0), (0.3, 4.0)])
def test_constant_kernel_is_bessel(c, s):
    env = build_env(EnvSpec.constant(c), -60, 60, -1.0, s + 1.0, 0)
    for y in (0, 1, 3):
        ref = ive(y, 2 * c * s)          # e^{-2cs} I_y(2cs)
        assert kernel_value(env, s, 0, 0.0, y, radius=40) == pytest.approx(ref, abs=1e-12)


def test_half_rate_value_frozen():
    env = build_env(EnvSpec.constant(0.5), -40, 40, -1.0, 2.0, 0)
    assert kernel_value(env, 1.0, 0, 0.0, 0, radius=30) == pytest.approx(0.46575960759364043, abs=1e-12)


@pytest.mark.parametrize("name", ["static", "onoff"])
def test_kernel_matches_matrix_exponential(windows, name):
    env = windows[name]
    s, t = 3.0, 0.5
    view = env.shift(s, 0)
    p = dual_law(view, 0, s - t, -25, 25)
    for y in (-2, 0, 1, 4):
        assert kernel_value(env, s, 0, t, y, radius=22) == pytest.approx(p[y + 25], abs=1e-9)


@pytest.mark.parametrize("name", ["constant", "static", "onoff"])
def test_identity_suite(windows, name):
    r = identity_suite(windows[name], n_probes=8, seed=1, span=2.0, radius=20)
    assert r["row_sum_vs_deficit"] < 1e-10
    assert r["row_sum_excess"] < 1e-12
    assert r["min_entry"] > -1e-14
    for k in ("forward_backward", "chapman_kolmogorov", "monotone_n", "shift_covariance"):
        assert r[k] < 1e-8, k
    assert r["k1_closed_form"] < 1e-10


def test_grid_shapes_and_errors(windows):
    env = windows["onoff"]
    g = solve_kernel(env, source=(2.0, 0), interval=(0.0, 2.0), window=WindowSpec(radius=15, center=0))
    assert g.values.shape == (len(g.times), 31)
    assert np.all(g.row_sums <= 1 + 1e-12)
    assert "time,vertex,value" in g.to_csv().splitlines()[0]
    with pytest.raises(ConfigError):
        solve_kernel(env, source=(2.0, 0), interval=(0.0, 50.0), window=WindowSpec(radius=5))
    with pytest.raises(ConfigError):
        WindowSpec(radius=0)
    with pytest.raises(ConfigError):
        WindowSpec(radius=3, boundary="reflecting")


def test_jump_truncation_increases_to_full_kernel(windows):
    env = windows["static"]
    full = solve_kernel(env, source=(1.0, 0), interval=(0.0, 1.0), window=WindowSpec(radius=20, center=0))
    prev = np.zeros(41)
    for n in (0, 1, 2, 4, 8, 40):
        g = kernel_n(env, source=(1.0, 0), interval=(0.0, 1.0), window=WindowSpec(radius=20, center=0), n=n)
        row = g.row(0.0)
        assert np.all(row >= prev - 1e-15)
        prev = row
    assert np.max(np.abs(prev - full.row(0.0))) < 1e-12


def test_shift_covariance(windows):
    probes = [(2.0, 0, 0.5, 1), (3.0, -2, 1.0, 0)]
    assert shift_covariance_check(windows["onoff"], probes, (0.75, 3), radius=15) < 1e-12


def test_phi_eps_is_one_on_constant():
    env = build_env(EnvSpec.constant(0.7), -400, 400, -1.0, 200.0, 0)
    rec = phi_eps(env, 0.1, shifts=[(0.0, 0), (3.0, 5)], tail_tol=1e-8)
    assert np.allclose(rec.values, 1.0, atol=2e-8)


def test_phi_eps_approaches_static_closed_form():
    spec = EnvSpec.static_iid([1.0, 2.0])
    c_h = 1.0 / spec.mean_inverse_rate()
    errs = []
    for eps in (0.1, 0.01):
        T = tail_horizon(eps, 1e-6)
        env = build_env(spec, -700, 700, -1.0, T + 1.0, 4)
        v, _, _ = phi_eps_field(env, eps, [0.0], -3, 3, tail_tol=1e-6)
        exact = np.array([c_h / env.rate_at(x, 0.0) for x in range(-3, 4)])
        errs.append(np.max(np.abs(v[0] - exact)))
    assert errs[1] < errs[0]
    assert errs[1] < 0.12


def test_phi_eps_by_jump_count_is_monotone(windows):
    env = build_env(EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), -30, 30, -1.0, 100.0, 2)
    rec = phi_eps(env, 0.5, n_jumps=6, tail_tol=1e-8)
    by_n = rec.by_n[0]
    assert np.all(np.diff(by_n) >= -1e-15)
    assert np.all(rec.values > 0)


def test_chi_eps_vanishes_on_constant_and_respects_bound():
    env = build_env(EnvSpec.constant(1.0), -30, 30, -1.0, 400.0, 0)
    rec = chi_eps_truncated(env, 0.1, 4)
    assert abs(rec.values[0]) < 1e-12
    env2 = build_env(EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), -30, 30, -1.0, 400.0, 5)
    rec2 = chi_eps_truncated(env2, 0.1, 4)
    assert abs(rec2.values[0]) <= rec2.bounds[0]


def test_truncated_identity_needs_diagonal_correction():
    # On a constant field chi_{eps,n} is zero while phi_{eps,n+1} < 1, so the
    # uncorrected finite-n gradient identity cannot hold; the corrected one does.
    for spec, seed in ((EnvSpec.constant(1.0), 0), (EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), 3)):
        env = build_env(spec, -30, 30, -1.0, 600.0, seed)
        stated, corrected = gradient_identity_residual(env, 0.1, 3)
        assert corrected < 1e-8
        assert stated > 1e-2


def test_weighted_l2_on_static():
    r = weighted_l2_check(EnvSpec.static_iid([1.0, 2.0]), 0.1, 2, seed=1, n_sites=60)
    assert r.holds
    assert r.e_b == pytest.approx(1.5, abs=0.2)
    assert set(r.to_dict()) >= {"e_b_phi2", "holds"}


def test_tail_horizon_validation():
    assert tail_horizon(0.1, math.exp(-2)) == pytest.approx(20.0)
    with pytest.raises(ConfigError):
        tail_horizon(0.0, 1e-8)
    with pytest.raises(ConfigError):
        tail_horizon(0.1, 2.0)
