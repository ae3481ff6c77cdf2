import numpy as np
import pytest

from condsim import ConfigError
from condsim.corrector import (batch_mean_se, build_phi, chi_dual_mc,
                               corrector_fields, extrapolate_eps, phi_selfconsistency,
                               sublinearity_report)
from condsim.env import EnvSpec, LevelLaw, build_env
from condsim.kernel import tail_horizon


def test_extrapolation_is_linear_in_eps():
    eps = [0.1, 0.01]
    truth = np.array([1.0, 2.0])
    raw = [truth + 3.0 * e for e in eps]
    ext, fb = extrapolate_eps(eps, raw)
    assert np.allclose(ext, truth) and fb == 0
    # a non-positive extrapolant falls back to the smallest-epsilon value
    ext2, fb2 = extrapolate_eps(eps, [np.array([1.0]), np.array([0.1])])
    assert fb2 == 1 and ext2[0] == 0.1


def test_batch_means_against_iid_standard_error():
    rng = np.random.default_rng(0)
    v = rng.normal(size=100_000)
    m, se = batch_mean_se(v, 20)
    assert se == pytest.approx(1 / np.sqrt(len(v)), rel=0.4)


def test_constant_field_has_trivial_corrector():
    env = build_env(EnvSpec.constant(1.3), -20, 20, -1.0, 12.0, 0)
    phi, psi = corrector_fields(env, np.arange(0, 11.0), -8, 8)
    assert phi.method == "homogeneous-unit"
    assert np.allclose(psi.chi_grid, 0.0, atol=1e-12)


def test_static_field_closed_form():
    spec = EnvSpec.static_iid([1.0, 2.0])
    env = build_env(spec, -30, 30, -1.0, 12.0, 6)
    phi, psi = corrector_fields(env, np.arange(0, 11.0), -10, 10)
    c_h = 4.0 / 3.0
    a = np.array([env.rate_at(x, 0.0) for x in range(-10, 11)])
    assert np.allclose(phi.row(10.0), c_h / a)
    # psi(t, 0) = 0 and psi(t, x+1) - psi(t, x) = c_h / a(x) at every time
    assert np.allclose(psi.psi[:, 10], 0.0, atol=1e-12)
    assert np.allclose(psi.gradients, np.tile(c_h / a[:-1], (len(psi.times), 1)))
    assert psi.pde_residual() < 1e-12 and psi.cocycle_residual(30, 1) < 1e-12


@pytest.fixture(scope="module")
def onoff_fields():
    spec = EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)
    eps = (0.5, 0.1)
    top = 6.0
    env = build_env(spec, -200, 200, -1.0, top + tail_horizon(0.1, 1e-8) + 1.0, 8)
    phi, psi = corrector_fields(env, np.arange(0, top + 0.5, 0.5), -6, 6, epsilons=eps, margin=40)
    return env, phi, psi


def test_psi_residuals_on_dynamic_field(onoff_fields):
    _, phi, psi = onoff_fields
    assert phi.method == "kernel-extrapolated"
    assert psi.pde_residual() < 1e-9
    assert psi.cocycle_residual(40, 2) < 1e-9
    assert np.all(psi.gradients > 0)
    assert psi.value(0.0, 0) == 0.0
    # chi(0, 1) = phi(0, 0) - 1
    assert psi.chi(0.0, 1) == pytest.approx(psi.phi_rows[0, 6] - 1.0, abs=1e-12)


def test_exports(onoff_fields):
    _, phi, psi = onoff_fields
    lines = psi.to_csv().splitlines()
    assert lines[0] == "t,x,psi,chi" and len(lines) == 1 + psi.psi.size
    assert phi.metadata()["method"] == "kernel-extrapolated"
    assert phi.to_csv().startswith("t,x,value")


def test_selfconsistency_on_dynamic_field():
    spec = EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)
    env = build_env(spec, -220, 220, -1.0, 2.0 + tail_horizon(0.01, 1e-8) + 1.0, 12)
    phi = build_phi(env, "kernel-extrapolated", [0.0, 1.0], -30, 30, epsilons=(0.1, 0.01),
                    tail_tol=1e-8, coarse=0.1, exact_span=5.0)
    worst, res = phi_selfconsistency(env, phi, 1.0, probes=[(0.0, x) for x in range(-5, 6)], radius=20)
    assert worst < 0.02
    # a perturbed field is detected
    bad = phi.perturbed(0.0, 0, 1.2)
    assert phi_selfconsistency(env, bad, 1.0, probes=[(0.0, 0)], radius=20)[0] > 0.1


def test_phi_method_guards():
    env = build_env(EnvSpec.onoff(1.0, 1.0, 0.1, 1.0), -5, 5, -1.0, 2.0, 0)
    with pytest.raises(ConfigError):
        build_phi(env, "static-closed-form", [0.0], -2, 2)
    with pytest.raises(ConfigError):
        build_phi(env, "homogeneous-unit", [0.0], -2, 2)
    with pytest.raises(ConfigError):
        build_phi(env, "magic", [0.0], -2, 2)


def test_dual_estimate_zero_on_homogeneous():
    spec = EnvSpec.homogeneous(LevelLaw("discrete", (0.5, 2.0), (0.5, 0.5)), 1.0)
    env = build_env(spec, -60, 60, -12.0, 1.0, 4)
    est = chi_dual_mc(env, np.ones(101), -50, 5.0, 50, seed=3)
    assert est.estimate == 0.0


def test_dual_estimate_agrees_with_integral(onoff_fields):
    env, phi, psi = onoff_fields
    t = 2.0
    row = phi.row(6.0)
    view = env.shift(6.0, 0)
    est = chi_dual_mc(view, row, phi.x_lo, t, 400, M=6.0, seed=5)
    direct = psi.value(6.0 - t, 0) - psi.value(6.0, 0)
    assert abs(est.estimate - direct) <= 4 * est.se + est.tail_proxy


def test_sublinearity_ratios_and_coverage():
    env = build_env(EnvSpec.static_iid([1.0, 2.0]), -110, 110, -1.0, 401.0, 2)
    _, psi = corrector_fields(env, np.arange(0, 401.0, 4.0), -101, 101)
    rep = sublinearity_report(psi, [100.0, 400.0])
    assert all(r >= 0 for r in rep.box_ratio)
    assert rep.to_dict()["n"] == [100.0, 400.0]
    with pytest.raises(ConfigError):
        sublinearity_report(psi, [10_000.0])
