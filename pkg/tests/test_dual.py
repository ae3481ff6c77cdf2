import numpy as np
import pytest

from condsim import ConfigError
from condsim.dual import (clock_slope, dual_clt_check, dual_ensemble, simulate_y,
                          simulate_y_reference)
from condsim.env import EnvSpec, LevelLaw, build_env

from oracles import dual_law


def _agree(sample, probs, ks, z=4.5):
    n = len(sample)
    emp = np.array([(sample == k).mean() for k in ks])
    se = np.sqrt(np.maximum(probs * (1 - probs), 1e-12) / n)
    return np.all(np.abs(emp - probs) <= z * se)


@pytest.mark.parametrize("spec", [EnvSpec.static_iid([1.0, 2.0]), EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)],
                         ids=["static", "onoff"])
def test_dual_marginal_matches_matrix_exponential(spec):
    env_seed, s, n = 13, 1.5, 20000
    ens = dual_ensemble(spec, "quenched", n, s, 4, env_seed=env_seed)
    env = build_env(spec, -20, 22, -s - 1.0, 1.0, env_seed)
    p = dual_law(env, 0, s, -20, 20)
    ks = np.arange(-6, 7)
    assert _agree(ens.final, p[ks + 20], ks)


def test_time_change_agrees_with_thinning_reference():
    spec = EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)
    env = build_env(spec, -40, 40, -6.0, 1.0, 3)
    a = np.array([simulate_y(env, 0, 5.0, 1000 + i).position_at(5.0) for i in range(3000)])
    b = np.array([simulate_y_reference(env, 0, 5.0, 5000 + i) for i in range(3000)])
    from scipy import stats
    assert stats.ks_2samp(a, b).pvalue > 1e-3
    assert a.var() == pytest.approx(b.var(), rel=0.12)


def test_clock_slope_is_exact_on_constant():
    ens = dual_ensemble(EnvSpec.constant(1.0), "annealed", 200, 50.0, 1)
    cs = clock_slope(ens)
    assert abs(cs.mean - 2.0) < 1e-12 and cs.se < 1e-12


def test_record_consistency(onoff_spec):
    env = build_env(onoff_spec, -30, 30, -11.0, 1.0, 6)
    rec = simulate_y(env, 2, 10.0, 77, clock_times=[0.0, 5.0, 10.0])
    z = rec.z_positions
    assert z[0] == 2 and np.all(np.abs(np.diff(z)) == 1)
    assert rec.position_at(0.0) == 2
    assert np.all(np.diff(rec.clock_samples[:, 1]) >= 0)
    # the clock equals the Poisson arrival count's time scale: A(w_k) = tau_k
    assert rec.clock_samples[-1, 1] >= (rec.poisson_arrivals[-1] if len(rec.poisson_arrivals) else 0.0)
    with pytest.raises(ConfigError):
        rec.position_at(11.0)


def test_mirror_pairs_cancel_on_homogeneous_fields():
    spec = EnvSpec.homogeneous(LevelLaw("discrete", (0.5, 2.0), (0.5, 0.5)), 1.0)
    keys = np.arange(1, 41, dtype=np.uint64) * np.uint64(7919)
    keys = np.concatenate((keys, keys))
    starts = np.concatenate((np.arange(40), -1 - np.arange(40)))
    mirror = np.concatenate((np.zeros(40, bool), np.ones(40, bool)))
    ens = dual_ensemble(spec, "quenched", 80, 20.0, 5, starts=starts, mirror=mirror, path_keys=keys,
                        env_seed=12)
    d = ens.final - ens.starts
    assert np.array_equal(d[:40], -d[40:])


def test_ks_check_needs_paths(constant_spec):
    ens = dual_ensemble(constant_spec, "annealed", 20, 5.0, 1)
    with pytest.raises(ConfigError):
        dual_clt_check(ens)
    big = dual_ensemble(constant_spec, "annealed", 2000, 200.0, 1)
    assert dual_clt_check(big).distance < 0.05


def test_workers_do_not_change_results(onoff_spec):
    a = dual_ensemble(onoff_spec, "annealed", 200, 10.0, 9, workers=1)
    b = dual_ensemble(onoff_spec, "annealed", 200, 10.0, 9, workers=3)
    assert np.array_equal(a.final, b.final)
    assert a.clock_csv() == b.clock_csv()
