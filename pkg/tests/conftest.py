import pytest

from condsim.env import EnvSpec, build_env


@pytest.fixture(scope="session")
def constant_spec():
    return EnvSpec.constant(0.5)


@pytest.fixture(scope="session")
def static_spec():
    return EnvSpec.static_iid([1.0, 2.0])


@pytest.fixture(scope="session")
def onoff_spec():
    return EnvSpec.onoff(1.0, 1.0, 0.1, 1.0)


@pytest.fixture(scope="session")
def windows(constant_spec, static_spec, onoff_spec):
    """One realized window per reference law, wide enough for the kernel probes."""
    return {name: build_env(spec, -60, 60, -2.0, 12.0, 17)
            for name, spec in (("constant", constant_spec), ("static", static_spec),
                               ("onoff", onoff_spec))}
