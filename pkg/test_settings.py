# test_settings.py

import pytest
from pydantic import ValidationError

from errors import ConfigError
from settings import env_settings, expand_sweep, experiment_label, load_config


def test_defaults():
    config = load_config(None)
    assert config.M == 10.0
    assert config.uses_mass
    assert config.window.n_lo == -8 and config.window.n_hi == 6
    assert config.kernel.beta == 1.5


def test_yaml_file_and_overrides(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text("kind: stability\nM: 2.5\nsimulation:\n  cells_per_interval: 16\n", encoding="utf-8")
    config = load_config(path, ["simulation.t_end=1.5", "kernel.alpha=0.4"])
    assert config.kind == "stability"
    assert config.M == 2.5
    assert config.simulation.cells_per_interval == 16
    assert config.simulation.t_end == 1.5
    assert config.kernel.alpha == 0.4


def test_A_replaces_default_mass():
    config = load_config(None, ["A=0.7"])
    assert not config.uses_mass
    with pytest.raises(ValidationError):
        load_config(None, ["A=0.7", "M=3"])


@pytest.mark.parametrize("override", ["delta0=0.5", "unknown_key=1", "simulation.scheme=euler",
                                      "kind=simulate", "kernel.beta=2.5"])
def test_rejected_values(override):
    extra = ["rho=0.2"] if override == "kind=simulate" else []
    with pytest.raises(ValidationError):
        load_config(None, [override, *extra])


def test_stationary_accepts_large_shift():
    assert load_config(None, ["kind=stationary", "rho=0.5"]).rho == 0.5


def test_malformed_inputs(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("kind: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, ["no-equals-sign"])


def test_sweep_expansion():
    config = load_config(None, ["kind=stationary", "sweep.rho=[0.0, 0.25, 0.5]", "sweep.M=[1, 10]"])
    runs = expand_sweep(config)
    assert len(runs) == 6
    assert {(c.rho, c.M) for c in runs} == {(r, m) for r in (0.0, 0.25, 0.5) for m in (1.0, 10.0)}
    assert len({experiment_label(c) for c in runs}) == 6


def test_label():
    config = load_config(None, ["kind=stability", "rho=-0.025"])
    assert experiment_label(config) == "stability_rhom0.025_M10"


def test_env_settings(monkeypatch):
    monkeypatch.setenv("PEAKDYN_THREADS", "3")
    monkeypatch.setenv("PEAKDYN_LOG_LEVEL", "debug")
    env = env_settings()
    assert env.threads == 3 and env.log_level == "DEBUG"
    monkeypatch.setenv("PEAKDYN_THREADS", "many")
    with pytest.raises(ConfigError):
        env_settings()
