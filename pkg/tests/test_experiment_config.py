import json
from pathlib import Path

import pytest

from spectral_lab.errors import ConfigError
from spectral_lab.experiment_config import (
    SCHEMA_VERSION,
    load_config,
    parse_config,
    with_overrides,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def minimal(**extra):
    data = {"schema_version": SCHEMA_VERSION, "model": {"kind": "torus", "cutoff": 32}}
    data.update(extra)
    return data


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    config = load_config(path)
    assert config.schema_version == SCHEMA_VERSION
    assert config.output.directory.startswith("results/")


def test_defaults_fill_missing_sections():
    config = parse_config(minimal())
    assert config.propagation.integrator == "exponential-midpoint"
    assert config.sobolev_ks == (1.0,)
    assert config.adiabatic is None
    assert config.fit_ks == (1.0,)
    assert config.output.path("trajectory") == Path("results") / "trajectory.csv"


def test_drive_terms_and_envelopes_are_typed():
    config = parse_config(minimal(model={
        "kind": "torus", "cutoff": 32,
        "drive": [{"mode": 2, "envelope": {"kind": "polynomial", "coefficients": [0.0, 1.0]}}],
    }))
    term = config.model.drive[0]
    assert term.mode == 2
    assert term.envelope.coefficients == (0.0, 1.0)
    assert config.to_dict()["model"]["kind"] == "torus"


@pytest.mark.parametrize("data, message", [
    (minimal(colour="blue"), "unknown top-level key"),
    (minimal(model={"kind": "torus", "cutof": 32}), "unknown key"),
    (minimal(propagation={"dt": 0.1, "step": 2}), "unknown key"),
    (minimal(schema_version=2), "schema_version"),
    ({"schema_version": SCHEMA_VERSION}, "no 'model'"),
    (minimal(seed="seven"), "seed must be an integer"),
    (minimal(model={"kind": "torus", "drive": {"mode": 1}}), "must be a list"),
])
def test_rejected_documents(data, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(data)


@pytest.mark.parametrize("section", [{}, {"M": 2, "epsilon": 0.1}, {"M": -1}, {"epsilon": 0.0}])
def test_adiabatic_section_needs_one_depth_source(section):
    with pytest.raises(ConfigError):
        parse_config(minimal(adiabatic=section))


def test_library_errors_become_config_errors():
    with pytest.raises(ConfigError, match="invalid section 'propagation'"):
        parse_config(minimal(propagation={"dt": -1.0}))
    with pytest.raises(ConfigError):
        parse_config(minimal(model={"kind": "sphere"}))
    with pytest.raises(ConfigError):
        parse_config(minimal(fit={"regime": "quadratic"}))
    with pytest.raises(ConfigError):
        parse_config(minimal(initial_state={"kind": "plane_wave"}))


def test_fit_window_must_lie_in_span():
    with pytest.raises(ConfigError, match="outside t_span"):
        parse_config(minimal(propagation={"t_span": [0.0, 10.0]}, fit={"t_min": 10.0}))
    config = parse_config(minimal(propagation={"t_span": [10.0, 0.0]}, fit={"t_min": 5.0}))
    assert config.propagation.t_span == (10.0, 0.0)


def test_fit_k_must_be_recorded():
    with pytest.raises(ConfigError, match="not among sobolev_ks"):
        parse_config(minimal(sobolev_ks=[1.0], fit={"k": 2.0}))
    assert parse_config(minimal(sobolev_ks=[1, 2], fit={"k": 2.0})).fit_ks == (2.0,)


def test_lattice_drive_inherits_top_level_seed():
    data = minimal(seed=11, model={"kind": "lattice", "box": 8, "lattice_drive": {"amplitude": 1.0}})
    assert parse_config(data).model.lattice_drive.seed == 11
    data["model"]["lattice_drive"]["seed"] = 3
    assert parse_config(data).model.lattice_drive.seed == 3


def test_overrides_reseed_lattice_and_redirect_output():
    config = parse_config(minimal(model={"kind": "lattice", "box": 8, "lattice_drive": {"amplitude": 1.0}}))
    changed = with_overrides(config, seed=5, out="elsewhere", threads=2)
    assert changed.seed == 5
    assert changed.model.lattice_drive.seed == 5
    assert changed.output.directory == "elsewhere"
    assert changed.threads == 2
    assert with_overrides(config) == config


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(minimal(seed=4)))
    assert load_config(good).seed == 4
