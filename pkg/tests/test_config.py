import json

import pytest
from hypothesis import given, strategies as st

from nlrs.config import ExperimentConfig, derive_seed, from_dict, load_config
from nlrs.errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.modes.b == 2 and cfg.mc.box_of(64).size == 64


def test_load_minimal():
    cfg = load_config("configs/minimal.toml")
    assert cfg.modes.betas == [50] and cfg.solver.override_audits


def test_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys in \\[modes\\]: gamma"):
        from_dict({"modes": {"gamma": 1}})
    with pytest.raises(ConfigError, match="top level"):
        from_dict({"sede": 1})


def test_geometry_message():
    with pytest.raises(ConfigError, match=r"10L <= \|beta_1\|"):
        from_dict({"modes": {"L": 8, "betas": [40], "amplitudes": [1.5]}})


@pytest.mark.parametrize("data, match", [
    ({"modes": {"amplitudes": [1.5]}}, "one entry per beta"),
    ({"modes": {"amplitudes": [0.5, 1.5]}}, r"\[1, 2\]"),
    ({"model": {"delta": 1.0}}, "delta"),
    ({"model": {"p": 0}}, "positive"),
    ({"dynamics": {"h": 0.0}}, "dynamics.h"),
    ({"sweep": {"amplitudes": [[1.5]]}}, "sweep.amplitudes"),
    ({"mc": {"density_band": [1.3, 0.7]}}, "density_band"),
    ({"potential": {"box_radius": 64}}, "leaves the potential box"),
    ({"modes": "x"}, "must be a table"),
])
def test_invalid(data, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(data)


def test_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(bad)


def test_hash_canonical():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash()
    assert json.loads(a.canonical_json()) == a.to_dict()
    b.model.delta = 2e-3
    assert a.hash() != b.hash()


def test_hash_independent_of_key_order(tmp_path):
    p1, p2 = tmp_path / "a.toml", tmp_path / "b.toml"
    p1.write_text("seed = 3\n[model]\ndelta = 0.002\np = 1\n")
    p2.write_text("[model]\np = 1\ndelta = 0.002\n")
    c2 = load_config(p2)
    c2.seed = 3
    assert load_config(p1).hash() == c2.hash()


@given(st.integers(0, 2**63), st.text(max_size=8), st.text(max_size=8))
def test_derive_seed(base, t1, t2):
    s = derive_seed(base, t1)
    assert 0 <= s < 2**64 and s == derive_seed(base, t1)
    if t1 != t2:
        assert s != derive_seed(base, t2)
