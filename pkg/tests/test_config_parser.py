import json

import pytest
from hypothesis import given, settings, strategies as st

from config import Config
from config_parser import (
    parse_config,
    parse_value,
    valid_keys,
    with_run_value,
    write_resolved_config,
)
from exceptions import ConfigError
from slowsde import Kappa, Local, LocalInf, Sgd

MINIMAL = """
model = "valley"
eta = 0.01
K = 4
B_loc = 8
H = 50
rounds = 2000
seed = 7
"""


@pytest.fixture
def minimal(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(MINIMAL, encoding="utf-8")
    return path


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestMinimalConfig:
    def test_resolves_alpha(self, minimal):
        resolved = parse_config(minimal, env={})
        assert resolved.run.alpha == pytest.approx(0.5)
        assert resolved.run.steps == 100_000
        assert resolved.model.name == "valley"
        assert resolved.seed == 7
        assert resolved.run.seed == 7
        assert resolved.harness.seed == 7
        assert resolved.to_dict()["run"]["alpha"] == pytest.approx(0.5)

    def test_override_changes_alpha(self, minimal):
        resolved = parse_config(minimal, ["eta=0.02"], env={})
        assert resolved.run.alpha == pytest.approx(1.0)

    def test_unknown_key(self, minimal):
        with pytest.raises(ConfigError) as info:
            parse_config(minimal, ["momentum=0.9"], env={})
        assert str(info.value).startswith("unknown key: momentum")
        assert "run.eta" in str(info.value)
        assert info.value.key == "momentum"

    def test_shared_keys_feed_every_section(self, minimal):
        resolved = parse_config(minimal, env={})
        assert resolved.harness.K == 4
        assert resolved.harness.B_loc == 8
        assert resolved.sde.K == 4


class TestSeedPrecedence:
    def test_environment_beats_file(self, minimal):
        assert parse_config(minimal, env={Config.SEED_ENV_VAR: "11"}).seed == 11

    def test_override_beats_environment(self, minimal):
        resolved = parse_config(minimal, ["seed=13"], env={Config.SEED_ENV_VAR: "11"})
        assert (resolved.seed, resolved.run.seed) == (13, 13)

    def test_default_seed(self):
        assert parse_config(env={}).seed == Config.MASTER_SEED

    def test_run_section_seed_is_recorded(self, tmp_path):
        resolved = parse_config(write(tmp_path, "[run]\nseed = 9\n"), env={})
        assert (resolved.seed, resolved.run.seed, resolved.harness.seed) == (9, 9, 9)

    def test_harness_section_seed_without_run_seed(self, tmp_path):
        resolved = parse_config(write(tmp_path, "[harness]\nseed = 4\n"), env={})
        assert (resolved.seed, resolved.run.seed, resolved.harness.seed) == (4, 4, 4)

    def test_global_seed_beats_section_seed(self, tmp_path):
        resolved = parse_config(write(tmp_path, "seed = 3\n[run]\nseed = 9\n"), env={})
        assert resolved.seed == 3

    def test_bad_environment_seed(self):
        with pytest.raises(ConfigError):
            parse_config(env={Config.SEED_ENV_VAR: "abc"})


class TestSections:
    def test_sectioned_file(self, tmp_path):
        path = write(tmp_path, """
[run]
eta = 0.05
H = 2
total_steps = 10
algorithm = "post_local"
t0 = 4

[model]
name = "block"
eigenvalues = [1, 3]
dim = 3

[sde]
kind = "local_inf"
horizon = 0.5

[harness]
experiment = "lsr"
kappas = [1, 2]
""")
        resolved = parse_config(path, env={})
        assert resolved.run.algorithm == "post_local"
        assert resolved.model.eigenvalues == [1.0, 3.0]
        assert resolved.harness.kappas == [1.0, 2.0]
        assert resolved.harness.model is resolved.model
        assert isinstance(resolved.sde.build(resolved.run), LocalInf)

    def test_dotted_overrides(self, tmp_path):
        resolved = parse_config(None, ["harness.etas=[0.1, 0.05]", "sde.kind=sgd", "run.sampler=without"], env={})
        assert resolved.harness.etas == [0.1, 0.05]
        assert resolved.sde.build(resolved.run) == Sgd(resolved.run.batch)
        assert resolved.run.sampler == "without"

    def test_sde_defaults_come_from_run(self, minimal):
        resolved = parse_config(minimal, env={})
        kind = resolved.sde.build(resolved.run)
        assert isinstance(kind, Local)
        assert (kind.B, kind.K) == (32, 4)
        assert kind.eta_h == pytest.approx(0.5)

    def test_kappa_kind_defaults_to_sgd_pair(self, minimal):
        resolved = parse_config(minimal, ["sde.kind=kappa"], env={})
        assert resolved.sde.build(resolved.run) == Kappa(1 / 32, 1 / 64)

    def test_unknown_sde_kind(self):
        resolved = parse_config(None, ["sde.kind=brownian"], env={})
        with pytest.raises(ConfigError):
            resolved.sde.build(resolved.run)

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(None, ["run.momentum=0.9"], env={})
        assert info.value.key == "run.momentum"


class TestErrors:
    def test_type_mismatch_names_the_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(None, ["run.K=four"], env={})
        assert info.value.key == "run.K"

    def test_integer_field_rejects_float(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["H=2.5"], env={})

    def test_invalid_range(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["rounds=10", "eta=-0.1"], env={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "absent.toml", env={})

    def test_invalid_toml(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write(tmp_path, "eta = = 1"), env={})

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["eta"], env={})

    def test_bad_verify_scale(self):
        with pytest.raises(ConfigError):
            parse_config(None, ["verify.scale=medium"], env={})


class TestHelpers:
    def test_parse_value(self):
        assert parse_value("0.02") == 0.02
        assert parse_value("[1, 2]") == [1, 2]
        assert parse_value("true") is True
        assert parse_value("valley") == "valley"

    def test_valid_keys(self):
        keys = valid_keys()
        assert "run.eta" in keys and "seed" in keys
        assert "harness.model" not in keys

    def test_with_run_value(self, minimal):
        resolved = parse_config(minimal, env={})
        changed = with_run_value(resolved, "eta", 0.02)
        assert changed.run.alpha == pytest.approx(1.0)
        assert resolved.run.eta == 0.01
        with pytest.raises(ConfigError):
            with_run_value(resolved, "momentum", 0.9)

    def test_output_override(self, tmp_path):
        assert parse_config(None, ["output=elsewhere"], env={}).output == "elsewhere"
        assert parse_config(None, ["output=elsewhere"], env={}, output=str(tmp_path)).output == str(tmp_path)

    def test_resolved_copy(self, minimal, tmp_path):
        resolved = parse_config(minimal, env={})
        path = write_resolved_config(resolved, tmp_path / "out")
        data = json.loads(open(path, encoding="utf-8").read())
        assert data["seed"] == 7
        assert data["run"]["alpha"] == pytest.approx(0.5)
        assert data["source"] == str(minimal)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(1, 100))
def test_alpha_is_eta_times_h(eta, H):
    resolved = parse_config(None, [f"eta={eta!r}", f"H={H}", "rounds=3"], env={})
    assert resolved.run.eta == eta
    assert resolved.run.alpha == eta * H
