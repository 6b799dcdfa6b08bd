"""Config parsing, layered resolution, echo round trips, defaults."""

import math

import pytest

from moistswe.config import (
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    RunConfig,
    defaults_text,
    echo_text,
    parse_config_text,
    resolve_config,
    with_resolved_dt,
)
from moistswe.constants import GRAVITY
from moistswe.errors import ConfigError
from moistswe.physics import Scheme
from moistswe.testcases import Case


def test_paper_value_defaults():
    cfg = RunConfig()
    assert cfg.beta1 == 1600.0
    assert cfg.gamma_r == 1e-3
    assert cfg.q_precip == 1e-4
    assert cfg.q0 == 0.007
    assert cfg.u0 == 20.0
    assert cfg.H == pytest.approx(3.0e4 / GRAVITY)
    assert cfg.mountain_h0 == 2000.0
    assert cfg.courant == 0.2
    assert cfg.tau_v is None and cfg.tau_r is None
    assert DEFAULT_BETA2 == pytest.approx(10.0 * GRAVITY)


def test_parse_config_text():
    values = parse_config_text(
        "# a comment\n"
        "test = mountain   # trailing comment\n"
        "\n"
        "level=4\n"
        "out = runs/with spaces\n")
    assert values == {"test": "mountain", "level": "4",
                      "out": "runs/with spaces"}

    with pytest.raises(ConfigError) as err:
        parse_config_text("test mountain\nlevel: 4\n")
    lines = str(err.value).splitlines()
    assert len(lines) == 2 and "line 1" in lines[0] and "line 2" in lines[1]


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'levle'"):
        resolve_config("levle = 4\n")
    with pytest.raises(ConfigError, match="unknown config key 'nope'"):
        resolve_config(overrides={"nope": 3})


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        resolve_config("framework = sideways\n"
                       "level = -3\n"
                       "courant = 0\n"
                       "days = bananas\n")
    text = str(err.value)
    assert len(text.splitlines()) == 4
    assert "sideways" in text and "courant" in text and "bananas" in text


def test_forgiving_name_matching():
    cfg = resolve_config(overrides={"test": "steady",
                                    "framework": "moist_thermal"})
    assert cfg.test == "steady-state"
    assert cfg.framework == "moist-thermal"
    cfg = resolve_config(overrides={"test": "MOUNTAIN"})
    assert cfg.test == "mountain"
    with pytest.raises(ConfigError, match="'moist'"):
        resolve_config(overrides={"framework": "moist"})


def test_beta_defaults_follow_framework_gating():
    expected = {
        "moist-convective": (DEFAULT_BETA1, 0.0),
        "moist-convective-thermal": (DEFAULT_BETA1, DEFAULT_BETA2),
        "moist-thermal": (0.0, DEFAULT_BETA2),
        "moist-convective-pseudo-thermal": (DEFAULT_BETA1, 0.0),
    }
    for framework, (b1, b2) in expected.items():
        cfg = resolve_config(overrides={"framework": framework})
        assert (cfg.beta1, cfg.beta2) == (b1, b2), framework
    # an explicit disallowed beta is still an error
    with pytest.raises(ConfigError):
        resolve_config(overrides={"framework": "moist-thermal", "beta1": 5.0})


def test_case_defaults_and_desk_preset():
    cfg = resolve_config(overrides={"test": "mountain"})
    assert (cfg.level, cfg.days, cfg.H, cfg.xi) == (5, 50.0, 5960.0, 0.02)
    desk = resolve_config(overrides={"test": "mountain", "preset": "desk"})
    assert (desk.level, desk.days) == (4, 15.0)
    jet = resolve_config(overrides={"test": "unstable-jet", "preset": "desk"})
    assert (jet.level, jet.days, jet.q0) == (5, 6.0, 0.0027)
    # explicit values beat the preset
    own = resolve_config(overrides={"test": "mountain", "preset": "desk",
                                    "level": 6})
    assert (own.level, own.days) == (6, 15.0)
    steady = resolve_config(overrides={"preset": "desk"})
    assert (steady.level, steady.days) == (3, 5.0)


def test_level_cap_is_a_config_error():
    with pytest.raises(ConfigError, match="maximum 8"):
        resolve_config(overrides={"level": 9})


def test_echo_round_trip():
    cfg = resolve_config(overrides={"test": "mountain", "preset": "desk",
                                    "framework": "moist-convective-thermal",
                                    "xi": 0.05, "snapshot_days": 2.0,
                                    "out": "somewhere"})
    pinned = with_resolved_dt(cfg, 432.1)
    again = resolve_config(echo_text(pinned))
    assert again == pinned


def test_echo_contains_mountain_height():
    cfg = resolve_config(overrides={"test": "mountain"})
    assert "mountain_h0 = 2000.0" in echo_text(cfg)


def test_jet_perturbation_amplitude_reaches_the_spec():
    cfg = resolve_config(overrides={"test": "unstable-jet", "jet_h_hat": 0.0})
    spec = cfg.case_spec()
    assert spec.jet.h_hat == 0.0
    assert spec.jet.u_max == 80.0  # the rest of the profile is untouched
    again = resolve_config(echo_text(cfg))
    assert again.jet_h_hat == 0.0


def test_defaults_listing_carries_paper_constants():
    text = defaults_text()
    assert "gravity = 9.80616" in text
    assert "omega = 7.292e-05" in text
    assert "earth_radius = 6371220.0" in text
    assert "beta1 = 1600.0" in text
    assert f"beta2 = {10.0 * GRAVITY!r}" in text
    assert "gamma_r = 0.001" in text
    assert "q_precip = 0.0001" in text
    assert "q0 = 0.0027" in text          # jet moisture scale
    assert "H = 5960.0" in text           # mountain mean depth
    assert "days = 50.0" in text
    assert "mountain_h0 = 2000.0" in text


def test_helper_constructors():
    cfg = resolve_config(overrides={"test": "mountain", "scheme": "one-way",
                                    "gamma_r": 2e-3})
    spec = cfg.case_spec()
    assert spec.name is Case.MOUNTAIN and spec.H == 5960.0
    params = cfg.physics_params()
    assert params.scheme is Scheme.ONE_WAY
    assert params.gamma_r == 2e-3
    fw = cfg.framework_config()
    assert fw.beta1 == DEFAULT_BETA1 and fw.beta2 == 0.0
    assert cfg.mountain_radius == pytest.approx(math.pi / 9)
