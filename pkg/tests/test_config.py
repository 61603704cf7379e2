import math

import pytest

from cavitybelt.config import (ConfigError, ExperimentConfig, config_from_mapping,
                               config_hash, config_to_text, default_config,
                               derive, load_config, parse_config_text,
                               parse_value, validate_config)

TWO_PI = 2.0 * math.pi


def test_defaults_validate():
    cfg = validate_config(default_config())
    assert cfg.cavity.length == 490e-6
    assert cfg.trap.sw_depth == 2.5e-3


def test_free_spectral_range():
    d = derive(ExperimentConfig())
    assert d.fsr == pytest.approx(2.99792458e8 / (2 * 490e-6), rel=1e-12)
    assert d.fsr == pytest.approx(3.0591e11, rel=1e-4)


def test_round_trip_and_intrinsic_loss():
    cfg = ExperimentConfig()
    d = derive(cfg)
    # total round-trip loss from the TEM00 field decay rate (rad/s):
    # energy decays at 2*kappa, one round trip lasts 1/fsr
    expected_total = 2.0 * cfg.cavity.kappa_tem00 / d.fsr
    assert d.round_trip_loss == pytest.approx(expected_total, rel=1e-12)
    assert d.intrinsic_loss == pytest.approx(
        expected_total - cfg.cavity.transmission_t0 - cfg.cavity.transmission_t1,
        rel=1e-12)
    assert d.round_trip_loss == pytest.approx(205.39e-6, rel=1e-3)


def test_emission_branching():
    cfg = ExperimentConfig()
    d = derive(cfg)
    assert d.emission_branching == pytest.approx(
        cfg.cavity.transmission_t1 / d.round_trip_loss, rel=1e-12)
    assert 0.0 < d.emission_branching < 1.0


def test_well_spacing_is_half_wavelength():
    d = derive(ExperimentConfig())
    assert d.well_spacing == pytest.approx(515e-9, rel=1e-12)


def test_lock_light_detuning_wavelength():
    cfg = ExperimentConfig()
    d = derive(cfg)
    lam = cfg.constants.d2_wavelength
    expected = lam * lam * 8 * d.fsr / cfg.constants.speed_of_light
    assert d.ic_detuning_wavelength == pytest.approx(expected, rel=1e-12)
    assert d.ic_detuning_wavelength == pytest.approx(5.0e-9, rel=0.02)
    assert d.ic_wavelength == pytest.approx(lam + expected, rel=1e-12)


def test_wells_per_second_threshold():
    d = derive(ExperimentConfig())
    assert d.wells_per_second_threshold == pytest.approx(
        TWO_PI * 500e-6 / d.well_spacing, rel=1e-12)
    assert d.wells_per_second_threshold == pytest.approx(6100, abs=60)


def test_waist_consistent_with_geometry():
    cfg = ExperimentConfig()
    lam = derive(cfg).ic_wavelength
    L, R = cfg.cavity.length, cfg.cavity.mirror_roc
    w0_geom = math.sqrt(lam / (2 * math.pi) * math.sqrt(L * (2 * R - L)))
    assert cfg.cavity.waist_w0 == pytest.approx(w0_geom, rel=0.10)


@pytest.mark.parametrize("text,expected", [
    ("490 um", 490e-6),
    ("1030 nm", 1030e-9),
    ("2.5 mK", 2.5e-3),
    ("5 MHz", 5e6),
    ("2pi*5 MHz", TWO_PI * 5e6),
    ("200 ms", 0.2),
    ("95 ppm", 95e-6),
    ("true", True),
    ("0.069", 0.069),
])
def test_parse_value_units(text, expected):
    assert parse_value(text) == pytest.approx(expected)


def test_parse_config_text_with_blocks():
    mapping = parse_config_text("""
    # comment
    cavity.length = 490 um
    trap.sw_depth = 2.5 mK
    pump {
      pump_on = false
    }
    sweep {
      amplitude = 25 um
      frequency = 20 Hz
    }
    """)
    assert mapping["cavity.length"] == pytest.approx(490e-6)
    assert mapping["pump.pump_on"] is False
    assert mapping["sweep.amplitude"] == pytest.approx(25e-6)
    assert mapping["sweep.frequency"] == pytest.approx(20.0)


def test_config_from_mapping_applies_overrides():
    cfg = config_from_mapping({"cavity.length": 500e-6, "pump.pump_on": False})
    assert cfg.cavity.length == 500e-6
    assert cfg.pump.pump_on is False
    # base is untouched
    assert ExperimentConfig().cavity.length == 490e-6


def test_config_from_mapping_rejects_unknown_key():
    with pytest.raises(ConfigError):
        config_from_mapping({"cavity.not_a_field": 1.0})


def test_validation_collects_all_violations():
    bad = config_from_mapping({"cavity.length": -1.0,
                               "trap.sw_depth": -2.0,
                               "detection.detection_efficiency": 3.0})
    with pytest.raises(ConfigError) as err:
        validate_config(bad)
    assert len(err.value.errors) >= 3


def test_config_text_round_trip():
    cfg = config_from_mapping({"trap.sw_waist": 17e-6})
    text = config_to_text(cfg)
    again = config_from_mapping(parse_config_text(text))
    assert config_hash(again) == config_hash(cfg)


def test_config_hash_is_stable_and_sensitive():
    a = config_hash(ExperimentConfig())
    b = config_hash(ExperimentConfig())
    c = config_hash(config_from_mapping({"cavity.length": 491e-6}))
    assert a == b
    assert a != c


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("cavity.length = 490 um\npump.pump_on = false\n")
    cfg = load_config(path)
    assert cfg.pump.pump_on is False
