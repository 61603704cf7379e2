"""Experiment parameters: physical constants, cavity/trap/pump/detection
settings, validation, and derived quantities shared by every other module.

All values are SI internally.  Config files accept convenience units
(``cavity.length = 490 um``) which are converted at parse time.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Raised when a configuration fails validation or parsing.

    ``errors`` carries one message per violated invariant; validation never
    stops at the first problem.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class PhysicalConstants:
    boltzmann_constant: float = 1.380649e-23  # J/K
    speed_of_light: float = 2.99792458e8  # m/s
    atom_mass: float = 1.4100e-25  # kg, 85Rb
    d2_wavelength: float = 780.24e-9  # m


@dataclass(frozen=True)
class CavityParams:
    length: float = 490e-6  # m
    mirror_roc: float = 0.05  # m, radius of curvature
    transmission_t0: float = 2e-6  # high reflector
    transmission_t1: float = 95e-6  # output coupler
    waist_w0: float = 29.5e-6  # m
    kappa_tem00: float = TWO_PI * 5e6  # rad/s
    kappa_tem01: float = TWO_PI * 2.5e6  # rad/s
    g0_tem00: float = TWO_PI * 5e6  # rad/s
    g0_tem01: float = TWO_PI * 4.3e6  # rad/s
    gamma_atom: float = TWO_PI * 3e6  # rad/s


@dataclass(frozen=True)
class TrapParams:
    sw_wavelength: float = 1030e-9  # m, Yb:YAG standing-wave trap
    sw_power: float = 2.0  # W
    sw_waist: float = 16e-6  # m
    sw_depth: float = 2.5e-3  # K
    ic_depth: float = 44e-6  # K, intracavity (lock-light) trap
    ic_detuning_fsr: int = 8  # lock light detuned by this many FSR
    ic_waist: float = 29.5e-6  # m
    guide_transport_distance: float = 14e-3  # m, MOT to cavity
    guide_oscillation_period: float = 0.200  # s, target used by calibration
    # Focused-beam guide, calibrated so an atom released 14 mm from the
    # cavity (focus midway) oscillates with the 200 ms period.
    guide_depth: float = 3.7788e-3  # K
    guide_waist: float = 20e-6  # m


@dataclass(frozen=True)
class PumpParams:
    rabi_frequency: float = TWO_PI * 30e6  # rad/s
    stark_shift: float = TWO_PI * 100e6  # rad/s, trap-light Stark shift
    pump_on: bool = True


@dataclass(frozen=True)
class DetectionParams:
    detection_efficiency: float = 0.03  # free parameter, uncalibrated in lab
    background_rate: float = 5000.0  # counts/s, 785 nm lock light leakage
    bin_width: float = 2e-3  # s


@dataclass(frozen=True)
class GalvoParams:
    """Glass-plate/galvo positioner for the standing-wave pattern."""

    path_to_displacement_gain: float = 0.5
    angle_to_path: float = 2e-3  # m/rad, interferometric calibration
    repeatability_sigma: float = 15e-9  # m, one standard deviation
    angle_limit: float = 0.35  # rad


@dataclass(frozen=True)
class DynamicsParams:
    timestep: float = 2e-7  # s, trajectory integrator
    cooling_coefficient: float = 4.23e-23  # kg/s, friction scale at mode peak
    hop_probability: float = 0.069  # per sweep reversal
    parametric_heating_rate: float = 22.0  # 1/s energy e-folding above threshold
    # Threshold modulation frequency for parametric loss.  Calibrated against
    # the observed loss knee; the naive lowest lattice eigenfrequency would
    # put the knee ~60% too high.
    parametric_f_min: float = 5600.0  # Hz
    parametric_mod_depth: float = 1.0
    pump_heating_rate: float = 0.025  # K/s, free-space pump recoil heating
    loss_energy_margin: float = 1.0
    lifetime_pump_off: float = 3.0  # s, background loss hazard
    lifetime_pump_on: float = 15.0  # s
    injection_temperature: float = 50e-6  # K, fast-start atom preparation
    use_resonance_band_model: bool = False  # alternative heating model


@dataclass(frozen=True)
class ExperimentConfig:
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    cavity: CavityParams = field(default_factory=CavityParams)
    trap: TrapParams = field(default_factory=TrapParams)
    pump: PumpParams = field(default_factory=PumpParams)
    detection: DetectionParams = field(default_factory=DetectionParams)
    galvo: GalvoParams = field(default_factory=GalvoParams)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)


@dataclass(frozen=True)
class DerivedParams:
    fsr: float  # Hz
    well_spacing: float  # m
    round_trip_loss: float
    intrinsic_loss: float
    emission_branching: float
    max_scattering_rate_tem00: float  # 1/s
    max_scattering_rate_tem01: float  # 1/s
    wells_per_second_threshold: float  # 1/s
    ic_detuning_wavelength: float  # m, offset from the D2 line
    ic_wavelength: float  # m


def default_config() -> ExperimentConfig:
    """Config populated with the published experiment parameters."""
    return ExperimentConfig()


# ---------------------------------------------------------------------------
# validation

def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every invariant; return the config unchanged if all hold.

    Raises ConfigError carrying the complete list of violations.
    """
    errors = collect_violations(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def collect_violations(cfg: ExperimentConfig) -> list[str]:
    e: list[str] = []
    k = cfg.constants
    for name in ("boltzmann_constant", "speed_of_light", "atom_mass", "d2_wavelength"):
        if getattr(k, name) <= 0:
            e.append(f"constants.{name} must be positive")

    cav = cfg.cavity
    if cav.length <= 0:
        e.append("cavity.length must be positive")
    if not (0 < cav.transmission_t0 < 1):
        e.append("cavity.transmission_t0 must lie in (0, 1)")
    if not (0 < cav.transmission_t1 < 1):
        e.append("cavity.transmission_t1 must lie in (0, 1)")
    if cav.transmission_t0 >= cav.transmission_t1:
        e.append("t0 < t1 required")
    for name in ("kappa_tem00", "kappa_tem01", "g0_tem00", "g0_tem01", "gamma_atom"):
        if getattr(cav, name) <= 0:
            e.append(f"cavity.{name} must be positive")
    if cav.length > 0 and cav.mirror_roc > cav.length / 2 and k.d2_wavelength > 0:
        # near-confocal Gaussian-optics consistency: w0^2 = (lam/2pi)*sqrt(L(2R-L))
        w0_expected = math.sqrt(
            k.d2_wavelength / TWO_PI * math.sqrt(cav.length * (2 * cav.mirror_roc - cav.length))
        )
        if abs(cav.waist_w0 - w0_expected) > 0.10 * w0_expected:
            e.append(
                "cavity.waist_w0 inconsistent with length/ROC "
                f"(expected ~{w0_expected * 1e6:.1f} um, got {cav.waist_w0 * 1e6:.1f} um)"
            )
    elif cav.mirror_roc <= cav.length / 2:
        e.append("cavity.mirror_roc must exceed length/2 (stable resonator)")

    t = cfg.trap
    for name in ("sw_wavelength", "sw_power", "sw_waist", "sw_depth", "ic_depth",
                 "ic_waist", "guide_transport_distance", "guide_oscillation_period",
                 "guide_depth", "guide_waist"):
        if getattr(t, name) <= 0:
            e.append(f"{name} must be positive")
    if abs(t.sw_wavelength / 2 - 515e-9) > 1e-9:
        e.append("well spacing sw_wavelength/2 must equal 515 nm within 1 nm")
    if t.ic_depth >= t.sw_depth:
        e.append("ic_depth must be smaller than sw_depth")
    if t.ic_detuning_fsr <= 0:
        e.append("trap.ic_detuning_fsr must be positive")

    p = cfg.pump
    if p.rabi_frequency < 0:
        e.append("pump.rabi_frequency must be non-negative")
    if p.stark_shift <= p.rabi_frequency / 2:
        e.append("pump.stark_shift must exceed rabi_frequency/2 (perturbative Raman regime)")

    d = cfg.detection
    if not (0 < d.detection_efficiency <= 1):
        e.append("detection.detection_efficiency must lie in (0, 1]")
    if d.background_rate < 0:
        e.append("detection.background_rate must be non-negative")
    if d.bin_width <= 0:
        e.append("detection.bin_width must be positive")

    g = cfg.galvo
    if not (0 < g.path_to_displacement_gain <= 1):
        e.append("galvo.path_to_displacement_gain must lie in (0, 1]")
    if g.repeatability_sigma < 0:
        e.append("galvo.repeatability_sigma must be non-negative")
    if g.angle_to_path <= 0 or g.angle_limit <= 0:
        e.append("galvo.angle_to_path and angle_limit must be positive")

    dyn = cfg.dynamics
    if dyn.timestep <= 0:
        e.append("dynamics.timestep must be positive")
    if not (0 <= dyn.hop_probability <= 1):
        e.append("dynamics.hop_probability must lie in [0, 1]")
    for name in ("lifetime_pump_off", "lifetime_pump_on", "injection_temperature"):
        if getattr(dyn, name) <= 0:
            e.append(f"dynamics.{name} must be positive")
    for name in ("cooling_coefficient", "parametric_heating_rate", "parametric_f_min",
                 "pump_heating_rate", "loss_energy_margin"):
        if getattr(dyn, name) < 0:
            e.append(f"dynamics.{name} must be non-negative")
    return e


# ---------------------------------------------------------------------------
# derived quantities

@lru_cache(maxsize=None)
def derive(cfg: ExperimentConfig) -> DerivedParams:
    """Derived quantities.  Pure and deterministic: same config, same result."""
    k, cav, t = cfg.constants, cfg.cavity, cfg.trap
    fsr = k.speed_of_light / (2.0 * cav.length)
    well_spacing = t.sw_wavelength / 2.0
    # 2*kappa is the photon energy decay rate; loss per round trip is 2*kappa/fsr
    # with kappa in rad/s and fsr in Hz matching the T1*c/2L emission formula.
    round_trip_loss = 2.0 * cav.kappa_tem00 / fsr
    intrinsic_loss = round_trip_loss - cav.transmission_t0 - cav.transmission_t1
    emission_branching = cav.transmission_t1 / round_trip_loss

    def max_rate(g0: float, kappa: float) -> float:
        g_eff = cfg.pump.rabi_frequency * g0 / (2.0 * cfg.pump.stark_shift)
        return cav.transmission_t1 * fsr * (g_eff / kappa) ** 2

    # paper-calibrated loss threshold: sweep-velocity product of 500 um*Hz
    wells_threshold = TWO_PI * 500e-6 / well_spacing
    dlam = k.d2_wavelength ** 2 * t.ic_detuning_fsr * fsr / k.speed_of_light
    return DerivedParams(
        fsr=fsr,
        well_spacing=well_spacing,
        round_trip_loss=round_trip_loss,
        intrinsic_loss=intrinsic_loss,
        emission_branching=emission_branching,
        max_scattering_rate_tem00=max_rate(cav.g0_tem00, cav.kappa_tem00),
        max_scattering_rate_tem01=max_rate(cav.g0_tem01, cav.kappa_tem01),
        wells_per_second_threshold=wells_threshold,
        ic_detuning_wavelength=dlam,
        ic_wavelength=k.d2_wavelength + dlam,
    )


# ---------------------------------------------------------------------------
# config file format:  section.key = value [unit]   or   section { key = ... }

_UNIT_FACTORS = {
    "m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9, "pm": 1e-12,
    "s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9,
    "hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9,
    "k": 1.0, "mk": 1e-3, "uk": 1e-6, "nk": 1e-9,
    "w": 1.0, "mw": 1e-3, "uw": 1e-6,
    "ppm": 1e-6,
    "rad": 1.0, "mrad": 1e-3,
    "rad/s": 1.0,
    "m/rad": 1.0,
    "kg/s": 1.0,
    "counts/s": 1.0, "1/s": 1.0,
    "k/s": 1.0,
}

_NUM_RE = re.compile(
    r"^\s*(?P<twopi>2pi\s*\*\s*)?(?P<num>[-+]?\d+(\.\d*)?([eE][-+]?\d+)?)\s*(?P<unit>[A-Za-z/0-9]*)\s*$"
)


def parse_value(text: str):
    """Parse a config value: number with optional unit suffix, bool, or string."""
    s = text.strip()
    low = s.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    m = _NUM_RE.match(s)
    if m:
        val = float(m.group("num"))
        unit = (m.group("unit") or "").lower()
        if unit:
            if unit not in _UNIT_FACTORS:
                raise ConfigError(f"unknown unit suffix {unit!r} in {text!r}")
            val *= _UNIT_FACTORS[unit]
        if m.group("twopi"):
            val *= TWO_PI
        if unit == "" and val == int(val) and "." not in s and "e" not in low:
            return int(val)
        return val
    return s


def parse_config_text(text: str) -> dict:
    """Parse the key/value config format into a flat dotted-key dict.

    Supports both ``a.b = value`` lines and brace blocks::

        sweep { kind = sinusoid, amplitude = 25 um }
    """
    out: dict = {}
    stack: list[str] = []
    # split brace blocks onto separate statements
    text = re.sub(r"#.*", "", text)
    tokens = re.split(r"([{}\n,])", text)
    buf = ""
    statements: list[str] = []
    for tok in tokens:
        if tok in ("{", "}", "\n", ","):
            if buf.strip():
                statements.append(buf.strip())
            if tok in ("{", "}"):
                statements.append(tok)
            buf = ""
        else:
            buf += tok
    if buf.strip():
        statements.append(buf.strip())

    pending_section = None
    for st in statements:
        if st == "{":
            if pending_section is None:
                raise ConfigError("unexpected '{' in config")
            stack.append(pending_section)
            pending_section = None
            continue
        if st == "}":
            if not stack:
                raise ConfigError("unbalanced '}' in config")
            stack.pop()
            continue
        if pending_section is not None:
            raise ConfigError(f"expected '{{' after section {pending_section!r}")
        if "=" in st:
            key, _, val = st.partition("=")
            dotted = ".".join(stack + [key.strip()])
            out[dotted] = parse_value(val)
        else:
            pending_section = st.strip()
    if pending_section is not None:
        raise ConfigError(f"dangling section name {pending_section!r}")
    if stack:
        raise ConfigError("unbalanced '{' in config")
    return out


_SECTION_TYPES = {
    "constants": PhysicalConstants,
    "cavity": CavityParams,
    "trap": TrapParams,
    "pump": PumpParams,
    "detection": DetectionParams,
    "galvo": GalvoParams,
    "dynamics": DynamicsParams,
}


def config_from_mapping(mapping: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from dotted keys, overriding ``base`` (defaults if None)."""
    cfg = base or default_config()
    sections: dict[str, dict] = {}
    errors = []
    for dotted, value in mapping.items():
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
            errors.append(f"unknown config key {dotted!r}")
            continue
        sec, name = parts
        if name not in {f.name for f in fields(_SECTION_TYPES[sec])}:
            errors.append(f"unknown config key {dotted!r}")
            continue
        sections.setdefault(sec, {})[name] = value
    if errors:
        raise ConfigError(errors)
    for sec, kv in sections.items():
        cfg = replace(cfg, **{sec: replace(getattr(cfg, sec), **kv)})
    return cfg


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    cfg = config_from_mapping(mapping, base)
    return validate_config(cfg)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Emit the full config in the parseable key/value format (SI units)."""
    lines = ["# cavitybelt experiment configuration (SI units)"]
    for sec, typ in _SECTION_TYPES.items():
        lines.append("")
        obj = getattr(cfg, sec)
        for f in fields(typ):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                lines.append(f"{sec}.{f.name} = {'true' if v else 'false'}")
            elif isinstance(v, int):
                lines.append(f"{sec}.{f.name} = {v}")
            else:
                lines.append(f"{sec}.{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of every parameter, for provenance blocks."""
    payload = {}
    for sec, typ in _SECTION_TYPES.items():
        obj = getattr(cfg, sec)
        payload[sec] = {f.name: getattr(obj, f.name) for f in fields(typ)}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
