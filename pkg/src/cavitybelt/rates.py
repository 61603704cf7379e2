"""Atom-cavity coupling and photon scattering rates.

The pump drives a Raman cycle through the cavity; the internal-state ladder
is collapsed into a single scattering-rate formula.  Rates add across atoms
(no collective enhancement): two co-trapped atoms at the same amplitude
scatter at exactly twice the single-atom rate.
"""

from __future__ import annotations

import math

from cavitybelt.config import ExperimentConfig, derive
from cavitybelt.fields import Mode, mode_amplitude


def effective_coupling(rabi: float, g0: float, stark_shift: float) -> float:
    """Raman-reduced atom-cavity coupling: rabi * g0 / (2 * stark_shift), rad/s."""
    if stark_shift == 0:
        raise ValueError("degenerate Raman denominator: stark_shift must be nonzero")
    return rabi * g0 / (2.0 * stark_shift)


def max_scattering_rate(cfg: ExperimentConfig, mode: Mode) -> float:
    """Peak photon scattering rate into the cavity (1/s) for an atom at the
    mode maximum: T1 * fsr * (g_eff / kappa)^2."""
    cav = cfg.cavity
    if mode is Mode.TEM00:
        g0, kappa = cav.g0_tem00, cav.kappa_tem00
    elif mode is Mode.TEM01:
        g0, kappa = cav.g0_tem01, cav.kappa_tem01
    else:
        raise ValueError(f"unknown mode {mode!r}")
    g_eff = effective_coupling(cfg.pump.rabi_frequency, g0, cfg.pump.stark_shift)
    return cav.transmission_t1 * derive(cfg).fsr * (g_eff / kappa) ** 2


def local_scattering_rate(pos, mode: Mode, cfg: ExperimentConfig):
    """Position-dependent scattering rate: max rate times amplitude squared.
    Zero when the pump is off."""
    if not cfg.pump.pump_on:
        amp = mode_amplitude(mode, pos, cfg)  # keep shape for array inputs
        return 0.0 * amp ** 2
    amp = mode_amplitude(mode, pos, cfg)
    return max_scattering_rate(cfg, mode) * amp * amp


def mean_coupling_reduction(sigma_x: float, w0: float) -> float:
    """Reduction of the ensemble-averaged coupling for a Gaussian lateral
    spread of width sigma_x: 1 - (1 + 2 sigma^2 / w0^2)^(-1/2).

    This is the closed form of 1 - <exp(-x^2/w0^2)> over x ~ N(0, sigma^2).
    """
    if sigma_x < 0:
        raise ValueError("sigma_x must be non-negative")
    return 1.0 - 1.0 / math.sqrt(1.0 + 2.0 * sigma_x ** 2 / w0 ** 2)


def temperature_from_spread(sigma_x: float, ic_depth: float, ic_waist: float) -> float:
    """Equipartition temperature estimate from the transverse position spread
    in the intracavity trap: T = 4 * depth * sigma^2 / waist^2 (harmonic
    expansion of the Gaussian profile).  Valid only for sigma << waist."""
    if sigma_x >= ic_waist / 2.0:
        raise ValueError("outside harmonic regime: sigma must be below waist/2")
    return 4.0 * ic_depth * sigma_x ** 2 / ic_waist ** 2


def rate_budget(cfg: ExperimentConfig) -> dict:
    """Full rate budget as a plain dict (for the `rates` CLI subcommand)."""
    d = derive(cfg)
    p, cav = cfg.pump, cfg.cavity
    return {
        "g_eff_tem00_rad_s": effective_coupling(p.rabi_frequency, cav.g0_tem00, p.stark_shift),
        "g_eff_tem01_rad_s": effective_coupling(p.rabi_frequency, cav.g0_tem01, p.stark_shift),
        "max_scattering_rate_tem00_per_s": d.max_scattering_rate_tem00,
        "max_scattering_rate_tem01_per_s": d.max_scattering_rate_tem01,
        "fsr_hz": d.fsr,
        "round_trip_loss": d.round_trip_loss,
        "intrinsic_loss": d.intrinsic_loss,
        "emission_branching": d.emission_branching,
        "wells_per_second_threshold": d.wells_per_second_threshold,
        "ic_wavelength_m": d.ic_wavelength,
        "well_spacing_m": d.well_spacing,
    }
