"""Cavity mode amplitudes and trapping potentials.

Geometry: x is the transport axis (along the standing-wave dipole-trap
beams), y the cavity axis, z vertical.  Mode functions use a constant waist;
the cavity is far shorter than the Rayleigh range so divergence is below 1%.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from cavitybelt.config import ExperimentConfig, derive

TWO_PI = 2.0 * math.pi


class Mode(enum.Enum):
    TEM00 = "TEM00"
    TEM01 = "TEM01"


@dataclass(frozen=True)
class Position:
    x: float  # m, transport axis
    y: float  # m, cavity axis
    z: float  # m, vertical

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class LatticeConfiguration:
    """Which potentials are active, and where the conveyor has moved the wells."""

    conveyor_offset: float = 0.0  # m, antinode displacement along x
    sw_on: bool = True
    ic_on: bool = True
    guide_on: bool = False


def _split(pos):
    a = pos.as_array() if isinstance(pos, Position) else np.asarray(pos, dtype=float)
    return a[..., 0], a[..., 1], a[..., 2]


def mode_amplitude(mode: Mode, pos, cfg: ExperimentConfig):
    """Normalized field amplitude of the given cavity mode, in [-1, 1].

    TEM00 peaks at 1 on the axis at an antinode; TEM01 has two lobes along x
    at +-w0/sqrt(2), normalized so its maximum magnitude is also 1.
    """
    x, y, z = _split(pos)
    w0 = cfg.cavity.waist_w0
    kc = TWO_PI / cfg.constants.d2_wavelength
    radial = np.exp(-(x * x + z * z) / (w0 * w0))
    axial = np.cos(kc * y)
    if mode is Mode.TEM00:
        return axial * radial
    if mode is Mode.TEM01:
        return axial * math.sqrt(2.0 * math.e) * (x / w0) * radial
    raise ValueError(f"unknown mode {mode!r}")


def mode_maxima(mode: Mode, cfg: ExperimentConfig) -> list[float]:
    """Transverse positions (x, in m) where |amplitude| is maximal on axis."""
    w0 = cfg.cavity.waist_w0
    if mode is Mode.TEM00:
        return [0.0]
    if mode is Mode.TEM01:
        return [-w0 / math.sqrt(2.0), w0 / math.sqrt(2.0)]
    raise ValueError(f"unknown mode {mode!r}")


def _guide_geometry(cfg: ExperimentConfig):
    """Guide focus position (midway between MOT and cavity) and Rayleigh range."""
    t = cfg.trap
    x_focus = t.guide_transport_distance / 2.0
    rayleigh = math.pi * t.guide_waist ** 2 / t.sw_wavelength
    return x_focus, rayleigh


def potential(pos, lattice: LatticeConfiguration, cfg: ExperimentConfig):
    """Total trapping potential in J (always <= 0), sum of the active terms."""
    x, y, z = _split(pos)
    kB = cfg.constants.boltzmann_constant
    t = cfg.trap
    u = np.zeros(np.broadcast(x, y, z).shape)
    if lattice.sw_on:
        k = TWO_PI / t.sw_wavelength
        c = np.cos(k * (x - lattice.conveyor_offset))
        u = u - kB * t.sw_depth * c * c * np.exp(-2.0 * (y * y + z * z) / t.sw_waist ** 2)
    if lattice.ic_on:
        k_ic = TWO_PI / derive(cfg).ic_wavelength
        c = np.cos(k_ic * y)
        u = u - kB * t.ic_depth * c * c * np.exp(-2.0 * (x * x + z * z) / t.ic_waist ** 2)
    if lattice.guide_on:
        x_f, x_r = _guide_geometry(cfg)
        q = 1.0 + ((x - x_f) / x_r) ** 2
        u = u - kB * t.guide_depth / q * np.exp(-2.0 * (y * y + z * z) / (t.guide_waist ** 2 * q))
    if u.ndim == 0:
        return float(u)
    return u


def force(pos, lattice: LatticeConfiguration, cfg: ExperimentConfig):
    """Analytic -grad(potential), N.  Matches finite differences of `potential`."""
    x, y, z = _split(pos)
    kB = cfg.constants.boltzmann_constant
    t = cfg.trap
    shape = np.broadcast(x, y, z).shape
    fx = np.zeros(shape)
    fy = np.zeros(shape)
    fz = np.zeros(shape)
    if lattice.sw_on:
        k = TWO_PI / t.sw_wavelength
        w2 = t.sw_waist ** 2
        g = np.exp(-2.0 * (y * y + z * z) / w2)
        xc = x - lattice.conveyor_offset
        cos2 = np.cos(k * xc) ** 2
        amp = kB * t.sw_depth
        fx = fx - amp * k * np.sin(2.0 * k * xc) * g
        fy = fy - 4.0 * amp * cos2 * g * y / w2
        fz = fz - 4.0 * amp * cos2 * g * z / w2
    if lattice.ic_on:
        k_ic = TWO_PI / derive(cfg).ic_wavelength
        w2 = t.ic_waist ** 2
        g = np.exp(-2.0 * (x * x + z * z) / w2)
        cos2 = np.cos(k_ic * y) ** 2
        amp = kB * t.ic_depth
        fy = fy - amp * k_ic * np.sin(2.0 * k_ic * y) * g
        fx = fx - 4.0 * amp * cos2 * g * x / w2
        fz = fz - 4.0 * amp * cos2 * g * z / w2
    if lattice.guide_on:
        x_f, x_r = _guide_geometry(cfg)
        w2 = t.guide_waist ** 2
        uu = (x - x_f) / x_r
        q = 1.0 + uu * uu
        rho2 = y * y + z * z
        g = np.exp(-2.0 * rho2 / (w2 * q))
        amp = kB * t.guide_depth
        # dU/du = amp*g*(2u/q^2)*(1 - 2 rho^2/(w^2 q))
        dudu = amp * g * (2.0 * uu / (q * q)) * (1.0 - 2.0 * rho2 / (w2 * q))
        fx = fx - dudu / x_r
        fy = fy - 4.0 * amp * g / (q * q) * y / w2
        fz = fz - 4.0 * amp * g / (q * q) * z / w2
    out = np.stack([fx, fy, fz], axis=-1)
    if out.ndim == 1:
        return out
    return out


def hessian(pos, lattice: LatticeConfiguration, cfg: ExperimentConfig, h: float = 2e-9) -> np.ndarray:
    """Numerical Hessian of the total potential (central differences)."""
    p0 = pos.as_array() if isinstance(pos, Position) else np.asarray(pos, dtype=float)
    H = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            pp = p0.copy(); pp[i] += h; pp[j] += h
            pm = p0.copy(); pm[i] += h; pm[j] -= h
            mp = p0.copy(); mp[i] -= h; mp[j] += h
            mm = p0.copy(); mm[i] -= h; mm[j] -= h
            val = (potential(pp, lattice, cfg) - potential(pm, lattice, cfg)
                   - potential(mp, lattice, cfg) + potential(mm, lattice, cfg)) / (4.0 * h * h)
            H[i, j] = H[j, i] = val
    return H


def trap_frequencies(well_center, lattice: LatticeConfiguration, cfg: ExperimentConfig):
    """Eigenfrequencies (Hz) of the local harmonic expansion, with axis labels.

    Raises ValueError if the Hessian is not positive definite (the point is
    not a potential minimum).
    """
    H = hessian(well_center, lattice, cfg)
    evals, evecs = np.linalg.eigh(H)
    if np.any(evals <= 0):
        raise ValueError("not a potential minimum")
    m = cfg.constants.atom_mass
    labels = ("x", "y", "z")
    out = []
    for lam, vec in zip(evals, evecs.T):
        axis = labels[int(np.argmax(np.abs(vec)))]
        out.append((axis, math.sqrt(lam / m) / TWO_PI))
    out.sort(key=lambda p: p[1])
    return out


def lowest_trap_frequency(well_center, lattice: LatticeConfiguration, cfg: ExperimentConfig) -> float:
    return trap_frequencies(well_center, lattice, cfg)[0][1]


def guide_oscillation_period(cfg: ExperimentConfig, release_distance: float | None = None,
                             depth: float | None = None) -> float:
    """Oscillation period (s) of an atom released at rest in the guide beam.

    The release point defaults to the MOT turning point, one half of the
    transport distance away from the beam focus.  The motion is integrated
    on axis; the conjugate turning point sits at the cavity.
    """
    t = cfg.trap
    a = release_distance if release_distance is not None else t.guide_transport_distance / 2.0
    D = depth if depth is not None else t.guide_depth
    if a <= 0:
        raise ValueError("release at focus with zero velocity: period undefined")
    if D <= 0:
        raise ValueError("atom not bound: guide depth must be positive")
    kB = cfg.constants.boltzmann_constant
    m = cfg.constants.atom_mass
    _, x_r = _guide_geometry(cfg)

    def f(s):
        return 1.0 / (1.0 + (s / x_r) ** 2)

    fa = f(a)
    scale = 2.0 * kB * D / m

    def integrand(s):
        return 1.0 / math.sqrt(scale * (f(s) - fa))

    val, _err = quad(integrand, 0.0, a * (1.0 - 1e-12), limit=400)
    return 4.0 * val
