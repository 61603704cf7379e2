"""Conveyor-belt positioning: commanded sweep waveforms, realized antinode
offsets with galvo repeatability noise, and kinematic quantities for the
transport-loss analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cavitybelt.config import GalvoParams

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SweepWaveform:
    """Commanded conveyor displacement versus time.

    kinds: 'constant', 'sinusoid' (center + amplitude*sin(2 pi f t)), or
    'piecewise' (linear interpolation through `points`).  With
    return_to_start, a sinusoid holds at its center after the last complete
    cycle, and a piecewise waveform is closed back to its first offset.
    """

    kind: str = "sinusoid"
    amplitude: float = 0.0  # m, half peak-to-peak
    frequency: float = 0.0  # Hz
    center: float = 0.0  # m
    duration: float = 1.0  # s
    return_to_start: bool = False
    points: tuple = field(default_factory=tuple)  # ((t, offset), ...) for piecewise

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoid", "piecewise"):
            raise ValueError(f"unknown waveform kind {self.kind!r}")
        if self.amplitude < 0 or self.frequency < 0:
            raise ValueError("amplitude and frequency must be non-negative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.kind == "piecewise" and len(self.points) < 2:
            raise ValueError("piecewise waveform needs at least two points")

    @property
    def active_duration(self) -> float:
        """Duration of actual sweeping; a returning sinusoid holds at the
        center after its last complete cycle."""
        if self.kind == "sinusoid" and self.return_to_start and self.frequency > 0:
            return math.floor(self.duration * self.frequency) / self.frequency
        return self.duration

    def _piecewise_arrays(self):
        ts = [float(t) for t, _ in self.points]
        xs = [float(x) for _, x in self.points]
        if self.return_to_start and xs[-1] != xs[0]:
            ts = ts + [self.duration]
            xs = xs + [xs[0]]
        return np.asarray(ts), np.asarray(xs)


def commanded_offset(t, w: SweepWaveform):
    """Commanded conveyor offset (m) at time t in [0, duration]."""
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0) or np.any(arr > w.duration * (1 + 1e-12)):
        raise ValueError(f"time outside [0, {w.duration}] s")
    if w.kind == "constant":
        out = np.full(arr.shape, w.center)
    elif w.kind == "sinusoid":
        out = w.center + w.amplitude * np.sin(TWO_PI * w.frequency * arr)
        if w.return_to_start:
            out = np.where(arr >= w.active_duration, w.center, out)
    else:
        ts, xs = w._piecewise_arrays()
        out = np.interp(arr, ts, xs)
    if out.ndim == 0:
        return float(out)
    return out


def commanded_velocity(t, w: SweepWaveform):
    """Time derivative of the commanded offset, m/s."""
    arr = np.asarray(t, dtype=float)
    if w.kind == "constant":
        out = np.zeros(arr.shape)
    elif w.kind == "sinusoid":
        out = w.amplitude * TWO_PI * w.frequency * np.cos(TWO_PI * w.frequency * arr)
        if w.return_to_start:
            out = np.where(arr >= w.active_duration, 0.0, out)
    else:
        ts, xs = w._piecewise_arrays()
        idx = np.clip(np.searchsorted(ts, arr, side="right") - 1, 0, len(ts) - 2)
        dt = ts[idx + 1] - ts[idx]
        out = np.where(dt > 0, (xs[idx + 1] - xs[idx]) / np.where(dt > 0, dt, 1.0), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def reversal_times(w: SweepWaveform) -> np.ndarray:
    """Times at which the sweep direction reverses (velocity changes sign)."""
    if w.kind == "constant" or w.frequency == 0 and w.kind == "sinusoid":
        return np.array([])
    if w.kind == "sinusoid":
        if w.frequency <= 0:
            return np.array([])
        t_act = w.active_duration
        quarter = 1.0 / (4.0 * w.frequency)
        times = np.arange(quarter, t_act, 2.0 * quarter)
        return times[times < t_act]
    ts, xs = w._piecewise_arrays()
    slopes = np.diff(xs) / np.maximum(np.diff(ts), 1e-300)
    revs = []
    for i in range(1, len(slopes)):
        if slopes[i] * slopes[i - 1] < 0:
            revs.append(ts[i])
    return np.asarray(revs)


def transit_windows(w: SweepWaveform) -> list[tuple[float, float, int]]:
    """Half-sweep intervals between consecutive reversals: (t0, t1, direction).

    direction is the sign of the conveyor velocity within the window.  The
    initial quarter sweep before the first reversal is not counted.
    """
    revs = reversal_times(w)
    out = []
    for i in range(len(revs) - 1):
        tm = 0.5 * (revs[i] + revs[i + 1])
        d = 1 if commanded_velocity(tm, w) > 0 else -1
        out.append((float(revs[i]), float(revs[i + 1]), d))
    return out


def max_sweep_velocity(w: SweepWaveform, well_spacing: float) -> tuple[float, float]:
    """Peak conveyor speed (m/s) and the corresponding well-passage rate (1/s)."""
    if w.kind == "sinusoid":
        v = TWO_PI * w.frequency * w.amplitude
    elif w.kind == "constant":
        v = 0.0
    else:
        ts, xs = w._piecewise_arrays()
        dt = np.diff(ts)
        with np.errstate(divide="ignore", invalid="ignore"):
            sl = np.abs(np.where(dt > 0, np.diff(xs) / np.where(dt > 0, dt, 1.0), 0.0))
        v = float(np.max(sl)) if len(sl) else 0.0
    return v, v / well_spacing


def modulation_frequency(t, w: SweepWaveform, well_spacing: float):
    """Well-passage frequency seen by a transported atom: |velocity| / spacing.

    Residual back-reflections modulate the trap intensity at this frequency,
    which drives parametric heating.
    """
    v = commanded_velocity(t, w)
    return np.abs(v) / well_spacing if not np.isscalar(v) else abs(v) / well_spacing


class GalvoTracker:
    """Realized conveyor offset: commanded value plus a repeatability error
    that is resampled at each sweep-direction reversal and held constant in
    between.  Owns no randomness of its own; the caller supplies the stream.
    """

    def __init__(self, galvo: GalvoParams, rng):
        self.galvo = galvo
        self.rng = rng
        self._eps = 0.0

    @property
    def range_limit(self) -> float:
        g = self.galvo
        return g.angle_limit * g.angle_to_path * g.path_to_displacement_gain

    def realized_offset(self, commanded: float, reversal_event: bool = False) -> float:
        if abs(commanded) > self.range_limit:
            raise ValueError("galvo range exceeded")
        if reversal_event and self.galvo.repeatability_sigma > 0:
            self._eps = self.rng.normal(0.0, self.galvo.repeatability_sigma)
        elif reversal_event:
            self._eps = 0.0
        return commanded + self._eps


def realized_offset(commanded: float, reversal_event: bool, galvo: GalvoParams,
                    rng, tracker: GalvoTracker | None = None) -> float:
    """Functional wrapper around GalvoTracker for one-off evaluation."""
    if tracker is None:
        tracker = GalvoTracker(galvo, rng)
    return tracker.realized_offset(commanded, reversal_event)
