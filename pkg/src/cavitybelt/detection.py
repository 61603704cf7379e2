"""Photon counting and the analysis chain: inhomogeneous Poisson trace
generation, atom-number step detection, transit peak fitting, repositioning
statistics, and lateral-spread estimation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from cavitybelt.config import DetectionParams, ExperimentConfig
from cavitybelt.conveyor import SweepWaveform, commanded_offset, transit_windows
from cavitybelt.rates import mean_coupling_reduction, temperature_from_spread

TWO_PI = 2.0 * math.pi


@dataclass
class PhotonTrace:
    bin_width: float  # s
    counts: np.ndarray  # int per bin
    start_time: float = 0.0
    arrival_times: np.ndarray | None = None

    @property
    def duration(self) -> float:
        return len(self.counts) * self.bin_width

    def bin_centers(self) -> np.ndarray:
        return self.start_time + (np.arange(len(self.counts)) + 0.5) * self.bin_width

    def rates(self) -> np.ndarray:
        return self.counts / self.bin_width


@dataclass(frozen=True)
class TransitFit:
    transit_index: int
    sweep_direction: int  # +1 / -1
    best_offset: float  # m, commanded offset maximizing the fitted rate
    peak_rate: float  # counts/s above background
    fit_uncertainty: float  # m


@dataclass
class AtomNumberTrack:
    change_points: list  # (time s, n_atoms) pairs; starts implicitly at 0
    latencies: list = field(default_factory=list)  # s, detection delay per change


def generate_trace(rate_fn, duration: float, det: DetectionParams, rng, *,
                   rate_bound: float, keep_arrivals: bool = False,
                   start_time: float = 0.0) -> PhotonTrace:
    """Detected photon trace for a time-dependent cavity emission rate.

    Arrivals follow an inhomogeneous Poisson process with intensity
    ``efficiency * rate_fn(t) + background``, generated exactly by thinning
    against the supplied bound on rate_fn.  Raises if rate_fn exceeds its
    declared bound (thinning soundness).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    lam_max = det.detection_efficiency * rate_bound + det.background_rate
    n_cand = rng.poisson(lam_max * duration)
    times = np.sort(rng.uniform(0.0, duration, n_cand))
    rate = det.detection_efficiency * np.asarray(rate_fn(times), dtype=float) \
        + det.background_rate
    if np.any(rate > lam_max * (1.0 + 1e-9)):
        raise ValueError("rate_fn exceeds the declared bound; thinning is unsound")
    accept = rng.uniform(0.0, lam_max, n_cand) < rate
    arrivals = times[accept]
    n_bins = int(math.ceil(duration / det.bin_width))
    counts, _ = np.histogram(arrivals, bins=n_bins, range=(0.0, n_bins * det.bin_width))
    return PhotonTrace(det.bin_width, counts.astype(int), start_time,
                       arrivals + start_time if keep_arrivals else None)


def detect_atom_number(trace: PhotonTrace, det: DetectionParams,
                       expected_single_rate: float) -> AtomNumberTrack:
    """Segment a count trace into integer atom-number levels.

    Each bin maps to the nearest integer of (rate - background)/single_rate;
    a level change is committed only after three consecutive bins agree and
    the candidate differs from the current level by at least half a level
    (hysteresis against Poisson chatter).  Levels start at 0.
    """
    if expected_single_rate <= 2.0 * det.background_rate:
        raise ValueError("insufficient contrast: single-atom rate must exceed twice background")
    confirm = 3
    rates = trace.rates()
    level_est = (rates - det.background_rate) / expected_single_rate
    current = 0
    pending = None
    pending_count = 0
    pending_since = None
    changes = []
    latencies = []
    for i, est in enumerate(level_est):
        cand = max(0, int(round(est)))
        if cand == current or abs(est - current) < 0.5:
            pending = None
            pending_count = 0
            continue
        if pending == cand:
            pending_count += 1
        else:
            pending = cand
            pending_count = 1
            pending_since = i
        if pending_count >= confirm:
            t_change = trace.start_time + pending_since * trace.bin_width
            t_commit = trace.start_time + (i + 1) * trace.bin_width
            # record one step at a time even if the level jumped by >1
            stepdir = 1 if cand > current else -1
            while current != cand:
                current += stepdir
                changes.append((t_change, current))
                latencies.append(t_commit - t_change)
            pending = None
            pending_count = 0
    return AtomNumberTrack(changes, latencies)


def _poisson_nll(params, offsets, counts, tau, w0, background):
    log_peak, mu = params
    lam = (math.e ** log_peak * np.exp(-2.0 * (offsets - mu) ** 2 / w0 ** 2)
           + background) * tau
    lam = np.maximum(lam, 1e-300)
    return float(np.sum(lam - counts * np.log(lam)))


def fit_transit(trace: PhotonTrace, waveform: SweepWaveform, transit_index: int,
                cfg: ExperimentConfig, *, mode_waist: float | None = None) -> TransitFit:
    """Maximum-likelihood Gaussian-peak fit of one transit.

    Bins inside the transit window are mapped to commanded conveyor offsets
    through the waveform; the detected rate is modeled as a Gaussian peak of
    the mode profile plus the known background, with Poisson statistics.
    Returns the offset of the fitted peak and its statistical uncertainty
    (inverse-Hessian estimate).
    """
    windows = transit_windows(waveform)
    if not 0 <= transit_index < len(windows):
        raise ValueError(f"transit_index {transit_index} outside 0..{len(windows) - 1}")
    t0, t1, direction = windows[transit_index]
    det = cfg.detection
    w0 = mode_waist if mode_waist is not None else cfg.cavity.waist_w0

    centers = trace.bin_centers()
    sel = (centers >= t0) & (centers < t1)
    counts = trace.counts[sel]
    if len(counts) < 5 or np.count_nonzero(counts) < 5:
        raise ValueError("insufficient data: fewer than 5 informative bins in window")
    offsets = np.asarray(commanded_offset(centers[sel], waveform))
    tau = trace.bin_width

    excess = np.maximum(counts / tau - det.background_rate, 0.0)
    mu0 = float(offsets[int(np.argmax(counts))])
    peak0 = max(float(excess.max()), 10.0 / tau * 0.1, 1.0)
    res = minimize(_poisson_nll, x0=[math.log(peak0), mu0],
                   args=(offsets, counts, tau, w0, det.background_rate),
                   method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-9, "maxiter": 2000})
    log_peak, mu = res.x

    # uncertainty from the numerical Hessian of the NLL in mu
    h = max(abs(mu) * 1e-6, 1e-9)
    f0 = _poisson_nll([log_peak, mu], offsets, counts, tau, w0, det.background_rate)
    fp = _poisson_nll([log_peak, mu + h], offsets, counts, tau, w0, det.background_rate)
    fm = _poisson_nll([log_peak, mu - h], offsets, counts, tau, w0, det.background_rate)
    curv = (fp - 2.0 * f0 + fm) / (h * h)
    sigma = 1.0 / math.sqrt(curv) if curv > 0 else w0
    return TransitFit(transit_index, direction, float(mu),
                      float(math.e ** log_peak), float(sigma))


@dataclass(frozen=True)
class RepositioningStats:
    transit_indices: np.ndarray  # global transit index per RMS entry
    rms_deviation: np.ndarray  # m, across atoms, per transit index
    n_atoms: np.ndarray  # atoms contributing per entry
    growth_per_transit: float  # m, fitted s in sigma^2(n) = sigma0^2 + n s^2
    growth_exponent: float  # power-law exponent of the noise-subtracted growth
    sigma0: float  # m, fitted transit-independent scatter


def repositioning_statistics(fits_per_atom: list[list[TransitFit]]) -> RepositioningStats:
    """RMS deviation of fitted positions versus transit index.

    For each atom and sweep direction, deviations are referenced to the first
    transit of the same direction; the RMS is taken across atoms at each
    global transit index (so a 19-transit protocol yields a 19-entry series,
    with zero deviation at each direction's reference transit).  A weighted
    linear fit of sigma^2(n) = sigma0^2 + n * s^2 over the non-reference
    entries gives the per-transit growth s; the exponent of a power-law fit
    of the noise-subtracted variance is reported alongside.
    Invariant under relabeling of atoms.
    """
    if not fits_per_atom:
        raise ValueError("empty input")
    devs: dict[int, list[float]] = {}
    for fits in fits_per_atom:
        for direction in (+1, -1):
            dir_fits = sorted((f for f in fits if f.sweep_direction == direction),
                              key=lambda f: f.transit_index)
            if len(dir_fits) < 2:
                continue
            ref = dir_fits[0]
            for f in dir_fits:
                devs.setdefault(f.transit_index, []).append(
                    f.best_offset - ref.best_offset)
    if not devs:
        raise ValueError("need at least 2 transits per direction per atom")
    ns = np.array(sorted(devs))
    rms = np.array([math.sqrt(np.mean(np.square(devs[n]))) for n in ns])
    counts = np.array([len(devs[n]) for n in ns])

    # weighted LS on sigma^2(n); var of a sigma^2 estimate ~ 2 sigma^4 / N.
    # Weights come from the *fitted* variances (iterated GLS) -- weighting by
    # the noisy sample variances themselves biases the slope low.  Reference
    # transits (rms exactly 0) carry no growth information.
    mask = (ns > 0) & (rms > 0)
    x = ns[mask].astype(float)
    y = rms[mask] ** 2
    A = np.stack([np.ones_like(x), x], axis=1)
    wts = counts[mask].astype(float)
    coef = np.zeros(2)
    for _ in range(4):
        W = np.sqrt(wts)[:, None]
        coef, *_ = np.linalg.lstsq(W * A, np.sqrt(wts) * y, rcond=None)
        yfit = np.maximum(A @ coef, np.max(y) * 1e-6)
        wts = counts[mask] / yfit ** 2
    sigma0_sq, s_sq = float(coef[0]), float(coef[1])
    growth = math.sqrt(max(s_sq, 0.0))
    sigma0 = math.sqrt(max(sigma0_sq, 0.0))

    resid = y - sigma0_sq
    ok = (resid > 0) & (x > 0)
    if ok.sum() >= 2:
        p = np.polyfit(np.log(x[ok]), np.log(resid[ok]), 1)
        exponent = float(p[0])
    else:
        exponent = float("nan")
    return RepositioningStats(ns, rms, counts, growth, exponent, sigma0)


@dataclass(frozen=True)
class LateralSpread:
    sigma_x: float  # m, deconvolved width of the first-transit positions
    coupling_reduction: float
    implied_temperature: float  # K
    degenerate_deconvolution: bool


def lateral_spread(first_fits: list[TransitFit], cfg: ExperimentConfig) -> LateralSpread:
    """Width of the initial lateral atom distribution from first-transit fits.

    The raw spread across atoms is deconvolved from the per-fit statistical
    noise (mean squared uncertainty subtracted in quadrature); the result
    feeds the coupling-reduction and equipartition temperature estimates.
    """
    if len(first_fits) < 20:
        raise ValueError("need at least 20 atoms for a spread estimate")
    offsets = np.array([f.best_offset for f in first_fits])
    noise_sq = float(np.mean([f.fit_uncertainty ** 2 for f in first_fits]))
    raw_var = float(np.var(offsets))
    degenerate = noise_sq >= raw_var
    sigma = 0.0 if degenerate else math.sqrt(raw_var - noise_sq)
    reduction = mean_coupling_reduction(sigma, cfg.cavity.waist_w0)
    try:
        temp = temperature_from_spread(sigma, cfg.trap.ic_depth, cfg.trap.ic_waist)
    except ValueError:
        temp = float("nan")
    return LateralSpread(sigma, reduction, temp, degenerate)
