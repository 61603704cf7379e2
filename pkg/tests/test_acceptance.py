"""End-to-end acceptance checks.

Each test covers one acceptance criterion and prints a single PASS/FAIL line
(bypassing pytest capture) so the whole gate can be read off the terminal.
Tolerances are fixed here; they are the contract, not tuning knobs.
"""

import math

import numpy as np
import pytest

from cavitybelt.config import ExperimentConfig, config_from_mapping, derive
from cavitybelt.conveyor import SweepWaveform, commanded_offset, max_sweep_velocity
from cavitybelt.detection import (TransitFit, detect_atom_number, generate_trace,
                                  repositioning_statistics)
from cavitybelt.dynamics import hop_walk, load_atoms, survival_experiment
from cavitybelt.fields import (LatticeConfiguration, Mode, Position, force,
                               mode_maxima, potential)
from cavitybelt.rates import max_scattering_rate, mean_coupling_reduction
from cavitybelt.scenarios import calibrate

CFG = ExperimentConfig()


def _report(capsys, num: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def test_criterion_01_max_scattering_rate(capsys):
    rate = max_scattering_rate(CFG, Mode.TEM00)
    ok = abs(rate - 6.40e5) / 6.40e5 < 0.05
    _report(capsys, 1, ok, f"TEM00 max scattering rate {rate:.4g}/s (target 6.40e5/s +-5%)")


def test_criterion_02_lobe_separation(capsys):
    lo, hi = mode_maxima(Mode.TEM01, CFG)
    sep = hi - lo
    ok = abs(sep - 42e-6) < 1e-6
    _report(capsys, 2, ok, f"TEM01 lobe separation {sep * 1e6:.2f} um (target 42 +- 1 um)")


def test_criterion_03_wells_per_second(capsys):
    w = SweepWaveform(kind="sinusoid", amplitude=50e-6, frequency=10.0, duration=0.5)
    _, wells = max_sweep_velocity(w, derive(CFG).well_spacing)
    ok = abs(wells - 6100.0) < 60.0
    _report(capsys, 3, ok, f"f*A = 500 um*Hz -> {wells:.0f} wells/s (target 6100 +- 60)")


def test_criterion_04_detuning_wavelength(capsys):
    dlam = derive(CFG).ic_detuning_wavelength
    ok = abs(dlam - 5.0e-9) < 0.1e-9
    _report(capsys, 4, ok, f"8 FSR detuning = {dlam * 1e9:.3f} nm (target 5.0 +- 0.1 nm)")


def test_criterion_05_coupling_reduction(capsys):
    red = mean_coupling_reduction(7.7e-6, 29.5e-6)
    ok = abs(red - 0.062) < 0.002 and red < 0.07
    _report(capsys, 5, ok, f"coupling reduction {red * 100:.2f}% (target 6.2%, at most 7%)")


def test_criterion_06_survival_knee_pump_off(capsys):
    patch, report = calibrate({"knee": 500e-6})
    cfg = config_from_mapping(patch)
    amp = 25e-6
    fa_grid = np.array([250e-6, 375e-6, 500e-6, 625e-6, 750e-6])
    frac, se = [], []
    for i, fa in enumerate(fa_grid):
        w = SweepWaveform(kind="sinusoid", amplitude=amp, frequency=fa / amp,
                          duration=0.5)
        r = survival_experiment(w, False, 1000, cfg, master_seed=100 + i)
        frac.append(r.fraction)
        p = min(max(r.fraction, 1.0 / r.n_trials), 1.0 - 1.0 / r.n_trials)
        se.append(math.sqrt(p * (1.0 - p) / r.n_trials))
    frac = np.array(frac)
    monotone = all(frac[i + 1] <= frac[i] + 2.0 * math.hypot(se[i], se[i + 1])
                   for i in range(len(frac) - 1))
    knee = None
    for i in range(len(frac) - 1):
        if frac[i] >= 0.5 >= frac[i + 1]:
            t = (frac[i] - 0.5) / max(frac[i] - frac[i + 1], 1e-12)
            knee = fa_grid[i] + t * (fa_grid[i + 1] - fa_grid[i])
            break
    ok = monotone and knee is not None and abs(knee - 500e-6) < 150e-6
    knee_txt = f"{knee * 1e6:.0f}" if knee is not None else "none"
    _report(capsys, 6, ok, f"pump-off 50% crossing at {knee_txt} um*Hz "
                   f"(target 500 +- 150), survivals {np.round(frac, 2).tolist()}, "
                   f"monotone within 2 sigma: {monotone}")


def test_criterion_07_pump_on_shape(capsys):
    n = 800
    parked = survival_experiment(SweepWaveform(kind="constant", duration=0.5),
                                 True, n, CFG, master_seed=1)
    w2 = SweepWaveform(kind="sinusoid", amplitude=50e-6, frequency=2.0, duration=0.5)
    on_2 = survival_experiment(w2, True, n, CFG, master_seed=2)
    off_2 = survival_experiment(w2, False, n, CFG, master_seed=3)
    w100 = SweepWaveform(kind="sinusoid", amplitude=50e-6, frequency=100.0,
                         duration=0.5)
    on_100 = survival_experiment(w100, True, n, CFG, master_seed=4)
    off_100 = survival_experiment(w100, False, n, CFG, master_seed=5)
    ok = (parked.fraction > 0.9
          and on_2.ci_high < off_2.ci_low
          and on_100.ci_low > off_100.ci_high)
    _report(capsys, 7, ok, f"pump-on parked {parked.fraction:.2f} (> 0.9); "
                   f"2 Hz dip on {on_2.fraction:.2f} < off {off_2.fraction:.2f}; "
                   f"100 Hz on {on_100.fraction:.2f} > off {off_100.fraction:.2f}")


def test_criterion_08_repositioning_growth(capsys):
    rng = np.random.default_rng(3)
    spacing = derive(CFG).well_spacing
    p, noise, n_atoms, n_transits = 0.069, 15e-9, 71, 19
    fits = []
    for _ in range(n_atoms):
        hops = hop_walk(n_transits - 1, p, spacing, rng)[0]
        eps = rng.normal(0.0, noise, n_transits)
        a0 = rng.normal(0.0, 7.7e-6)
        fits.append([TransitFit(k, 1 if k % 2 == 0 else -1,
                                -(a0 + eps[k] + hops[k]), 2e4, noise)
                     for k in range(n_transits)])
    stats = repositioning_statistics(fits)
    target = math.sqrt(p) * spacing  # 135 nm
    ok = abs(stats.growth_per_transit - target) / target < 0.20
    _report(capsys, 8, ok, f"recovered growth {stats.growth_per_transit * 1e9:.1f} nm/transit "
                   f"(target {target * 1e9:.1f} +- 20%)")


def test_criterion_09_two_atom_lobe_fraction(capsys):
    atoms, _ = load_atoms(16000, CFG, np.random.default_rng(2026), mode=Mode.TEM01)
    signs = np.sign([a.position[0] for a in atoms])
    n_pairs = len(signs) // 2
    frac = float(np.mean(signs[0:2 * n_pairs:2] != signs[1:2 * n_pairs:2]))
    ok = n_pairs >= 1000 and abs(frac - 0.50) < 0.05
    _report(capsys, 9, ok, f"different-lobe fraction {frac:.3f} over {n_pairs} pairs "
                   f"(target 0.50 +- 0.05, >= 1000 pairs)")


def test_criterion_10_detection_chain(capsys):
    det = CFG.detection
    rng = np.random.default_rng(10)

    # Poisson statistics of a background-only trace
    bg = generate_trace(lambda t: np.zeros_like(np.asarray(t, float)),
                        40.0, det, rng, rate_bound=0.0)
    dispersion = bg.counts.var() / bg.counts.mean()

    # background level in 1 ms bins
    det_ms = ExperimentConfig().detection.__class__(
        detection_efficiency=det.detection_efficiency,
        background_rate=det.background_rate, bin_width=1e-3)
    bg_ms = generate_trace(lambda t: np.zeros_like(np.asarray(t, float)),
                           40.0, det_ms, rng, rate_bound=0.0)
    per_ms = bg_ms.counts.mean()

    # atom-number step reconstruction on synthesized truth
    single = 6.5e5
    duration, n_traces, correct = 10.0, 150, 0
    guard = 10  # bins around each true transition excluded from comparison
    for _ in range(n_traces):
        n0 = int(rng.integers(0, 3))
        losses = np.sort(rng.uniform(0.8, 9.2, n0))

        def rate_fn(t, losses=losses):
            t = np.asarray(t, float)
            return single * (t[:, None] < losses[None, :]).sum(axis=1)

        trace = generate_trace(rate_fn, duration, det, rng,
                               rate_bound=max(n0, 1) * single)
        track = detect_atom_number(trace, det, det.detection_efficiency * single)
        n_bins = len(trace.counts)
        mids = (np.arange(n_bins) + 0.5) * det.bin_width
        truth = (mids[:, None] < losses[None, :]).sum(axis=1)
        detected = np.zeros(n_bins, int)
        for t_cp, level in track.change_points:
            detected[mids >= t_cp] = level
        mask = np.ones(n_bins, bool)
        for t_ev in np.concatenate(([0.0], losses)):
            i = int(t_ev / det.bin_width)
            mask[max(i - guard, 0):i + guard + 1] = False
        if np.array_equal(detected[mask], truth[mask]):
            correct += 1
    accuracy = correct / n_traces

    # two parked atoms double the excess rate of one
    def parked(n_atoms):
        tr = generate_trace(
            lambda t: np.full_like(np.asarray(t, float), n_atoms * single),
            40.0, det, rng, rate_bound=n_atoms * single)
        return tr.counts.mean() / det.bin_width - det.background_rate

    ratio = parked(2) / parked(1)

    ok = (abs(dispersion - 1.0) < 0.1 and abs(per_ms - 5.0) < 0.3
          and accuracy >= 0.99 and abs(ratio - 2.0) < 0.1)
    _report(capsys, 10, ok, f"dispersion {dispersion:.3f} (1.0 +- 0.1); "
                    f"background {per_ms:.2f}/ms (5.0 +- 0.3); "
                    f"step accuracy {accuracy:.3f} (>= 0.99); "
                    f"two-atom excess ratio {ratio:.3f} (2.0 +- 0.1)")


def test_criterion_11_numerical_hygiene(capsys):
    from cavitybelt.dynamics import AtomState, integrate

    lat = LatticeConfiguration(sw_on=True, ic_on=True, guide_on=True)
    kB = CFG.constants.boltzmann_constant
    m = CFG.constants.atom_mass
    v0 = math.sqrt(kB * 60e-6 / m)
    atom = AtomState(np.array([20e-9, 20e-9, 40e-9]),
                     np.array([v0, 0.3 * v0, 0.2 * v0]))

    def energy(a):
        return (0.5 * m * float(a.velocity @ a.velocity)
                + potential(Position(*a.position), lat, CFG))

    e0 = energy(atom)
    # normalize to the energy above the central well bottom
    scale = abs(e0 - potential(Position(0.0, 0.0, 0.0), lat, CFG))
    # the timestep must resolve the stiffest (axial, ~680 kHz) mode; the
    # energy error of the symplectic step oscillates, so take the worst of
    # 20 checkpoints rather than the endpoint value
    drift = 0.0
    for _ in range(20):
        atom = integrate(atom, 0.0, 2.5e-9, 50_000, lat, False, CFG,
                         friction=False, recoil=False, hazard=False)
        drift = max(drift, abs(energy(atom) - e0) / scale)

    rng = np.random.default_rng(11)
    pts = rng.uniform(-20e-6, 20e-6, (100, 3))
    fs = np.array([force(Position(*p), lat, CFG) for p in pts])
    f_max = float(np.max(np.linalg.norm(fs, axis=1)))
    h = 3e-11
    worst = 0.0
    for p, f in zip(pts, fs):
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = h
            fd = -(potential(Position(*(p + dp)), lat, CFG)
                   - potential(Position(*(p - dp)), lat, CFG)) / (2 * h)
            ref = max(float(np.linalg.norm(f)), 1e-2 * f_max)
            worst = max(worst, abs(f[ax] - fd) / ref)

    ok = drift < 1e-4 and worst < 1e-6
    _report(capsys, 11, ok, f"energy drift {drift:.2e} over 1e6 steps (< 1e-4); "
                    f"force vs finite differences worst {worst:.2e} (< 1e-6)")
