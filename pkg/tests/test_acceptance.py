"""Acceptance criteria, one test each, with the stated tolerances and runtime limits.

Every criterion prints a single ``PASS``/``FAIL`` line (also collected into the
pytest terminal summary). Run directly with ``python3 tests/test_acceptance.py``
to get just those lines.
"""

import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles.generate import heterodyne_mc  # noqa: E402
from qpsk_receiver.bounds import helstrom_bound, heterodyne_limit  # noqa: E402
from qpsk_receiver.calibration import (  # noqa: E402
    FringeFit,
    FringeSample,
    fit_fringe,
    hwp_angle_for_ratio,
    visibility_from_extrema,
)
from qpsk_receiver.model import (  # noqa: E402
    OUTCOMES,
    Alphabet,
    ReceiverConfig,
    click_intensities,
    exact_error_probability,
    joint_likelihood,
)
from qpsk_receiver.montecarlo import simulate  # noqa: E402
from qpsk_receiver.optimize import curve, optimize_displacements, optimize_splitting  # noqa: E402

RESULTS: list[str] = []
CRITERIA = {}


def criterion(number, title, runtime_limit):
    def register(fn):
        CRITERIA[number] = (title, runtime_limit, fn)
        return fn

    return register


def evaluate(number):
    """Run one criterion; its runtime limit is part of passing."""
    title, limit, fn = CRITERIA[number]
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail} ({elapsed:.2f} s, limit {limit:g} s)"
    print(line)
    RESULTS.append(line)
    return ok, line


def p_opt(n, **kw):
    return optimize_displacements(ReceiverConfig.build(n, **kw)).p_error


# --- criteria ---------------------------------------------------------------


@criterion(1, "heterodyne crossover", 1.0)
def crossover():
    p2, p4 = p_opt(2.0), p_opt(4.0)
    h2, h4 = heterodyne_limit(2.0), heterodyne_limit(4.0)
    return p2 > h2 and p4 < h4, f"P_E(2)={p2:.5g} > {h2:.5g}, P_E(4)={p4:.5g} < {h4:.5g}"


@criterion(2, "splitting-ratio convergence", 30.0)
def splitting():
    hi = optimize_splitting(Alphabet.from_mean_photon_number(10.0)).split
    lo = optimize_splitting(Alphabet.from_mean_photon_number(0.05)).split
    ok_hi = np.all(np.abs(np.array(hi) - (0.4, 0.2, 0.4)) <= 0.03)
    ok_lo = np.all(np.abs(np.array(lo) - 1 / 3) <= 0.03)
    fmt = lambda r: "{" + ", ".join(f"{x:.4f}" for x in r) + "}"  # noqa: E731
    return ok_hi and ok_lo, f"R(10)={fmt(hi)}, R(0.05)={fmt(lo)}"


@criterion(3, "displacement-ratio ordering and convergence", 10.0)
def ratios():
    r1 = optimize_displacements(ReceiverConfig.build(1.0)).ratios
    r15 = optimize_displacements(ReceiverConfig.build(15.0)).ratios
    ok = r1[1] > r1[0] and r1[1] > r1[2] and all(abs(r - 1) <= 0.05 for r in r15)
    return ok, f"ratios(1)={tuple(round(r, 4) for r in r1)}, ratios(15)={tuple(round(r, 5) for r in r15)}"


@criterion(4, "visibility floor", 30.0)
def visibility_floor():
    ns = np.geomspace(0.1, 20.0, 100)
    rows = curve(ns, ReceiverConfig.build(1.0, visibility=0.995, dark_mean=1e-6))
    p = np.array([r.p_error for r in rows])
    het = np.array([heterodyne_limit(n) for n in ns])
    ok = bool(np.all(p > het)) and p[-1] > p.min()
    return ok, f"min(P_E/P_het)={np.min(p / het):.4g}, P_E(20)={p[-1]:.4g} > min {p.min():.4g}"


@criterion(5, "near-ideal visibility stays above the limit", 1.0)
def near_ideal():
    p = p_opt(15.0, visibility=0.99998)
    h = heterodyne_limit(15.0)
    return p > h, f"P_E(15)={p:.4g} > P_het={h:.4g}"


@criterion(6, "ratio to the limit at <n>=6", 5.0)
def black_circle():
    ratio = p_opt(6.0, efficiency=0.98, visibility=0.9998, dark_mean=1e-6) / heterodyne_limit(6.0)
    return abs(ratio - 0.80) <= 0.03, f"P_E/P_het={ratio:.4f} (target 0.80 +/- 0.03)"


@criterion(7, "experimental-parameter prediction", 5.0)
def experimental():
    p = p_opt(10.0, efficiency=0.778, visibility=(0.991, 0.990, 0.993), dark_mean=1e-6)
    return abs(p / 3.6e-2 - 1) <= 0.2, f"P_E(10)={p:.4g} (target 3.6e-2 +/- 20%)"


@criterion(8, "bounds ordering and heterodyne sampling check", 60.0)
def bounds():
    grid = np.linspace(0.0, 20.0, 200)
    ordered = all(helstrom_bound(n) <= heterodyne_limit(n) for n in grid)
    at_zero = helstrom_bound(0.0) == pytest.approx(0.75, abs=1e-15) and heterodyne_limit(0.0) == 0.75
    worst = 0.0
    for n in (1, 3, 6, 10):
        mc = heterodyne_mc(n, seed=777 + n)
        worst = max(worst, abs(heterodyne_limit(n) - mc["p"]) / mc["se"])
    return ordered and at_zero and worst < 3, f"ordered={ordered}, zero={at_zero}, max |z|={worst:.2f} (< 3)"


def _random_config(rng):
    return ReceiverConfig.build(
        rng.uniform(0.2, 12),
        split=tuple(rng.dirichlet([4, 2, 4])),
        ratios=tuple(rng.uniform(0.7, 2.5, 3)),
        efficiency=tuple(rng.uniform(0.6, 1, 3)),
        dark_mean=tuple(10 ** rng.uniform(-7, -3, 3)),
        visibility=tuple(rng.uniform(0.97, 1, 3)),
    )


@criterion(9, "Monte Carlo agrees with exact enumeration", 120.0)
def monte_carlo():
    rng = np.random.default_rng(2025)
    within = 0
    for i in range(20):
        cfg = _random_config(rng)
        rep = simulate(cfg, 1_000_000, seed=i)
        exact = exact_error_probability(cfg)
        sigma = math.sqrt(exact * (1 - exact) / rep.trials)
        within += abs(rep.p_error_estimate - exact) < 4 * sigma
    cfg = _random_config(rng)
    a = json.dumps(simulate(cfg, 100_000, seed=42).to_dict())
    b = json.dumps(simulate(cfg, 100_000, seed=42, workers=2).to_dict())
    return within >= 19 and a == b, f"{within}/20 within 4 sigma, reproducible={a == b}"


def _fringe(R, a, f, gamma, offset, angles, phases, noise=0.0, rng=None):
    """Samples built from the superposed complex fields, independent of the package."""
    samples = []
    for phase in phases:
        c, s = np.cos(2 * np.radians(angles - offset)), np.sin(2 * np.radians(angles - offset))
        y = np.abs(math.sqrt(R) * a * c - f * math.sqrt(R) * a * s * np.exp(1j * (gamma + phase))) ** 2
        if noise:
            y = y * (1 + noise * rng.standard_normal(len(y)))
        samples += [FringeSample(float(t), float(max(v, 0.0)), phase) for t, v in zip(angles, y)]
    return samples


@criterion(10, "calibration round trip", 10.0)
def calibration():
    rng = np.random.default_rng(10)
    phases = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
    err = 0.0
    for _ in range(5):
        R, a, f = rng.uniform(0.1, 0.6), rng.uniform(5, 50), rng.uniform(1.2, 15)
        gamma, offset = rng.uniform(-math.pi, math.pi), rng.uniform(0, 360)
        angles = np.linspace(offset - 45, offset + 45, 61)
        fit = fit_fringe(_fringe(R, a, f, gamma, offset, angles, phases))
        err = max(err, abs(fit.offset - offset), abs(fit.field_ratio / f - 1), abs(math.remainder(fit.rel_phase - gamma, 2 * math.pi)))
    angles = np.linspace(200, 290, 91)
    fit = fit_fringe(_fringe(0.4, 100.0, 8.9, 0.0, 247.2, angles, (0.0,)), field_ratio=8.9, rel_phase=0.0)
    err = max(err, abs(fit.offset - 247.2))
    noisy = max(
        abs(fit_fringe(_fringe(0.4, 100.0, 8.9, 0.03, 247.2, angles, phases, 0.01, rng)).offset - 247.2) for _ in range(3)
    )
    solver = 0.0
    for _ in range(100):
        f, s, offset = 10 ** rng.uniform(-1, 2), 10 ** rng.uniform(-2, 2), rng.uniform(0, 360)
        fake = FringeFit(offset, offset + rng.choice([-10.0, 10.0]), f, 0.0, 1.0, 0.0)
        theta = hwp_angle_for_ratio(fake, s)
        solver = max(solver, abs(f * abs(math.tan(2 * math.radians(theta - offset))) / s - 1))
    vis = 0.0
    for xi in (0.991, 0.990, 0.993):
        n = click_intensities(ReceiverConfig.build(10.0, efficiency=0.778, visibility=xi))[0]
        vis = max(vis, abs(visibility_from_extrema(n[0], n[2]) - xi))
    ok = err < 1e-6 and noisy < 0.05 and solver < 1e-9 and vis < 1e-12
    return ok, f"noiseless err={err:.1e}, noisy offset err={noisy:.3f} deg, solver rel err={solver:.1e}, visibility err={vis:.1e}"


@criterion(11, "normalization and symmetry", 5.0)
def normalization():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        cfg = _random_config(rng)
        for k in range(4):
            worst = max(worst, abs(math.fsum(joint_likelihood(cfg, k, o) for o in OUTCOMES) - 1))
    sym = optimize_displacements(ReceiverConfig.build(2.0, efficiency=0.9, visibility=0.99, dark_mean=1e-5))
    left = optimize_displacements(ReceiverConfig.build(2.0, visibility=(0.99, 0.995, 0.97)))
    right = optimize_displacements(ReceiverConfig.build(2.0, visibility=(0.97, 0.995, 0.99)))
    mirrored = (
        sym.beta_mags[0] == sym.beta_mags[2]
        and abs(left.p_error - right.p_error) < 1e-12
        and np.allclose(left.beta_mags, right.beta_mags[::-1], rtol=1e-5)
    )
    zero = exact_error_probability(ReceiverConfig.build(1.0, efficiency=0.8, visibility=0.97).with_amplitude(0.0))
    ok = worst <= 1e-12 and mirrored and zero == 0.75
    return ok, f"max normalization err={worst:.1e}, mirror-symmetric optima={mirrored}, P_E(|alpha|=0)={zero}"


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, line = evaluate(number)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate(n)[0] for n in sorted(CRITERIA)]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
