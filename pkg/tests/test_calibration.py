import math

import numpy as np
import pytest

from qpsk_receiver.calibration import (
    FitError,
    FringeFit,
    FringeSample,
    field_ratio_at,
    fit_fringe,
    fringe_intensity,
    hwp_angle_for_ratio,
    normalized_fringe_intensity,
    state_prep_diagnostic,
    visibility_from_extrema,
)
from qpsk_receiver.model import ReceiverConfig
from qpsk_receiver.optimize import optimize_displacements

PHASES = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)


def field_intensity(R, a, b, gamma, delta_angle):
    """Transmitted power from the superposed fields (independent of the package)."""
    c, s = np.cos(2 * delta_angle), np.sin(2 * delta_angle)
    field = math.sqrt(R) * a * c - b * s * np.exp(1j * gamma)
    return np.abs(field) ** 2


def make_samples(R, a, b, gamma, offset_deg, angles, phases=PHASES, noise=0.0, rng=None, normalize=False):
    samples = []
    for phase in phases:
        y = field_intensity(R, a, b, gamma + phase, np.radians(angles - offset_deg))
        if normalize:
            y = y / (R * a * a)
        if noise:
            y = y * (1 + noise * rng.standard_normal(len(y)))
        samples += [FringeSample(float(t), float(max(v, 0.0)), phase) for t, v in zip(angles, y)]
    return samples


# --- forward model ----------------------------------------------------------


def test_pass_through():
    assert fringe_intensity(0.4, 3.0, 5.0, 0.7, 0.0) == pytest.approx(0.4 * 9)


def test_destructive_interference():
    R, a, b = 0.4, 3.0, 5.0
    delta = 0.5 * math.atan(math.sqrt(R) * a / b)
    assert fringe_intensity(R, a, b, 0.0, delta) == pytest.approx(0.0, abs=1e-12)


def test_forward_model_against_field_sum():
    R, a, b, gamma = 0.4, math.sqrt(10.0), 8.9 * math.sqrt(4.0), 0.03
    angles = np.radians(np.array([200.0, 230.0, 247.2, 255.0, 280.0]) - 247.2)
    np.testing.assert_allclose(
        fringe_intensity(R, a, b, gamma, angles), field_intensity(R, a, b, gamma, angles), rtol=1e-12, atol=1e-12
    )
    np.testing.assert_allclose(
        normalized_fringe_intensity(b / (math.sqrt(R) * a), gamma, angles),
        field_intensity(R, a, b, gamma, angles) / (R * a * a),
        rtol=1e-12,
    )


# --- fit_fringe -------------------------------------------------------------


def test_single_fringe_offset_recovery():
    angles = np.linspace(200, 290, 91)
    R, a = 0.4, 100.0
    b = 8.9 * math.sqrt(R) * a
    samples = make_samples(R, a, b, 0.0, 247.2, angles, phases=(0.0,))
    fit = fit_fringe(samples, field_ratio=8.9, rel_phase=0.0)
    assert fit.offset == pytest.approx(247.2, abs=1e-6)
    assert fit.scale == pytest.approx(R * a * a, rel=1e-9)
    assert fit.residual_rms < 1e-10
    # the fitted model passes the signal unchanged at the offset
    assert float(fit.normalized_intensity(fit.offset)) == pytest.approx(1.0, abs=1e-12)


def test_multi_phase_round_trip_random():
    rng = np.random.default_rng(21)
    for _ in range(10):
        R = rng.uniform(0.1, 0.6)
        a = rng.uniform(5, 50)
        f = rng.uniform(1.2, 15)
        gamma = rng.uniform(-math.pi, math.pi)
        offset = rng.uniform(0, 360)
        angles = np.linspace(offset - 45, offset + 45, 61)
        samples = make_samples(R, a, f * math.sqrt(R) * a, gamma, offset, angles)
        fit = fit_fringe(samples)
        assert fit.offset == pytest.approx(offset, abs=1e-6)
        assert fit.field_ratio == pytest.approx(f, rel=1e-6)
        assert math.cos(fit.rel_phase - gamma) == pytest.approx(1.0, abs=1e-12)
        assert fit.scale == pytest.approx(R * a * a, rel=1e-6)


def test_input_normalized_round_trip_with_weak_lo():
    # with intensities already in units of R|a|^2, f < 1 is identifiable too
    angles = np.linspace(10, 100, 61)
    samples = make_samples(0.3, 10.0, 0.5 * math.sqrt(0.3) * 10.0, 1.1, 55.0, angles, normalize=True)
    fit = fit_fringe(samples, normalization="input")
    assert fit.field_ratio == pytest.approx(0.5, rel=1e-6)
    assert fit.rel_phase == pytest.approx(1.1, abs=1e-6)
    assert fit.offset == pytest.approx(55.0, abs=1e-6)


def test_mirror_ambiguity_reports_strong_lo():
    # a weak LO fitted with a free scale maps to the equivalent f >= 1 solution
    angles = np.linspace(10, 100, 61)
    R, a, f = 0.3, 10.0, 0.5
    samples = make_samples(R, a, f * math.sqrt(R) * a, 1.1, 55.0, angles)
    fit = fit_fringe(samples)
    assert fit.field_ratio == pytest.approx(1 / f, rel=1e-6)
    np.testing.assert_allclose(
        [fit.scale * float(fit.normalized_intensity(s.hwp_angle, s.input_phase)) for s in samples],
        [s.intensity for s in samples],
        rtol=1e-8,
        atol=1e-9,
    )


def test_reference_phase_shifts_gamma():
    angles = np.linspace(200, 290, 46)
    samples = make_samples(0.4, 20.0, 8.0 * math.sqrt(0.4) * 20.0, 0.4, 247.2, angles)
    fit0 = fit_fringe(samples)
    fit1 = fit_fringe(samples, reference_phase=math.pi / 2)
    assert math.cos(fit1.rel_phase - (fit0.rel_phase + math.pi / 2)) == pytest.approx(1.0, abs=1e-10)
    assert fit1.offset == pytest.approx(fit0.offset, abs=1e-8)


def test_noisy_fringe_offset_within_tolerance():
    rng = np.random.default_rng(8)
    angles = np.linspace(200, 290, 91)
    R, a = 0.4, 100.0
    for _ in range(5):
        samples = make_samples(R, a, 8.9 * math.sqrt(R) * a, 0.03, 247.2, angles, noise=0.01, rng=rng)
        fit = fit_fringe(samples)
        assert abs(fit.offset - 247.2) < 0.05
        assert fit.residual_rms > 0


def test_nulling_angle_is_fringe_minimum():
    angles = np.linspace(200, 290, 46)
    samples = make_samples(0.4, 20.0, 8.9 * math.sqrt(0.4) * 20.0, math.pi, 247.2, angles)
    fit = fit_fringe(samples)
    dense = np.linspace(fit.offset - 45, fit.offset + 45, 200001)
    curve = fit.normalized_intensity(dense)
    assert dense[np.argmin(curve)] == pytest.approx(fit.nulling_angle, abs=1e-3)
    assert fit.nulling_angle < fit.offset
    assert fit.visibility == pytest.approx(1.0, abs=1e-12)


def test_single_fringe_all_free_is_rejected():
    angles = np.linspace(200, 290, 46)
    samples = make_samples(0.4, 20.0, 8.0 * math.sqrt(0.4) * 20.0, 0.3, 247.2, angles, phases=(0.0,))
    with pytest.raises(FitError) as info:
        fit_fringe(samples)
    assert "singular_values" in info.value.diagnostics


def test_constant_intensity_is_a_fit_failure():
    samples = [FringeSample(t, 5.0) for t in np.linspace(0, 90, 20)]
    with pytest.raises(FitError):
        fit_fringe(samples)


def test_degenerate_sampling_rejected():
    with pytest.raises(ValueError, match="equal"):
        fit_fringe([FringeSample(10.0, float(i)) for i in range(10)])
    with pytest.raises(ValueError, match="quarter"):
        fit_fringe([FringeSample(float(t), 1.0 + t) for t in np.linspace(0, 20, 10)])
    with pytest.raises(ValueError, match="samples"):
        fit_fringe([FringeSample(float(t), 1.0) for t in range(5)])
    with pytest.raises(ValueError):
        FringeSample(1.0, -0.5)
    with pytest.raises(ValueError):
        fit_fringe([FringeSample(float(t), 1.0) for t in range(10)], normalization="peak")


# --- visibility -------------------------------------------------------------


def test_visibility_trivial_cases():
    assert visibility_from_extrema(0.0, 3.0) == 1.0
    assert visibility_from_extrema(2.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        visibility_from_extrema(0.0, 0.0)
    with pytest.raises(ValueError):
        visibility_from_extrema(2.0, 1.0)


@pytest.mark.parametrize("xi", [0.991, 0.990, 0.993, 0.9998])
def test_visibility_from_click_model_extrema(xi):
    arm = dict(efficiency=0.778, dark_mean=0.0, visibility=xi)
    cfg = ReceiverConfig.build(10.0, ratios=1.0, **arm)
    from qpsk_receiver.model import click_intensities

    n = click_intensities(cfg)[0]  # arm 1: state 0 nulled, state 2 brightest
    assert visibility_from_extrema(n[0], n[2]) == pytest.approx(xi, abs=1e-12)


def test_visibility_amplitude_correction():
    xi, r = 0.991, 1.03
    a, b = 1.0, r
    i_min = a * a + b * b - 2 * xi * a * b
    i_max = a * a + b * b + 2 * xi * a * b
    assert visibility_from_extrema(i_min, i_max) < xi
    assert visibility_from_extrema(i_min, i_max, amplitude_ratio=r) == pytest.approx(xi, abs=1e-12)
    with pytest.raises(ValueError):
        visibility_from_extrema(i_min, i_max, amplitude_ratio=0.0)


# --- wave-plate angles ------------------------------------------------------


def make_fit(offset, f, psi_side=1.0):
    return FringeFit(
        offset=offset,
        nulling_angle=offset + psi_side * 10.0,
        field_ratio=f,
        rel_phase=0.0 if psi_side > 0 else math.pi,
        visibility=1.0,
        residual_rms=0.0,
    )


def test_angle_solver_random_cases():
    rng = np.random.default_rng(12)
    for _ in range(100):
        f = 10 ** rng.uniform(-1, 2)
        s = 10 ** rng.uniform(-2, 2)
        side = rng.choice([-1.0, 1.0])
        fit = make_fit(rng.uniform(0, 360), f, side)
        theta = hwp_angle_for_ratio(fit, s)
        assert f * abs(math.tan(2 * math.radians(theta - fit.offset))) == pytest.approx(s, rel=1e-9)
        assert field_ratio_at(fit, theta) == pytest.approx(s, rel=1e-9)
        assert np.sign(theta - fit.offset) == side


def test_angle_solver_limits():
    fit = make_fit(247.2, 8.9)
    assert hwp_angle_for_ratio(fit, 1e-12) == pytest.approx(247.2, abs=1e-9)
    assert hwp_angle_for_ratio(fit, 8.9) == pytest.approx(247.2 + 22.5, abs=1e-12)
    assert hwp_angle_for_ratio(make_fit(247.2, 8.9, -1.0), 8.9) == pytest.approx(247.2 - 22.5, abs=1e-12)
    with pytest.raises(ValueError):
        hwp_angle_for_ratio(fit, 0.0)


def test_angles_for_optimal_ratios_land_on_the_fringe():
    angles = np.linspace(200, 290, 46)
    R, a, f = 0.4, 30.0, 8.9
    fit = fit_fringe(make_samples(R, a, f * math.sqrt(R) * a, math.pi, 247.2, angles))
    for n in (1.0, 2.0, 3.0):
        ratio = optimize_displacements(ReceiverConfig.build(n)).ratios[0]
        s = math.sqrt(ratio)
        theta = hwp_angle_for_ratio(fit, s)
        # after the plate the LO/signal power ratio is the optimal displacement ratio
        t = math.tan(2 * math.radians(theta - 247.2))
        assert (f * t) ** 2 == pytest.approx(ratio, rel=1e-6)
        # and the normalized fringe there is |cos - S sin ...|^2 evaluated directly
        expected = field_intensity(R, a, f * math.sqrt(R) * a, math.pi, math.radians(theta - 247.2)) / (R * a * a)
        assert float(fit.normalized_intensity(theta)) == pytest.approx(float(expected), rel=1e-6)
    # larger <n> needs a ratio closer to 1, so the angle moves towards the null
    thetas = [hwp_angle_for_ratio(fit, math.sqrt(optimize_displacements(ReceiverConfig.build(n)).ratios[0])) for n in (1.0, 2.0, 3.0)]
    assert thetas[0] < thetas[1] < thetas[2] < fit.offset
    assert all(abs(t - fit.nulling_angle) < abs(thetas[0] - fit.nulling_angle) + 1e-12 for t in thetas)


# --- state preparation ------------------------------------------------------


def at_null(f, gamma, eps=0.0):
    delta = 0.25 * math.atan2(f * math.cos(gamma), (f * f - 1) / 2)
    return [float(normalized_fringe_intensity(f, gamma + k * math.pi / 2 + (eps if k % 2 else 0.0), delta)) for k in range(4)]


def test_state_prep_ideal():
    report = state_prep_diagnostic(at_null(8.9, math.pi))
    assert report.difference == pytest.approx(0.0, abs=1e-12)
    assert report.passed
    assert report.visibility == pytest.approx(1.0, abs=1e-9)


def test_state_prep_detects_phase_error():
    f, gamma, eps = 8.9, math.pi, math.radians(2.0)
    report = state_prep_diagnostic(at_null(f, gamma, eps), threshold=1e-3)
    # forward model: I(g + 3pi/2 + e) - I(g + pi/2 + e) = -4 f s c sin(g + e)
    delta = 0.25 * math.atan2(f * math.cos(gamma), (f * f - 1) / 2)
    s, c = math.sin(2 * delta), math.cos(2 * delta)
    assert report.difference == pytest.approx(-4 * f * s * c * math.sin(gamma + eps), rel=1e-9)
    assert report.difference != 0.0
    assert not report.passed


def test_state_prep_mapping_input_and_missing_phase():
    values = at_null(8.9, math.pi)
    mapping = {k * math.pi / 2: v for k, v in enumerate(values)}
    assert state_prep_diagnostic(mapping) == state_prep_diagnostic(values)
    del mapping[math.pi]
    with pytest.raises(ValueError, match="missing"):
        state_prep_diagnostic(mapping)
    with pytest.raises(ValueError):
        state_prep_diagnostic(values[:3])
