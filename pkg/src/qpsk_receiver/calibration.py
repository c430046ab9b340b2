"""Wave-plate calibration of the displacement in one arm.

In each arm a half-wave plate at angle ``theta`` mixes the signal (V) and the
local oscillator (H) ahead of a polarizing beam splitter. With
``Delta = theta - delta`` the transmitted intensity is

    I = R|a|^2 cos^2(2 Delta) + |b|^2 sin^2(2 Delta)
        - 2 sqrt(R)|a||b| sin(2 Delta) cos(2 Delta) cos(gamma)

where ``delta`` is the plate offset that passes only the signal and ``gamma``
the signal/LO relative phase. Dividing by ``R|a|^2`` leaves the field ratio
``f = |b| / (sqrt(R)|a|)``. Angles are degrees at the interface and radians
inside.

Identifiability. Expanded, the normalized model is
``(1+f^2)/2 + (1-f^2)/2 cos(4 Delta) - f cos(gamma) sin(4 Delta)``, a single
sinusoid in ``4 theta``. One fringe therefore pins three numbers, so at most
three of (delta, f, gamma, scale) can be fitted from it. Fringes recorded for
several input phases share delta, f and scale and shift gamma by the input
phase, which makes all four recoverable. Two discrete ambiguities remain and
are fixed by convention: with a free scale, ``(delta + 45deg, 1/f, scale f^2,
gamma + pi)`` fits equally well, and ``f >= 1`` (LO at least as strong as the
signal) is reported; a lone fringe with free gamma also admits a mirror
solution with ``cos(gamma)`` negated, and ``cos(gamma) >= 0`` is reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares

QUARTER_FRINGE_DEG = 22.5  # intensity period in theta is 90 deg
MIN_SAMPLES = 8
_LOG_LIMIT = 60.0


class FitError(RuntimeError):
    """Fringe fit failed; ``diagnostics`` holds solver details."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FringeSample:
    hwp_angle: float  # degrees
    intensity: float
    input_phase: float = 0.0  # radians

    def __post_init__(self):
        if not self.intensity >= 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity!r}")


@dataclass(frozen=True)
class FringeFit:
    offset: float  # delta, degrees
    nulling_angle: float  # psi, degrees
    field_ratio: float  # f
    rel_phase: float  # gamma at the reference input phase, radians
    visibility: float
    residual_rms: float  # in units of the pass-through level
    scale: float = 1.0  # fitted pass-through level (intensity at Delta = 0)
    reference_phase: float = 0.0

    def normalized_intensity(self, hwp_angle_deg, input_phase: float | None = None):
        phase = self.reference_phase if input_phase is None else input_phase
        delta = np.radians(np.asarray(hwp_angle_deg) - self.offset)
        return normalized_fringe_intensity(
            self.field_ratio, self.rel_phase + phase - self.reference_phase, delta
        )


def fringe_intensity(R, alpha_mag, beta_mag, gamma, delta_angle):
    """Intensity after the PBS; ``delta_angle`` is ``theta - delta`` in radians."""
    c, s = np.cos(2 * delta_angle), np.sin(2 * delta_angle)
    sig = np.sqrt(R) * alpha_mag
    return sig**2 * c**2 + beta_mag**2 * s**2 - 2 * sig * beta_mag * s * c * np.cos(gamma)


def normalized_fringe_intensity(f, gamma, delta_angle):
    """Intensity after the PBS in units of the arm's signal power ``R|a|^2``."""
    c, s = np.cos(2 * delta_angle), np.sin(2 * delta_angle)
    return c**2 + f**2 * s**2 - 2 * f * s * c * np.cos(gamma)


def _nulling_delta(f: float, gamma: float) -> float:
    """Delta (radians) of the fringe minimum, in (-pi/4, pi/4]."""
    return 0.25 * math.atan2(f * math.cos(gamma), (f * f - 1.0) / 2.0)


def visibility_from_extrema(
    i_min: float, i_max: float, amplitude_ratio: float | None = None
) -> float:
    """Fringe visibility ``(I_max - I_min) / (I_max + I_min)``.

    The extrema visibility equals the interference coefficient only when the
    two fields have equal amplitude at the comparison point. Passing their
    ``amplitude_ratio`` r undoes the power-imbalance factor ``2r / (1 + r^2)``.
    """
    if not (0.0 <= i_min <= i_max):
        raise ValueError(f"need 0 <= I_min <= I_max, got {i_min!r}, {i_max!r}")
    if i_max <= 0.0:
        raise ValueError("I_max must be > 0")
    v = (i_max - i_min) / (i_max + i_min)
    if amplitude_ratio is not None:
        if amplitude_ratio <= 0:
            raise ValueError(f"amplitude_ratio must be > 0, got {amplitude_ratio!r}")
        v *= (1.0 + amplitude_ratio**2) / (2.0 * amplitude_ratio)
    return min(max(v, 0.0), 1.0)


def _wrap_to(angle_deg: float, center_deg: float, period: float = 90.0) -> float:
    return center_deg + (angle_deg - center_deg + period / 2) % period - period / 2


def _wrap_phase(x: float) -> float:
    return math.atan2(math.sin(x), math.cos(x))


def _has_contrast(theta: np.ndarray, y: np.ndarray, offsets: np.ndarray) -> bool:
    for w in np.unique(offsets):
        sel = offsets == w
        basis = np.column_stack([np.ones(sel.sum()), np.cos(4 * theta[sel]), np.sin(4 * theta[sel])])
        coef, *_ = np.linalg.lstsq(basis, y[sel], rcond=None)
        if math.hypot(coef[1], coef[2]) > 1e-6 * max(abs(coef[0]), 1e-300):
            return True
    return False


def fit_fringe(
    samples: Sequence[FringeSample],
    *,
    reference_phase: float = 0.0,
    normalization: str = "pass-through",
    field_ratio: float | None = None,
    rel_phase: float | None = None,
    max_nfev: int = 5000,
) -> FringeFit:
    """Least-squares fit of the wave-plate fringe model.

    ``normalization="pass-through"`` fits an overall scale (the intensity at
    ``Delta = 0``); ``"input"`` means the intensities are already divided by
    the arm's signal power and the scale is fixed at 1. ``field_ratio`` and
    ``rel_phase`` hold those parameters fixed when known. Samples may mix
    input phases; ``gamma`` is reported for ``reference_phase``.
    """
    if normalization not in ("pass-through", "input"):
        raise ValueError(f"normalization must be 'pass-through' or 'input', got {normalization!r}")
    if len(samples) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    angles = np.array([s.hwp_angle for s in samples], dtype=float)
    y = np.array([s.intensity for s in samples], dtype=float)
    offsets = np.array([s.input_phase - reference_phase for s in samples], dtype=float)
    span = angles.max() - angles.min()
    if span == 0:
        raise ValueError("degenerate sampling: all wave-plate angles are equal")
    if span <= QUARTER_FRINGE_DEG:
        raise ValueError(f"samples span {span:.3g} deg; need more than a quarter fringe (22.5 deg)")
    theta = np.radians(angles)
    if not _has_contrast(theta, y, offsets):
        raise FitError("no fringe contrast: intensity is constant, the offset is unidentifiable")

    free = {
        "delta": True,
        "f": field_ratio is None,
        "gamma": rel_phase is None,
        "scale": normalization == "pass-through",
    }
    fixed = {"f": field_ratio, "gamma": rel_phase, "scale": 1.0}
    names = [k for k, v in free.items() if v]

    # f and scale are searched on a log scale so the problem is unconstrained;
    # the clamp only matters when the solver drifts along a degenerate direction
    def bounded_exp(v):
        return math.exp(min(max(v, -_LOG_LIMIT), _LOG_LIMIT))

    def unpack(p):
        vals = dict(zip(names, p))
        return (
            vals["delta"],
            bounded_exp(vals["f"]) if "f" in vals else fixed["f"],
            vals.get("gamma", fixed["gamma"]),
            bounded_exp(vals["scale"]) if "scale" in vals else fixed["scale"],
        )

    def pack(guess):
        logs = {"f": math.log, "scale": math.log}
        return [logs.get(k, float)(guess[k]) for k in names]

    def shape(delta, f, gamma):
        return normalized_fringe_intensity(f, gamma + offsets, theta - delta)

    def residuals(p):
        delta, f, gamma, scale = unpack(p)
        return scale * shape(delta, f, gamma) - y

    starts = _initial_guesses(theta, y, shape, free, fixed)
    solutions = []
    last = None
    for guess in starts:
        res = least_squares(
            residuals, pack(guess), method="lm", x_scale="jac",
            ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=max_nfev,
        )  # fmt: skip
        last = res
        if res.status > 0:
            solutions.append(res)
    if not solutions:
        raise FitError(
            "fringe fit did not converge",
            {"status": last.status, "message": last.message, "nfev": last.nfev},
        )

    best_cost = min(r.cost for r in solutions)
    tol = 1e-9 * max(best_cost, 1e-12 * float(np.sum(y**2)))
    tied = [r for r in solutions if r.cost <= best_cost + tol]
    params = []
    for r in tied:
        delta, f, gamma, scale = unpack(r.x)
        if free["scale"] and free["f"] and f < 1.0:
            delta, f, gamma, scale = delta + math.pi / 4, 1.0 / f, gamma + math.pi, scale * f * f
        params.append((delta, f, _wrap_phase(gamma), scale, r))
    delta, f, gamma, scale, best = max(params, key=lambda t: (math.cos(t[2]), -t[4].cost))

    sv = np.linalg.svd(best.jac, compute_uv=False)
    if sv[-1] <= 1e-7 * sv[0]:
        raise FitError(
            "fit parameters are not identifiable from these samples; "
            "add fringes at other input phases or fix field_ratio / rel_phase",
            {"free": names, "singular_values": sv.tolist()},
        )

    center = 0.5 * (angles.min() + angles.max())
    offset = _wrap_to(math.degrees(delta), center)
    psi = offset + math.degrees(_nulling_delta(f, gamma))
    # rounding can leave an exact null a hair below zero
    i_a = max(float(normalized_fringe_intensity(f, gamma, _nulling_delta(f, gamma))), 0.0)
    i_d = max(float(normalized_fringe_intensity(f, gamma + math.pi, _nulling_delta(f, gamma))), 0.0)
    rms = math.sqrt(2.0 * best.cost / len(y)) / scale
    return FringeFit(
        offset=float(offset),
        nulling_angle=float(psi),
        field_ratio=float(f),
        rel_phase=float(gamma),
        visibility=visibility_from_extrema(i_a, i_d),
        residual_rms=rms,
        scale=float(scale),
        reference_phase=reference_phase,
    )


def _initial_guesses(theta, y, shape, free, fixed):
    """Best (delta, f) grid point for each gamma value, scale solved linearly."""
    deltas = np.radians(np.linspace(-45.0, 45.0, 24, endpoint=False)) + np.mean(theta)
    fs = np.geomspace(0.05, 50.0, 31) if free["f"] else np.array([fixed["f"]])
    gammas = (
        np.linspace(-math.pi, math.pi, 12, endpoint=False)
        if free["gamma"]
        else np.array([fixed["gamma"]])
    )
    d_grid, f_grid = np.meshgrid(deltas, fs, indexing="ij")
    d_col, f_col = d_grid.ravel()[:, None], f_grid.ravel()[:, None]
    starts = []
    for g in gammas:
        m = shape(d_col, f_col, g)  # (grid, samples)
        if free["scale"]:
            scale = (m @ y) / np.einsum("ij,ij->i", m, m)
        else:
            scale = np.full(len(m), fixed["scale"])
        cost = np.sum((scale[:, None] * m - y) ** 2, axis=1)
        cost[scale <= 0] = np.inf
        i = int(np.argmin(cost))
        if np.isfinite(cost[i]):
            starts.append({"delta": d_col[i, 0], "f": f_col[i, 0], "gamma": g, "scale": scale[i]})
    return starts


def hwp_angle_for_ratio(fit: FringeFit, s_target: float) -> float:
    """Wave-plate angle (deg) giving LO/signal field ratio ``s_target`` after the PBS.

    Solves ``f |tan(2 (theta - delta))| = S`` on the side of ``delta`` where the
    nulling angle lies, so ``S = 1`` returns the nulling angle of an ideal fringe.
    """
    if not s_target > 0:
        raise ValueError(f"target ratio must be > 0, got {s_target!r}")
    if not fit.field_ratio > 0:
        raise ValueError(f"field ratio must be > 0, got {fit.field_ratio!r}")
    side = 1.0 if _wrap_to(fit.nulling_angle - fit.offset, 0.0) >= 0 else -1.0
    return fit.offset + side * 0.5 * math.degrees(math.atan(s_target / fit.field_ratio))


def field_ratio_at(fit: FringeFit, hwp_angle_deg: float) -> float:
    """LO/signal field ratio after the PBS at the given plate angle."""
    return fit.field_ratio * abs(math.tan(2.0 * math.radians(hwp_angle_deg - fit.offset)))


@dataclass(frozen=True)
class StatePrepReport:
    difference: float  # I(ref + 3pi/2) - I(ref + pi/2), points B - C
    visibility: float  # from points A (ref) and D (ref + pi)
    threshold: float
    passed: bool


def state_prep_diagnostic(
    intensities: Mapping[float, float] | Sequence[float],
    *,
    reference_phase: float = 0.0,
    threshold: float = 0.02,
) -> StatePrepReport:
    """Check state preparation from intensities recorded at the nulling angle.

    ``intensities`` maps input phase (radians) to intensity, or lists the four
    values for phases 0, pi/2, pi, 3pi/2. For perfectly prepared states the
    pi/2 and 3pi/2 intensities coincide.
    """
    if not isinstance(intensities, Mapping):
        values = list(intensities)
        if len(values) != 4:
            raise ValueError(f"need intensities for all 4 input phases, got {len(values)}")
        intensities = {k * math.pi / 2: v for k, v in enumerate(values)}

    def at(quarter_turns: int) -> float:
        target = reference_phase + quarter_turns * math.pi / 2
        for phase, value in intensities.items():
            if abs(_wrap_phase(phase - target)) < 1e-6:
                return float(value)
        raise ValueError(f"missing intensity for input phase {target % (2 * math.pi):.6g} rad")

    a, c, d, b = at(0), at(1), at(2), at(3)
    diff = b - c
    return StatePrepReport(
        difference=diff,
        visibility=visibility_from_extrema(a, d) if d >= a else 0.0,
        threshold=threshold,
        passed=abs(diff) <= threshold,
    )
