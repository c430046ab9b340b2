"""Displacement and splitting-ratio optimization for the three-arm receiver.

Displacements are searched in the space of displacement ratios
``s_i = |beta_i|^2 / (R_i |alpha|^2)``: a coarse grid scan picks the basin, then
Nelder-Mead on ``log s_i`` polishes it. When arms 1 and 3 are physically
identical the search runs on ``(s_1 = s_3, s_2)`` so the result is exactly
mirror symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .model import (
    Alphabet,
    ReceiverConfig,
    click_intensity_array,
    error_probability_array,
    exact_error_probability,
)

# fine steps where optima live for <n> >~ 1, log tails for low <n> and odd configs
RATIO_GRID = np.unique(
    np.concatenate(
        [
            np.geomspace(0.02, 0.45, 8),
            np.round(np.arange(0.5, 3.0 + 1e-9, 0.05), 10),
            np.geomspace(3.25, 400.0, 14),
        ]
    )
)
# three free arms: a coarser seed grid keeps the scan near 30^3 points
RATIO_GRID_3D = np.unique(
    np.concatenate(
        [
            np.geomspace(0.02, 0.45, 4),
            np.round(np.arange(0.5, 3.0 + 1e-9, 0.125), 10),
            np.geomspace(3.5, 400.0, 5),
        ]
    )
)
_GRID_CHUNK = 20000
_NM_OPTIONS = {"xatol": 1e-9, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000}

DEFAULT_SPLIT = (0.4, 0.2, 0.4)


@dataclass(frozen=True)
class OptimizationResult:
    beta_mags: tuple[float, float, float]
    ratios: tuple[float, float, float]
    split: tuple[float, float, float]
    p_error: float
    evaluations: int

    def apply(self, cfg: ReceiverConfig) -> ReceiverConfig:
        """Return ``cfg`` with this result's split ratios and displacements."""
        arms = tuple(
            replace(arm, split_ratio=r, beta_mag=b)
            for arm, r, b in zip(cfg.arms, self.split, self.beta_mags)
        )
        return replace(cfg, arms=arms)


class _Objective:
    """Error probability as a function of log displacement ratios."""

    def __init__(self, cfg: ReceiverConfig, symmetric: bool):
        self.n = cfg.alphabet.mean_photon_number
        self.amplitude = cfg.alphabet.amplitude
        self.priors = cfg.alphabet.priors
        self.params = cfg.arm_arrays()
        self.scale = self.params["split"] * self.n  # |beta|^2 = s * R * n
        self.active = self.scale > 0
        self.symmetric = symmetric
        self.calls = 0

    def ratios(self, x: np.ndarray) -> np.ndarray:
        """Map search variables (..., d) to ratios (..., 3); inactive arms get 0."""
        x = np.asarray(x, dtype=float)
        s = np.exp(x)
        if self.symmetric:
            s = np.stack([s[..., 0], s[..., 1], s[..., 0]], axis=-1)
        return np.where(self.active, s, 0.0)

    def betas(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(self.ratios(x) * self.scale)

    def batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        self.calls += len(x)
        out = np.empty(len(x))
        for lo in range(0, len(x), _GRID_CHUNK):
            chunk = self.betas(x[lo : lo + _GRID_CHUNK])
            intensity = click_intensity_array(self.amplitude, chunk, **self.params)
            out[lo : lo + _GRID_CHUNK] = error_probability_array(intensity, self.priors)
        return out

    def __call__(self, x: np.ndarray) -> float:
        return float(self.batch(x)[0])

    @property
    def dim(self) -> int:
        return 2 if self.symmetric else 3

    def grid_points(self) -> np.ndarray:
        logs = np.log(RATIO_GRID if self.symmetric else RATIO_GRID_3D)
        mesh = np.meshgrid(*([logs] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _nelder_mead(obj: _Objective, x0: np.ndarray) -> tuple[np.ndarray, float]:
    step = 0.05
    simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(len(x0))])
    res = minimize(obj, x0, method="Nelder-Mead", options={**_NM_OPTIONS, "initial_simplex": simplex})
    # one restart: Nelder-Mead can stall on a collapsed simplex
    simplex = np.vstack([res.x] + [res.x + 1e-3 * e for e in np.eye(len(x0))])
    res2 = minimize(obj, res.x, method="Nelder-Mead", options={**_NM_OPTIONS, "initial_simplex": simplex})
    return (res2.x, float(res2.fun)) if res2.fun <= res.fun else (res.x, float(res.fun))


def _log_start(obj: _Objective, ratios: Sequence[float]) -> np.ndarray | None:
    r = np.asarray(ratios, dtype=float)
    if not np.all(np.isfinite(r[obj.active])) or np.any(r[obj.active] <= 0):
        return None
    r = np.where(obj.active, r, 1.0)
    return np.log(r[[0, 1]] if obj.symmetric else r)


def optimize_displacements(
    cfg: ReceiverConfig,
    *,
    start: Sequence[float] | None = None,
    symmetric: bool | None = None,
    use_grid: bool = True,
) -> OptimizationResult:
    """Minimize the exact error probability over ``|beta_i|`` with everything else fixed.

    ``start`` is an optional warm-start vector of displacement ratios; the
    better of the warm start and the grid scan is refined. ``symmetric``
    defaults to whether arms 1 and 3 are identical.
    """
    if cfg.alphabet.amplitude <= 0:
        raise ValueError("amplitude must be > 0; the error probability is flat at zero signal")
    if symmetric is None:
        symmetric = cfg.is_mirror_symmetric()
    obj = _Objective(cfg, symmetric)

    starts = []
    if use_grid:
        grid = obj.grid_points()
        values = obj.batch(grid)
        starts.append(grid[int(np.argmin(values))])
    if start is not None:
        warm = _log_start(obj, start)
        if warm is not None:
            starts.append(warm)
    if not starts:
        raise ValueError("no usable starting point: pass start ratios or enable the grid")

    best_x, best_f = None, math.inf
    for x0 in starts:
        x, f = _nelder_mead(obj, x0)
        if f < best_f:
            best_x, best_f = x, f

    betas = obj.betas(best_x)
    final = cfg.with_betas(betas)
    ratios = np.where(obj.active, obj.ratios(best_x), np.nan)
    return OptimizationResult(
        beta_mags=tuple(float(b) for b in betas),
        ratios=tuple(float(r) for r in ratios),
        split=tuple(float(r) for r in cfg.split),
        p_error=exact_error_probability(final),
        evaluations=obj.calls,
    )


def _template(alphabet: Alphabet, split, efficiency, dark_mean, visibility) -> ReceiverConfig:
    return ReceiverConfig.build(
        alphabet.mean_photon_number,
        split=split,
        efficiency=efficiency,
        dark_mean=dark_mean,
        visibility=visibility,
        priors=alphabet.priors,
    )


# above this <n> the R_1 = R_3 profile has a single dominant basin near 0.4
BRANCH_ANCHOR_N = 1.0
_R1_BOUNDS = (1e-3, 0.5 - 1e-3)


class _SplitProfile:
    """Optimized error probability as a function of R_1 (= R_3) at fixed <n>."""

    def __init__(self, alphabet, efficiency, dark_mean, visibility):
        self.args = (alphabet, efficiency, dark_mean, visibility)
        self.cache: dict[float, OptimizationResult] = {}
        self.evaluations = 0

    def result(self, r1: float) -> OptimizationResult:
        r1 = float(min(max(r1, _R1_BOUNDS[0]), _R1_BOUNDS[1]))
        if r1 not in self.cache:
            alphabet, eta, nu, xi = self.args
            res = optimize_displacements(_template(alphabet, (r1, 1.0 - 2.0 * r1, r1), eta, nu, xi))
            self.evaluations += res.evaluations
            self.cache[r1] = res
        return self.cache[r1]

    def __call__(self, r1: float) -> float:
        return self.result(r1).p_error

    def refine(self, lo: float, hi: float, xatol: float) -> float:
        res = minimize_scalar(self, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
        return min((float(res.x), lo, hi), key=self)

    def global_min(self, xatol: float = 1e-7) -> float:
        grid = np.linspace(0.01, 0.49, 49)
        i = int(np.argmin([self(r) for r in grid]))
        lo = grid[i - 1] if i > 0 else _R1_BOUNDS[0]
        hi = grid[i + 1] if i < len(grid) - 1 else _R1_BOUNDS[1]
        return self.refine(lo, hi, xatol)

    def local_min(self, r1: float, xatol: float = 1e-7) -> float:
        lo, hi = _downhill_bracket(self, r1, 0.005, *_R1_BOUNDS)
        return self.refine(lo, hi, xatol)


def optimize_splitting(
    alphabet: Alphabet,
    efficiency: Sequence[float] | float = 1.0,
    dark_mean: Sequence[float] | float = 0.0,
    visibility: Sequence[float] | float = 1.0,
    *,
    symmetric: bool = True,
    search: str = "branch",
) -> OptimizationResult:
    """Jointly optimize the split ratios (summing to 1) and the displacements.

    The split is searched with ``R_1 = R_3``; ``symmetric=False`` additionally
    frees ``R_1`` and ``R_3`` independently, starting from that optimum.

    ``search="branch"`` (default) returns the optimum on the branch of
    three-arm solutions: found by a global scan for ``<n> >= 1`` and followed
    by continuation in ``<n>`` below that. At ``<n> <~ 0.2`` this branch is a
    local optimum only: a degenerate receiver sending nearly all light to arm 2
    does marginally better there, and ``search="global"`` returns it.
    """
    if alphabet.amplitude <= 0:
        raise ValueError("amplitude must be > 0; the error probability is flat at zero signal")
    if search not in ("branch", "global"):
        raise ValueError(f"search must be 'branch' or 'global', got {search!r}")

    n = alphabet.mean_photon_number
    imperfections = (efficiency, dark_mean, visibility)
    evaluations = 0
    if search == "global" or n >= BRANCH_ANCHOR_N:
        profile = _SplitProfile(alphabet, *imperfections)
        r1 = profile.global_min()
    else:
        anchor = _SplitProfile(replace(alphabet, amplitude=math.sqrt(BRANCH_ANCHOR_N)), *imperfections)
        r1 = anchor.global_min(xatol=1e-4)
        evaluations += anchor.evaluations
        steps = max(int(math.ceil(math.log(BRANCH_ANCHOR_N / n) / math.log(1.25))), 1)
        for m in np.geomspace(BRANCH_ANCHOR_N, n, steps + 1)[1:-1]:
            step_profile = _SplitProfile(replace(alphabet, amplitude=math.sqrt(m)), *imperfections)
            r1 = step_profile.local_min(r1, xatol=1e-4)
            evaluations += step_profile.evaluations
        profile = _SplitProfile(alphabet, *imperfections)
        r1 = profile.local_min(r1)
    best = profile.result(r1)
    evaluations += profile.evaluations

    if not symmetric:
        best = _refine_asymmetric(alphabet, efficiency, dark_mean, visibility, best)
        evaluations += best.evaluations

    return replace(best, evaluations=evaluations)


def _downhill_bracket(f, x0: float, step: float, lo: float, hi: float) -> tuple[float, float]:
    """Walk downhill from ``x0`` in fixed steps until the objective rises."""
    clip = lambda x: min(max(x, lo), hi)  # noqa: E731
    f0 = f(x0)
    left, right = clip(x0 - step), clip(x0 + step)
    if f(left) < f0:
        direction = -1.0
    elif f(right) < f0:
        direction = 1.0
    else:
        return left, right
    prev, x, fx = x0, clip(x0 + direction * step), f(clip(x0 + direction * step))
    while True:
        nxt = clip(x + direction * step)
        if nxt == x or f(nxt) >= fx:
            return min(prev, nxt), max(prev, nxt)
        prev, x, fx = x, nxt, f(nxt)


def _refine_asymmetric(alphabet, efficiency, dark_mean, visibility, seed_result):
    """Joint search over (log ratios, R_1, R_3), started from the mirror-symmetric optimum."""
    seed_cfg = _template(alphabet, seed_result.split, efficiency, dark_mean, visibility)
    params = seed_cfg.arm_arrays()
    n, amp = alphabet.mean_photon_number, alphabet.amplitude
    calls = 0

    def g(v):
        nonlocal calls
        calls += 1
        r1, r3 = v[3], v[4]
        split = np.array([r1, 1.0 - r1 - r3, r3])
        if split.min() < _R1_BOUNDS[0]:
            return 1.0
        betas = np.sqrt(np.exp(v[:3]) * split * n)
        intensity = click_intensity_array(amp, betas, **{**params, "split": split})
        return float(error_probability_array(intensity, alphabet.priors))

    x0 = np.r_[np.log(seed_result.ratios), seed_result.split[0], seed_result.split[2]]
    steps = np.array([0.05, 0.05, 0.05, 0.01, 0.01])
    simplex = np.vstack([x0] + [x0 + h * e for h, e in zip(steps, np.eye(5))])
    res = minimize(g, x0, method="Nelder-Mead", options={**_NM_OPTIONS, "initial_simplex": simplex})
    if res.fun >= seed_result.p_error:
        return replace(seed_result, evaluations=calls)
    r1, r3 = res.x[3], res.x[4]
    cfg = _template(alphabet, (r1, 1.0 - r1 - r3, r3), efficiency, dark_mean, visibility)
    final = optimize_displacements(cfg, start=np.exp(res.x[:3]), symmetric=False, use_grid=False)
    return replace(final, evaluations=calls + final.evaluations)


@dataclass(frozen=True)
class CurvePoint:
    mean_photon_number: float
    p_error: float
    ratios: tuple[float, float, float]
    split: tuple[float, float, float]
    beta_mags: tuple[float, float, float]


def curve(
    mean_photon_numbers: Iterable[float],
    template: ReceiverConfig,
    optimize: bool = True,
) -> list[CurvePoint]:
    """Error probability along a mean-photon-number grid.

    The template's split ratios and imperfections are held fixed. With
    ``optimize`` the displacements are re-optimized at every point (warm started
    from the previous point); otherwise the template's displacement ratios are
    kept and the displacements scale with the amplitude.
    """
    ns = [float(n) for n in mean_photon_numbers]
    if not ns:
        raise ValueError("mean photon number grid is empty")
    if any(n < 0 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("mean photon number grid must be non-negative and strictly increasing")

    fixed_ratios = template.displacement_ratios
    rows = []
    warm = None
    for n in ns:
        cfg = template.with_amplitude(math.sqrt(n))
        if n == 0.0:
            # no signal: every state looks the same, displacements are moot
            p = exact_error_probability(cfg.with_betas((0.0, 0.0, 0.0)))
            nan3 = (math.nan,) * 3
            rows.append(CurvePoint(n, p, nan3, tuple(float(r) for r in cfg.split), (0.0,) * 3))
            continue
        if optimize:
            res = optimize_displacements(cfg, start=warm)
            warm = res.ratios
            rows.append(CurvePoint(n, res.p_error, res.ratios, res.split, res.beta_mags))
        else:
            ratios = np.nan_to_num(fixed_ratios, nan=0.0)
            betas = np.sqrt(ratios * cfg.split * n)
            p = exact_error_probability(cfg.with_betas(betas))
            rows.append(
                CurvePoint(
                    n,
                    p,
                    tuple(float(r) for r in fixed_ratios),
                    tuple(float(r) for r in cfg.split),
                    tuple(float(b) for b in betas),
                )
            )
    return rows
