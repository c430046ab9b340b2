"""Benchmark error probabilities for equiprobable QPSK coherent states.

``heterodyne_limit`` is the standard quantum noise limit (ideal dual-quadrature
measurement with quadrant decisions). ``helstrom_bound`` is the minimum over all
measurements, reached here by the square-root measurement, which is optimal for
symmetric pure states with equal priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import erfc

_EIG_TOL = 1e-10


class BoundKind(str, Enum):
    HELSTROM = "helstrom"
    HETERODYNE = "heterodyne"


@dataclass(frozen=True)
class BoundCurve:
    mean_photon_numbers: tuple[float, ...]
    values: tuple[float, ...]
    kind: BoundKind


def _check_n(mean_photon_number: float) -> float:
    n = float(mean_photon_number)
    if not n >= 0.0:
        raise ValueError(f"mean photon number must be >= 0, got {mean_photon_number!r}")
    return n


def heterodyne_limit(mean_photon_number: float) -> float:
    """Symbol error probability of ideal heterodyne detection of QPSK.

    Each quadrature carries ``|alpha|/sqrt(2)`` of signal over vacuum noise of
    variance 1/2, so one quadrature sign is wrong with probability
    ``erfc(sqrt(n/2)) / 2`` and the symbol is right only if both are.
    """
    n = _check_n(mean_photon_number)
    q = 0.5 * erfc(math.sqrt(n / 2.0))
    # 1 - (1 - q)^2 without cancellation for small q
    return q * (2.0 - q)


def gram_row(mean_photon_number: float) -> np.ndarray:
    """First row of the circulant Gram matrix, ``<alpha_0|alpha_m>``."""
    n = _check_n(mean_photon_number)
    m = np.arange(4)
    return np.exp(-n * (1.0 - 1j**m))


def gram_eigenvalues(mean_photon_number: float) -> np.ndarray:
    """Eigenvalues of the 4x4 Gram matrix via the DFT of its circulant row."""
    lam = np.fft.fft(gram_row(mean_photon_number))
    if np.max(np.abs(lam.imag)) > _EIG_TOL or np.min(lam.real) < -_EIG_TOL:
        raise ArithmeticError(f"Gram spectrum is not real non-negative: {lam!r}")
    lam = lam.real
    if abs(lam.sum() - 4.0) > _EIG_TOL:
        raise ArithmeticError(f"Gram trace is {lam.sum()!r}, expected 4")
    return np.clip(lam, 0.0, None)


def helstrom_bound(mean_photon_number: float) -> float:
    """Minimum error probability for the four equiprobable QPSK states.

    Equals ``1 - (sum sqrt(lambda))^2 / 16``; with ``sum lambda = 4`` that is
    ``sum_{i<j} (sqrt(lambda_i) - sqrt(lambda_j))^2 / 16``, which keeps full
    relative precision when the bound is tiny.
    """
    roots = np.sqrt(gram_eigenvalues(mean_photon_number))
    spread = math.fsum((roots[i] - roots[j]) ** 2 for i in range(4) for j in range(i + 1, 4))
    return min(max(spread / 16.0, 0.0), 0.75)


def bound_curve(mean_photon_numbers: Sequence[float], kind: BoundKind | str) -> BoundCurve:
    kind = BoundKind(kind)
    fn = helstrom_bound if kind is BoundKind.HELSTROM else heterodyne_limit
    ns = tuple(float(n) for n in mean_photon_numbers)
    return BoundCurve(ns, tuple(fn(n) for n in ns), kind)
