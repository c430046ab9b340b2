"""Three-arm displacement receiver for QPSK coherent states.

The input state ``|alpha e^{i k pi/2}>`` is split into three arms. Arm ``i``
displaces its share of the signal by ``beta_i`` (phase fixed to the state the
arm tests: 0, pi/2, pi) and counts photons with an on/off detector. The joint
click pattern is decoded with a maximum a posteriori rule.

Imperfections per arm:

* ``efficiency`` (eta) scales the optical intensity reaching the detector,
* ``dark_mean`` (nu) adds detector-intrinsic counts after the efficiency,
* ``visibility`` (xi) multiplies the signal/LO interference cross term.

All functions are pure; the array kernels at the bottom are what the
optimizer and the Monte Carlo engine call in their inner loops.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import ClassVar, NamedTuple, Sequence

import numpy as np

NUM_STATES = 4
HYPOTHESIS_PHASES = (0.0, math.pi / 2, math.pi)
STATE_PHASES = np.arange(NUM_STATES) * (math.pi / 2)
UNIFORM_PRIORS = (0.25, 0.25, 0.25, 0.25)


class Outcome(NamedTuple):
    """Joint on/off record; ``True`` means one or more photons in that arm."""

    d1: bool
    d2: bool
    d3: bool

    @property
    def index(self) -> int:
        return 4 * self.d1 + 2 * self.d2 + self.d3


# canonical order (0,0,0), (0,0,1), ..., (1,1,1); d1 is the most significant bit
OUTCOMES: tuple[Outcome, ...] = tuple(
    Outcome(*map(bool, bits)) for bits in itertools.product((0, 1), repeat=3)
)
_OUTCOME_BITS = np.array(OUTCOMES, dtype=bool)  # (8, 3)


def _check_unit(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


def _check_nonneg(name: str, value: float) -> None:
    if not (value >= 0.0 and math.isfinite(value)):
        raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")


@dataclass(frozen=True)
class Alphabet:
    """QPSK constellation ``{|alpha|, i|alpha|, -|alpha|, -i|alpha|}``."""

    amplitude: float
    priors: tuple[float, ...] = UNIFORM_PRIORS

    num_states: ClassVar[int] = NUM_STATES

    def __post_init__(self):
        _check_nonneg("amplitude", self.amplitude)
        object.__setattr__(self, "priors", tuple(float(p) for p in self.priors))
        if len(self.priors) != NUM_STATES:
            raise ValueError(f"priors must have {NUM_STATES} entries, got {len(self.priors)}")
        if any(p < 0 for p in self.priors):
            raise ValueError(f"priors must be non-negative, got {self.priors}")
        if abs(math.fsum(self.priors) - 1.0) > 1e-12:
            raise ValueError(f"priors must sum to 1, got sum {math.fsum(self.priors)!r}")

    @classmethod
    def from_mean_photon_number(cls, mean_photon_number: float, **kwargs) -> "Alphabet":
        _check_nonneg("mean_photon_number", mean_photon_number)
        return cls(math.sqrt(mean_photon_number), **kwargs)

    @property
    def mean_photon_number(self) -> float:
        return self.amplitude**2

    @staticmethod
    def phase(k: int) -> float:
        if k not in range(NUM_STATES):
            raise ValueError(f"state index must be in 0..3, got {k!r}")
        return k * math.pi / 2


@dataclass(frozen=True)
class ArmConfig:
    """One detection arm: signal share, displacement and detector parameters."""

    split_ratio: float
    hypothesis_phase: float
    beta_mag: float = 0.0
    efficiency: float = 1.0
    dark_mean: float = 0.0
    visibility: float = 1.0

    def __post_init__(self):
        _check_unit("split_ratio", self.split_ratio)
        _check_unit("efficiency", self.efficiency)
        _check_unit("visibility", self.visibility)
        _check_nonneg("dark_mean", self.dark_mean)
        _check_nonneg("beta_mag", self.beta_mag)
        if not math.isfinite(self.hypothesis_phase):
            raise ValueError(f"hypothesis_phase must be finite, got {self.hypothesis_phase!r}")


def _per_arm(name: str, value) -> tuple[float, float, float]:
    if np.ndim(value) == 0:
        return (float(value),) * 3
    values = tuple(float(v) for v in value)
    if len(values) != 3:
        raise ValueError(f"{name} needs one value or three per-arm values, got {len(values)}")
    return values


@dataclass(frozen=True)
class ReceiverConfig:
    alphabet: Alphabet
    arms: tuple[ArmConfig, ArmConfig, ArmConfig]

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        if len(self.arms) != 3:
            raise ValueError(f"receiver needs exactly 3 arms, got {len(self.arms)}")
        total = math.fsum(a.split_ratio for a in self.arms)
        if total > 1.0 + 1e-12:
            raise ValueError(f"split ratios sum to {total!r} > 1")
        for i, (arm, expected) in enumerate(zip(self.arms, HYPOTHESIS_PHASES)):
            if abs(arm.hypothesis_phase - expected) > 1e-12:
                raise ValueError(
                    f"arm {i + 1} must test phase {expected!r}, got {arm.hypothesis_phase!r}"
                )

    @classmethod
    def build(
        cls,
        mean_photon_number: float,
        *,
        split: Sequence[float] = (0.4, 0.2, 0.4),
        ratios: Sequence[float] | float = 1.0,
        efficiency: Sequence[float] | float = 1.0,
        dark_mean: Sequence[float] | float = 0.0,
        visibility: Sequence[float] | float = 1.0,
        priors: Sequence[float] = UNIFORM_PRIORS,
    ) -> "ReceiverConfig":
        """Assemble a config from displacement ratios ``|beta_i|^2 / (R_i |alpha|^2)``.

        Scalars broadcast to all three arms.
        """
        alphabet = Alphabet.from_mean_photon_number(mean_photon_number, priors=tuple(priors))
        split = _per_arm("split", split)
        ratios = _per_arm("ratios", ratios)
        eta = _per_arm("efficiency", efficiency)
        nu = _per_arm("dark_mean", dark_mean)
        xi = _per_arm("visibility", visibility)
        arms = tuple(
            ArmConfig(
                split_ratio=split[i],
                hypothesis_phase=HYPOTHESIS_PHASES[i],
                beta_mag=math.sqrt(ratios[i] * split[i] * mean_photon_number),
                efficiency=eta[i],
                dark_mean=nu[i],
                visibility=xi[i],
            )
            for i in range(3)
        )
        return cls(alphabet, arms)

    def with_betas(self, betas: Sequence[float]) -> "ReceiverConfig":
        return replace(
            self, arms=tuple(replace(a, beta_mag=float(b)) for a, b in zip(self.arms, betas))
        )

    def with_amplitude(self, amplitude: float) -> "ReceiverConfig":
        return replace(self, alphabet=replace(self.alphabet, amplitude=amplitude))

    @property
    def split(self) -> np.ndarray:
        return np.array([a.split_ratio for a in self.arms])

    @property
    def betas(self) -> np.ndarray:
        return np.array([a.beta_mag for a in self.arms])

    @property
    def displacement_ratios(self) -> np.ndarray:
        """``|beta_i|^2 / (R_i |alpha|^2)``; nan where the arm carries no signal."""
        signal = self.split * self.alphabet.mean_photon_number
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(signal > 0, self.betas**2 / np.where(signal > 0, signal, 1), np.nan)

    def arm_arrays(self) -> dict[str, np.ndarray]:
        """Per-arm parameters as arrays, keyed by the kernel argument names."""
        return {
            "split": self.split,
            "efficiency": np.array([a.efficiency for a in self.arms]),
            "dark_mean": np.array([a.dark_mean for a in self.arms]),
            "visibility": np.array([a.visibility for a in self.arms]),
        }

    def is_mirror_symmetric(self) -> bool:
        """True when arms 1 and 3 share R, eta, nu and xi."""
        a, c = self.arms[0], self.arms[2]
        return (a.split_ratio, a.efficiency, a.dark_mean, a.visibility) == (
            c.split_ratio,
            c.efficiency,
            c.dark_mean,
            c.visibility,
        )


# --- scalar API -------------------------------------------------------------


def mean_click_intensity(arm: ArmConfig, alphabet: Alphabet, k: int) -> float:
    """Mean photon number reaching arm's detector when state ``k`` is sent."""
    phi = alphabet.phase(k)
    a = alphabet.amplitude
    R, b = arm.split_ratio, arm.beta_mag
    optical = R * a * a + b * b - 2.0 * arm.visibility * math.sqrt(R) * a * b * math.cos(
        phi - arm.hypothesis_phase
    )
    return max(arm.efficiency * optical + arm.dark_mean, 0.0)


def p_outcome_given_state(arm: ArmConfig, alphabet: Alphabet, k: int, d: bool) -> float:
    p_dark = math.exp(-mean_click_intensity(arm, alphabet, k))
    return 1.0 - p_dark if d else p_dark


def joint_likelihood(cfg: ReceiverConfig, k: int, outcome: Sequence[bool]) -> float:
    """P(outcome | state k); the arms are independent."""
    if len(outcome) != 3:
        raise ValueError(f"outcome must have 3 entries, got {len(outcome)}")
    return math.prod(
        p_outcome_given_state(arm, cfg.alphabet, k, bool(d)) for arm, d in zip(cfg.arms, outcome)
    )


def map_decision(cfg: ReceiverConfig, outcome: Sequence[bool]) -> int:
    """MAP estimate of the state; ties go to the lowest index."""
    scores = [cfg.alphabet.priors[k] * joint_likelihood(cfg, k, outcome) for k in range(NUM_STATES)]
    return max(range(NUM_STATES), key=lambda k: (scores[k], -k))


# --- table API --------------------------------------------------------------


def click_intensities(cfg: ReceiverConfig) -> np.ndarray:
    """Mean click intensities as a (3 arms, 4 states) array."""
    return click_intensity_array(cfg.alphabet.amplitude, cfg.betas, **cfg.arm_arrays())


def likelihood_table(cfg: ReceiverConfig) -> np.ndarray:
    """P(d | k) as an (8 outcomes, 4 states) array in canonical outcome order."""
    return likelihoods_from_intensity(click_intensities(cfg))


def decision_table(cfg: ReceiverConfig) -> np.ndarray:
    """MAP decision for each of the 8 outcomes, canonical order."""
    weighted = likelihood_table(cfg) * np.asarray(cfg.alphabet.priors)
    return np.argmax(weighted, axis=-1)


def exact_error_probability(cfg: ReceiverConfig) -> float:
    """Error probability of the MAP receiver, summed exactly over all outcomes."""
    weighted = likelihood_table(cfg) * np.asarray(cfg.alphabet.priors)
    p_correct = math.fsum(weighted.max(axis=-1))
    return min(max(1.0 - p_correct, 0.0), 1.0)


def per_state_correct(cfg: ReceiverConfig) -> np.ndarray:
    """P(decide k | k sent) for each state."""
    table = likelihood_table(cfg)
    decisions = decision_table(cfg)
    return np.array([table[decisions == k, k].sum() for k in range(NUM_STATES)])


# --- array kernels ----------------------------------------------------------


def click_intensity_array(amplitude, beta, split, efficiency, dark_mean, visibility):
    """Vectorized mean click intensity.

    ``beta`` has shape (..., 3); arm parameters broadcast against it. Returns
    shape (..., 3, 4) indexed by [arm, state].
    """
    beta = np.asarray(beta, dtype=float)[..., :, None]
    split = np.asarray(split, dtype=float)[..., :, None]
    eta = np.asarray(efficiency, dtype=float)[..., :, None]
    nu = np.asarray(dark_mean, dtype=float)[..., :, None]
    xi = np.asarray(visibility, dtype=float)[..., :, None]
    a = np.asarray(amplitude, dtype=float)[..., None, None]
    cos_rel = np.cos(STATE_PHASES[None, :] - np.asarray(HYPOTHESIS_PHASES)[:, None])
    optical = split * a * a + beta * beta - 2.0 * xi * np.sqrt(split) * a * beta * cos_rel
    return np.maximum(eta * optical + nu, 0.0)


def likelihoods_from_intensity(intensity: np.ndarray) -> np.ndarray:
    """(..., 3, 4) click intensities -> (..., 8, 4) outcome likelihoods."""
    p0 = np.exp(-intensity)
    p1 = 1.0 - p0
    table = np.ones(intensity.shape[:-2] + (8, NUM_STATES))
    for i in range(3):
        clicked = _OUTCOME_BITS[:, i, None]
        table = table * np.where(clicked, p1[..., None, i, :], p0[..., None, i, :])
    return table


def error_probability_array(intensity: np.ndarray, priors=UNIFORM_PRIORS) -> np.ndarray:
    """MAP error probability for a batch of (..., 3, 4) intensity arrays."""
    weighted = likelihoods_from_intensity(intensity) * np.asarray(priors)
    return 1.0 - weighted.max(axis=-1).sum(axis=-1)
