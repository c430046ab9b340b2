"""Trial-by-trial simulation of the receiver.

Randomness is counter based: trial ``t`` consumes exactly one Philox4x64-10
block, keyed by the seed, at counter ``t``. Its four 64-bit words become four
uniforms in [0, 1): one picks the sent state, three drive the arms' on/off
clicks. Any partition of the trials into chunks, in any order or on any
number of workers, therefore yields the same tallies.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numpy.random import Philox

from .model import NUM_STATES, ReceiverConfig, click_intensities, decision_table

RNG_ALGORITHM = "philox4x64-10"
DEFAULT_SEED = 20180611
CHUNK_TRIALS = 1 << 18


@dataclass(frozen=True)
class TrialReport:
    trials: int
    errors: int
    p_error_estimate: float
    std_error: float
    seed: int
    per_state_confusion: tuple[tuple[int, ...], ...]
    rng: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_state_confusion"] = [list(row) for row in self.per_state_confusion]
        return d


def _uniforms(seed: int, first_trial: int, count: int) -> np.ndarray:
    """(count, 4) uniforms for trials ``first_trial .. first_trial + count - 1``."""
    raw = Philox(key=seed, counter=first_trial).random_raw(4 * count)
    return (raw >> np.uint64(11)).astype(np.float64).reshape(count, 4) * 2.0**-53


def _simulate_chunk(
    click_prob: np.ndarray,
    cum_priors: np.ndarray,
    decisions: np.ndarray,
    seed: int,
    first_trial: int,
    count: int,
) -> np.ndarray:
    u = _uniforms(seed, first_trial, count)
    sent = np.minimum(np.searchsorted(cum_priors, u[:, 0], side="right"), NUM_STATES - 1)
    clicks = u[:, 1:] < click_prob[:, sent].T  # (count, 3)
    outcome = 4 * clicks[:, 0] + 2 * clicks[:, 1] + clicks[:, 2]
    decided = decisions[outcome]
    return np.bincount(sent * NUM_STATES + decided, minlength=NUM_STATES**2).reshape(
        NUM_STATES, NUM_STATES
    )


def simulate(
    cfg: ReceiverConfig,
    trials: int,
    seed: int = DEFAULT_SEED,
    *,
    workers: int = 1,
) -> TrialReport:
    """Run ``trials`` independent shots and tally MAP decisions.

    The report depends only on ``(cfg, trials, seed)``, never on ``workers``.
    """
    trials = int(trials)
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")

    click_prob = 1.0 - np.exp(-click_intensities(cfg))  # (3 arms, 4 states)
    cum_priors = np.cumsum(cfg.alphabet.priors)
    decisions = decision_table(cfg)

    starts = range(0, trials, CHUNK_TRIALS)
    args = [(click_prob, cum_priors, decisions, seed, s, min(CHUNK_TRIALS, trials - s)) for s in starts]
    if workers > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: _simulate_chunk(*a), args))
    else:
        parts = [_simulate_chunk(*a) for a in args]
    confusion = np.sum(parts, axis=0, dtype=np.int64)

    errors = int(trials - np.trace(confusion))
    p = errors / trials
    return TrialReport(
        trials=trials,
        errors=errors,
        p_error_estimate=p,
        std_error=math.sqrt(p * (1.0 - p) / trials),
        seed=seed,
        per_state_confusion=tuple(tuple(int(c) for c in row) for row in confusion),
    )
