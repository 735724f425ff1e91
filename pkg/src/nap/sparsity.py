"""Record statistics of random search: Stirling numbers, harmonic means, Monte Carlo counts."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

MAX_EXACT_T = 64
MAX_ENUMERATE_T = 10


@lru_cache(maxsize=None)
def _stirling_row(T: int) -> tuple[int, ...]:
    """Unsigned Stirling numbers of the first kind ``[T, k]`` for k = 0..T."""
    if T == 0:
        return (1,)
    prev = _stirling_row(T - 1)
    row = [0] * (T + 1)
    for k in range(1, T + 1):
        left = prev[k - 1]
        right = prev[k] if k < T else 0
        row[k] = left + (T - 1) * right
    return tuple(row)


def stirling_first(T: int, k: int) -> int:
    """Number of permutations of T elements with exactly k cycles (exact integer)."""
    if not (1 <= k <= T <= MAX_EXACT_T):
        raise ValueError(f"need 1 <= k <= T <= {MAX_EXACT_T}, got T={T}, k={k}")
    return _stirling_row(T)[k]


def informative_count(y_sequence: Sequence[float]) -> int:
    """Number of strict records; the first element always counts."""
    y = np.asarray(y_sequence, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("informative_count needs a non-empty sequence")
    prev_max = np.maximum.accumulate(y)[:-1]
    return 1 + int(np.count_nonzero(y[1:] > prev_max))


def harmonic_exact(T: int) -> Fraction:
    if T < 1:
        raise ValueError("T must be >= 1")
    return sum((Fraction(1, i) for i in range(1, T + 1)), Fraction(0))


def harmonic(T: int) -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    return math.fsum(1.0 / i for i in range(1, T + 1))


def record_variance(T: int) -> float:
    """Variance of the record count of a uniformly random permutation."""
    return harmonic(T) - math.fsum(1.0 / i ** 2 for i in range(1, T + 1))


@dataclass(frozen=True)
class RecordCount:
    """Distribution of the record count for horizon ``T``.

    ``counts`` holds exact ``Fraction`` probabilities (``trials is None``) or integer
    occurrence counts.
    """

    T: int
    counts: dict
    trials: int | None = None

    def probabilities(self) -> dict[int, Fraction | float]:
        if self.trials is None:
            return dict(self.counts)
        return {k: v / self.trials for k, v in self.counts.items()}

    def mean(self):
        return sum(k * p for k, p in self.probabilities().items())

    @property
    def stderr(self) -> float:
        if not self.trials or self.trials < 2:
            return float("nan")
        p = self.probabilities()
        mean = sum(k * v for k, v in p.items())
        second = sum(k * k * v for k, v in p.items())
        var = (second - mean * mean) * self.trials / (self.trials - 1)
        return math.sqrt(max(var, 0.0) / self.trials)


def exact_record_distribution(T: int, mode: str = "stirling") -> RecordCount:
    """Exact ``P(m = k)``; ``mode="enumerate"`` counts records over all T! orderings instead."""
    if T < 1:
        raise ValueError("T must be >= 1")
    total = math.factorial(T)
    if mode == "stirling":
        if T > MAX_EXACT_T:
            raise ValueError(f"exact mode supports T <= {MAX_EXACT_T}")
        return RecordCount(T, {k: Fraction(stirling_first(T, k), total) for k in range(1, T + 1)})
    if mode == "enumerate":
        if T > MAX_ENUMERATE_T:
            raise ValueError(f"enumeration mode supports T <= {MAX_ENUMERATE_T}")
        tally = {k: 0 for k in range(1, T + 1)}
        for perm in itertools.permutations(range(T)):
            tally[informative_count(perm)] += 1
        return RecordCount(T, {k: Fraction(v, total) for k, v in tally.items()})
    raise ValueError(f"unknown mode {mode!r}")


def _records_per_row(y: np.ndarray) -> np.ndarray:
    prev = np.maximum.accumulate(y, axis=1)[:, :-1]
    return 1 + np.count_nonzero(y[:, 1:] > prev, axis=1)


def monte_carlo_records(T: int, trials: int, rng: np.random.Generator | int,
                        pool: Sequence[float] | None = None, chunk: int = 20000) -> tuple[float, RecordCount]:
    """Record counts of length-T draws without replacement from ``pool`` (default: T ranks)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    values = np.arange(T, dtype=np.float64) if pool is None else np.asarray(pool, dtype=np.float64).ravel()
    if len(np.unique(values)) < T:
        raise ValueError(f"pool has {len(np.unique(values))} distinct values, need at least {T}")
    tally = np.zeros(T + 1, dtype=np.int64)
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        # first T columns of a random permutation of the pool
        idx = np.argsort(rng.random((n, len(values))), axis=1)[:, :T]
        tally += np.bincount(_records_per_row(values[idx]), minlength=T + 1)
        done += n
    dist = RecordCount(T, {k: int(tally[k]) for k in range(1, T + 1)}, trials)
    return float((np.arange(T + 1) * tally).sum() / trials), dist


def total_variation(a: RecordCount, b: RecordCount) -> float:
    pa, pb = a.probabilities(), b.probabilities()
    keys = set(pa) | set(pb)
    return 0.5 * sum(abs(float(pa.get(k, 0)) - float(pb.get(k, 0))) for k in keys)


def policy_record_profile(params, tasks, T: int, trials: int, rng: np.random.Generator | int,
                          temperature=0.1, n_init: int = 0, chunk: int = 64) -> float:
    """Mean record count of the y values a policy observes over ``trials`` episodes.

    Tasks are drawn uniformly; with ``n_init > 0`` the initial values precede the acquired ones.
    """
    from .environment import reset, rollout_batch

    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    counts = []
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        picks = rng.integers(0, len(tasks), n)
        states = [reset(tasks[int(k)], n_init, rng, budget=T) for k in picks]
        streams = [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63, size=n)]
        for s, tr in zip(states, rollout_batch(params, states, temperature, streams, chunk=chunk)):
            counts.append(informative_count(np.concatenate([s.history_y, tr.ys])))
    return float(np.mean(counts))
