"""Collaborative sampling of M videos from a pairwise denoiser.

Videos are indexed ``0..M-1``. Each denoising iteration selects a multiset of
pairs, queries the pair denoiser on every slot, averages each video's
predictions with weight ``1 / c_k`` (``c_k`` = number of slots containing
video ``k``) and takes one DDIM step; between recurrent iterations the state
is renoised back to the current level.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .noise_schedule import NoiseSchedule, StepPlan, ddim_step, renoise

EXHAUSTIVE = "exhaustive"
PARTITION = "partition"
MULTI_PARTITION = "multi_partition"
STRATEGIES = (EXHAUSTIVE, PARTITION, MULTI_PARTITION)

PairDenoiserFn = Callable[..., tuple]


class UncoveredVideo(ValueError):
    def __init__(self, k: int):
        super().__init__(f"video {k} is not covered by any selected pair")
        self.k = k


@dataclass(frozen=True)
class PairSelection:
    pairs: tuple[tuple[int, int], ...]
    M: int

    def __post_init__(self):
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        for i, j in pairs:
            if i == j or not (0 <= i < self.M and 0 <= j < self.M):
                raise ValueError(f"invalid pair {(i, j)} for M={self.M}")
        object.__setattr__(self, "pairs", pairs)

    @property
    def per_video_count(self) -> list[int]:
        counts = [0] * self.M
        for i, j in self.pairs:
            counts[i] += 1
            counts[j] += 1
        return counts

    def uncovered(self) -> list[int]:
        return [k for k, c in enumerate(self.per_video_count) if c == 0]

    def weights(self) -> list[Fraction]:
        """Exact per-video weights 1 / c_k."""
        out = []
        for k, c in enumerate(self.per_video_count):
            if c == 0:
                raise UncoveredVideo(k)
            out.append(Fraction(1, c))
        return out

    def weight_sums(self) -> list[Fraction]:
        """Sum of the weights over each video's slots (exactly 1 when covered)."""
        w = self.weights()
        sums = [Fraction(0)] * self.M
        for i, j in self.pairs:
            sums[i] += w[i]
            sums[j] += w[j]
        return sums

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class SamplerConfig:
    M: int
    strategy: str = PARTITION
    R: int = 1
    Q: int = 1
    plan: StepPlan = field(default_factory=lambda: StepPlan(tuple(range(1000, 0, -40))))
    seed: int = 0
    weight_scale: float = 1.0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("need at least two videos")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")

    @property
    def partitions(self) -> int:
        return self.Q if self.strategy == MULTI_PARTITION else 1

    @classmethod
    def view_defaults(cls, M: int, plan: StepPlan, seed: int = 0) -> "SamplerConfig":
        """Partitioning with R=1 for pairs, R=4 for 4 views, R=6 and Q=2 for 6 views."""
        if M == 2:
            return cls(M, PARTITION, R=1, Q=1, plan=plan, seed=seed)
        if M == 4:
            return cls(M, PARTITION, R=4, Q=1, plan=plan, seed=seed)
        if M == 6:
            return cls(M, MULTI_PARTITION, R=6, Q=2, plan=plan, seed=seed)
        return cls(M, PARTITION, R=M, Q=1, plan=plan, seed=seed)


def random_partition(M: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform perfect matching; for odd M the leftover joins a random other video."""
    perm = rng.permutation(M)
    pairs = [tuple(sorted((int(perm[2 * k]), int(perm[2 * k + 1])))) for k in range(M // 2)]
    if M % 2:
        left = int(perm[-1])
        other = int(rng.integers(M - 1))
        if other >= left:
            other += 1
        pairs.append(tuple(sorted((left, other))))
    return pairs


def select_pairs(strategy: str, M: int, rng: np.random.Generator | None = None, Q: int = 1) -> PairSelection:
    if M < 2:
        raise ValueError("need at least two videos")
    if strategy == EXHAUSTIVE:
        return PairSelection(tuple(itertools.combinations(range(M), 2)), M)
    if strategy == PARTITION:
        Q = 1
    elif strategy != MULTI_PARTITION:
        raise ValueError(f"unknown strategy {strategy!r}")
    pairs = []
    for _ in range(Q):
        pairs.extend(random_partition(M, rng))
    return PairSelection(tuple(pairs), M)


def aggregate_noise(predictions: Sequence[tuple], selection: PairSelection, weight_scale: float = 1.0) -> list:
    """Per-video average of pair predictions, summed in slot order.

    ``weight_scale`` multiplies every weight; anything but 1 breaks the
    sum-to-one condition and is meant for experiments only.
    """
    if len(predictions) != len(selection.pairs):
        raise ValueError("predictions are not aligned with the selection")
    counts = selection.per_video_count
    for k, c in enumerate(counts):
        if c == 0:
            raise UncoveredVideo(k)
    acc = [None] * selection.M
    for (i, j), (e_i, e_j) in zip(selection.pairs, predictions):
        acc[i] = e_i if acc[i] is None else acc[i] + e_i
        acc[j] = e_j if acc[j] is None else acc[j] + e_j
    if weight_scale == 1.0:
        return [a / c for a, c in zip(acc, counts)]
    return [a * (weight_scale / c) for a, c in zip(acc, counts)]


def _pair_condition(conditions, i, j):
    if conditions is None:
        return (i, j)
    return (conditions[i], conditions[j])


def predict_pairs(v, t, denoiser, selection, conditions=None, executor=None) -> list:
    """Run the pair denoiser on every slot of ``selection`` (order preserved)."""

    def one(pair):
        i, j = pair
        return denoiser(v[i], v[j], t, _pair_condition(conditions, i, j))

    if executor is None:
        return [one(p) for p in selection.pairs]
    return list(executor.map(one, selection.pairs))


def collaborative_noise(v, t, denoiser, selection, conditions=None, weight_scale=1.0, executor=None) -> np.ndarray:
    preds = predict_pairs(v, t, denoiser, selection, conditions, executor)
    return np.stack(aggregate_noise(preds, selection, weight_scale))


@dataclass
class StepRecord:
    t: int
    t_prev: int
    r: int
    pairs: tuple[tuple[int, int], ...]


def run(
    config: SamplerConfig,
    denoiser: PairDenoiserFn,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    conditions=None,
    rng: np.random.Generator | None = None,
    init: np.ndarray | None = None,
    trace: list | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Collaborative denoising of M videos; returns an array of shape (M, *shape).

    ``init`` replaces the initial N(0, I) draw. ``trace`` (a list) receives one
    StepRecord per denoising iteration.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    M = config.M
    v = rng.standard_normal((M, *shape)) if init is None else np.array(init, dtype=float)
    if v.shape[0] != M:
        raise ValueError(f"initial state has {v.shape[0]} videos, expected {M}")
    eta = config.plan.eta
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t, t_prev in config.plan.pairs():
            for r in range(config.R):
                selection = select_pairs(config.strategy, M, rng, config.partitions)
                if trace is not None:
                    trace.append(StepRecord(t, t_prev, r, selection.pairs))
                eps = collaborative_noise(v, t, denoiser, selection, conditions, config.weight_scale, executor)
                v_prev = ddim_step(v, eps, t, t_prev, schedule, eta, rng)
                if r != config.R - 1:
                    v = renoise(v_prev, t, schedule, rng, t_prev=t_prev)
                else:
                    v = v_prev
    finally:
        if executor is not None:
            executor.shutdown()
    return v


def reference_ddim(denoiser: PairDenoiserFn, schedule: NoiseSchedule, plan: StepPlan, init: np.ndarray, cond=(0, 1)):
    """Plain DDIM over a single pair, no aggregation; the M=2 baseline."""
    v_i, v_j = np.array(init[0], dtype=float), np.array(init[1], dtype=float)
    for t, t_prev in plan.pairs():
        e_i, e_j = denoiser(v_i, v_j, t, cond)
        v_i = ddim_step(v_i, e_i, t, t_prev, schedule)
        v_j = ddim_step(v_j, e_j, t, t_prev, schedule)
    return np.stack([v_i, v_j])
