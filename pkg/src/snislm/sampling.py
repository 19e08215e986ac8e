"""Noise distributions, samplers, expected counts, target-exclusion remapping.

Sampled criteria approximate a sum over the vocabulary by a sum over K drawn
classes, each weighted through its expected count E_c (the expected number of
appearances of class c among the K samples). With replacement E_c = K * D(c)
exactly; without replacement this module uses the closed-form approximation
E_c = 1 - (1 - D(c))^K, which is exact at K = 1 and accurate while K << C.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from snislm.corpus import Vocabulary
from snislm.rng import stream_rng

__all__ = [
    "NoiseDistribution",
    "SampleSet",
    "log_uniform",
    "unigram",
    "unigram_from_counts",
    "expected_count",
    "draw_with_replacement",
    "draw_without_replacement",
    "draw_excluding_target",
    "shared_batch_samples",
    "remap_excluding",
    "stream_rng",
]


@dataclass(frozen=True)
class NoiseDistribution:
    """A categorical proposal distribution with an inversion-sampling table."""

    probs: np.ndarray  # (C,) float64, sums to 1
    cumulative: np.ndarray  # (C,) non-decreasing, ends at 1
    kind: str  # log_uniform | unigram | custom

    def __post_init__(self) -> None:
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        cumulative = np.ascontiguousarray(self.cumulative, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "cumulative", cumulative)
        if probs.ndim != 1 or cumulative.shape != probs.shape:
            raise ValueError("probs and cumulative must be 1-D and aligned")
        if np.any(probs < 0):
            raise ValueError("noise probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("noise probabilities must sum to 1 within 1e-12")
        if np.any(np.diff(cumulative) < 0) or abs(cumulative[-1] - 1.0) > 1e-12:
            raise ValueError("cumulative table must be non-decreasing and end at 1")

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])

    @property
    def support_count(self) -> int:
        """Number of classes with positive probability (cached)."""
        hit = self.__dict__.get("_support_count")
        if hit is None:
            hit = int(np.count_nonzero(self.probs))
            self.__dict__["_support_count"] = hit
        return hit

    def draw(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """k iid class ids by inversion on the cumulative table."""
        return np.searchsorted(self.cumulative, rng.random(k), side="right").astype(np.int64)

    def effective_draws(self, k: int) -> float:
        """Expected number of iid draws needed to collect k distinct classes.

        Solves sum_c (1 - (1 - D(c))^T) = k for T by bisection; T = k exactly
        when k = 1. Cached per distribution since it is needed once per
        (distribution, k) rather than per sample set.
        """
        cache: dict[int, float] = self.__dict__.setdefault("_effective_draws", {})
        hit = cache.get(k)
        if hit is not None:
            return hit
        if not 1 <= k < self.size:
            raise ValueError(f"k={k} must be in [1, {self.size})")
        if k == 1:  # one draw is one distinct class; keep E = D exact here
            cache[1] = 1.0
            return 1.0
        log1m = np.log1p(-np.minimum(self.probs, 1.0 - 1e-15))

        def distinct(t: float) -> float:
            return float(np.sum(-np.expm1(t * log1m)))

        lo = hi = float(k)
        while distinct(hi) < k:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if distinct(mid) < k:
                lo = mid
            else:
                hi = mid
        t = 0.5 * (lo + hi)
        cache[k] = t
        return t


def log_uniform(vocab_size: int) -> NoiseDistribution:
    """Log-uniform distribution over frequency ranks (id order).

    D(c) = (log(c + 2) - log(c + 1)) / log(C + 1), strictly decreasing in c.
    The telescoping sum makes the total exactly log(C + 1) / log(C + 1) = 1,
    so no renormalization is applied.
    """
    if vocab_size < 2:
        raise ValueError("log_uniform requires vocab_size >= 2")
    edges = np.log(np.arange(1, vocab_size + 2, dtype=np.float64))
    total = edges[-1]
    probs = np.diff(edges) / total
    cumulative = edges[1:] / total
    return NoiseDistribution(probs=probs, cumulative=cumulative, kind="log_uniform")


def unigram_from_counts(counts: np.ndarray, smoothing: float) -> NoiseDistribution:
    """Unigram distribution proportional to count + smoothing."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.shape[0] == 0:
        raise ValueError("counts must be a non-empty vector")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if smoothing == 0 and np.any(counts == 0):
        raise ValueError(
            "zero-count class with zero smoothing would get zero noise probability"
        )
    weights = counts + smoothing
    probs = weights / weights.sum()
    cumulative = np.cumsum(probs)
    cumulative[-1] = 1.0
    return NoiseDistribution(probs=probs, cumulative=cumulative, kind="unigram")


def unigram(vocab: Vocabulary, smoothing: float = 0.0) -> NoiseDistribution:
    return unigram_from_counts(vocab.counts, smoothing)


def expected_count(
    dist: NoiseDistribution, ids: np.ndarray, k: int, replacement: bool
) -> np.ndarray:
    """Expected appearance count of each id among k draws from dist.

    With replacement this is exact (k * D). Without replacement it is the
    inclusion probability 1 - (1 - D)^T with T the expected number of raw
    draws the reject-duplicates sampler consumes to collect k distinct ids
    (T = k when k = 1, T > k otherwise). The plain exponent k would understate
    the inclusion of every class once k is a noticeable fraction of the
    vocabulary, which visibly skews the self-normalized optima. The formula
    lives in this one place so alternatives can be swapped wholesale.
    """
    d = dist.probs[np.asarray(ids, dtype=np.int64)]
    if replacement:
        return k * d
    t = dist.effective_draws(k)
    return -np.expm1(t * np.log1p(-d))


@dataclass(frozen=True)
class SampleSet:
    """K drawn class ids with their expected counts.

    ``source`` (when present) lets consumers compute the expected count of
    further ids, e.g. the target class in the NCE criterion, under the same
    sampling scheme that produced the set.
    """

    samples: np.ndarray  # (K,) int64
    expected_counts: np.ndarray  # (K,) float64, all > 0
    replacement: bool
    excluded_target: int | None = None
    source: NoiseDistribution | None = field(default=None, repr=False)
    shared: bool = False

    def __post_init__(self) -> None:
        samples = np.ascontiguousarray(self.samples, dtype=np.int64)
        counts = np.ascontiguousarray(self.expected_counts, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "expected_counts", counts)
        if samples.ndim != 1 or counts.shape != samples.shape:
            raise ValueError("samples and expected_counts must be 1-D and aligned")
        if samples.shape[0]:
            if counts.min() <= 0:
                raise ValueError("expected counts must be strictly positive")
            if self.excluded_target is not None and (samples == self.excluded_target).any():
                raise ValueError("sample set contains its excluded target")
            if not self.replacement and np.unique(samples).shape[0] != samples.shape[0]:
                raise ValueError("samples must be pairwise distinct without replacement")

    @property
    def k(self) -> int:
        return int(self.samples.shape[0])

    def expected_count_of(self, ids: np.ndarray) -> np.ndarray:
        """Expected counts for arbitrary ids under this set's sampling scheme."""
        if self.source is None:
            raise ValueError("sample set has no source distribution attached")
        return expected_count(self.source, ids, self.k, self.replacement)


def draw_with_replacement(
    dist: NoiseDistribution, k: int, rng: np.random.Generator
) -> SampleSet:
    """K iid draws; expected count of a drawn class is K * D(c)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    samples = dist.draw(k, rng)
    return SampleSet(
        samples=samples,
        expected_counts=k * dist.probs[samples],
        replacement=True,
        source=dist,
    )


def draw_without_replacement(
    dist: NoiseDistribution, k: int, rng: np.random.Generator
) -> SampleSet:
    """K distinct ids via rejection of duplicates, in first-draw order.

    Draws k iid candidates per round and keeps the unseen ones in draw order
    until k distinct ids are collected.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= dist.size:
        raise ValueError(f"k={k} must be < number of classes {dist.size}")
    if dist.support_count < k:
        raise ValueError("distribution has fewer than k classes with positive mass")
    # one round of ~T expected raw draws usually suffices to see k distinct
    per_round = max(k, int(dist.effective_draws(k)) + 8)
    seen = np.zeros(dist.size, dtype=bool)
    chosen = np.empty(k, dtype=np.int64)
    n = 0
    while n < k:
        draws = dist.draw(per_round, rng)
        uniq, first_at = np.unique(draws, return_index=True)
        fresh = ~seen[uniq]
        uniq, first_at = uniq[fresh], first_at[fresh]
        take = uniq[np.argsort(first_at)][: k - n]
        seen[take] = True
        chosen[n : n + take.shape[0]] = take
        n += take.shape[0]
    return SampleSet(
        samples=chosen,
        expected_counts=expected_count(dist, chosen, k, replacement=False),
        replacement=False,
        source=dist,
    )


def remap_excluding(sampled: np.ndarray, target: int) -> np.ndarray:
    """Bijection [0, C-1) -> [0, C) \\ {target}: shift ids >= target up by one."""
    sampled = np.asarray(sampled, dtype=np.int64)
    return sampled + (sampled >= target)


def draw_excluding_target(
    dist_family: NoiseDistribution, k: int, target: int, rng: np.random.Generator
) -> SampleSet:
    """Draw K classes that cannot equal ``target``.

    ``dist_family`` has C - 1 labels; draws are remapped around the target so
    the effective per-target distribution assigns it probability zero. The
    expected counts are those of the drawn labels under the family
    distribution, which equal the remapped distribution's values.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if target < 0 or target > dist_family.size:
        raise ValueError("target outside [0, C)")
    raw = dist_family.draw(k, rng)
    samples = remap_excluding(raw, target)
    return SampleSet(
        samples=samples,
        expected_counts=k * dist_family.probs[raw],
        replacement=True,
        excluded_target=target,
    )


def draw_excluding_targets(
    dist_family: NoiseDistribution,
    k: int,
    targets: np.ndarray,
    rng: np.random.Generator,
) -> list[SampleSet]:
    """Per-pair target-excluding sample sets, drawn in one vectorized pass."""
    targets = np.asarray(targets, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if targets.size and (targets.min() < 0 or targets.max() > dist_family.size):
        raise ValueError("target outside [0, C)")
    raw = np.searchsorted(
        dist_family.cumulative, rng.random((targets.shape[0], k)), side="right"
    ).astype(np.int64)
    counts = k * dist_family.probs[raw]
    samples = raw + (raw >= targets[:, None])
    return [
        SampleSet(
            samples=samples[n],
            expected_counts=counts[n],
            replacement=True,
            excluded_target=int(targets[n]),
        )
        for n in range(targets.shape[0])
    ]


def shared_batch_samples(
    dist: NoiseDistribution,
    k: int,
    rng: np.random.Generator,
    replacement: bool = True,
) -> SampleSet:
    """One sample set reused by every pair in a batch.

    Criteria whose noise distribution depends on the pair's target (Mode2)
    must not share samples; the trainer enforces that before training starts.
    """
    if replacement:
        base = draw_with_replacement(dist, k, rng)
    else:
        base = draw_without_replacement(dist, k, rng)
    return SampleSet(
        samples=base.samples,
        expected_counts=base.expected_counts,
        replacement=base.replacement,
        source=dist,
        shared=True,
    )


def per_pair_sample_arrays(
    sample_sets: Sequence[SampleSet],
) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-pair sample sets into (B, K) id and expected-count matrices."""
    ks = {s.k for s in sample_sets}
    if len(ks) != 1:
        raise ValueError("per-pair sample sets must share the same K")
    ids = np.stack([s.samples for s in sample_sets])
    counts = np.stack([s.expected_counts for s in sample_sets])
    return ids, counts
