"""Training criteria: losses and analytic gradients with respect to raw scores.

Every criterion returns a value to MAXIMIZE (the batch mean of the per-pair
objective) together with its gradient at the scored positions. Raw scores s
are mapped to model outputs q by the criterion's link: softmax for full cross
entropy, the logistic function for the binary-style criteria (which keeps q in
(0, 1) so every log term is finite), and optionally exp for NCE.

Binary-style per-pair objectives, with q_t the target output, q_k the k-th
sampled output and E_k its expected count:

  bce_full   log q_t + sum over non-target classes of log(1 - q_c)
  nce        log(q_t / (q_t + E_t)) + sum_k log(1 - q_k / (q_k + E_k))
  is         log q_t + sum_k log(1 - q_k) / E_k
  mode1      is  -  log(1 - q_t)
  mode2      is, with per-target noise that cannot sample the target
  mode3      is, with the sampled term zeroed whenever a sample hits the target

The is criterion's optimum is q = p / (1 + p) (not normalized); mode1/2/3
restore the optimum q = p, hence self-normalized outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from snislm.numerics import CLAMP_EPS, clamped_sigmoid, exp_link, log_softmax, softmax
from snislm.sampling import SampleSet, per_pair_sample_arrays

TAGS = ("CE", "BCE_FULL", "NCE", "IS", "MODE1", "MODE2", "MODE3")
NAMES = {"ce": "CE", "bce": "BCE_FULL", "nce": "NCE", "is": "IS",
         "mode1": "MODE1", "mode2": "MODE2", "mode3": "MODE3"}


@dataclass(frozen=True)
class CriterionKind:
    """Which objective is trained and which link maps scores to outputs."""

    tag: str
    link: str = "sigmoid"

    def __post_init__(self) -> None:
        if self.tag not in TAGS:
            raise ValueError(f"unknown criterion tag {self.tag!r}")
        if self.tag == "CE":
            if self.link != "softmax":
                raise ValueError("CE requires the softmax link")
        elif self.tag == "NCE":
            if self.link not in ("sigmoid", "exp"):
                raise ValueError("NCE admits the sigmoid or exp link")
        elif self.link != "sigmoid":
            raise ValueError(f"{self.tag} requires the sigmoid link")

    @classmethod
    def of(cls, name: str, link: str | None = None) -> "CriterionKind":
        tag = NAMES.get(name.lower())
        if tag is None:
            raise ValueError(f"unknown criterion name {name!r}")
        if link is None:
            link = "softmax" if tag == "CE" else "sigmoid"
        return cls(tag=tag, link=link)

    @property
    def name(self) -> str:
        return {v: k for k, v in NAMES.items()}[self.tag]

    @property
    def full_vocabulary(self) -> bool:
        return self.tag in ("CE", "BCE_FULL")

    @property
    def excludes_target(self) -> bool:
        return self.tag == "MODE2"


@dataclass
class LossResult:
    """Scalar objective (batch mean, to maximize) and its sparse score gradient.

    Gradients are stored as arrays aligned with the scored positions; the
    ``grads`` property materializes the per-pair map from class id to dF/ds,
    accumulating duplicate candidates additively.
    """

    loss: float
    targets: np.ndarray | None = None
    sample_ids: np.ndarray | None = None  # (K,) shared or (B, K) per pair
    d_target_scores: np.ndarray | None = None  # (B,)
    d_sample_scores: np.ndarray | None = None  # (B, K)
    d_full_scores: np.ndarray | None = None  # (B, C)

    @property
    def batch_size(self) -> int:
        if self.d_full_scores is not None:
            return int(self.d_full_scores.shape[0])
        return int(self.d_target_scores.shape[0])

    @property
    def grads(self) -> list[dict[int, float]]:
        out: list[dict[int, float]] = []
        for n in range(self.batch_size):
            g: dict[int, float] = {}
            if self.d_full_scores is not None:
                for c, v in enumerate(self.d_full_scores[n]):
                    g[c] = g.get(c, 0.0) + float(v)
            if self.d_target_scores is not None:
                t = int(self.targets[n])
                g[t] = g.get(t, 0.0) + float(self.d_target_scores[n])
            if self.d_sample_scores is not None:
                ids = self.sample_ids if self.sample_ids.ndim == 1 else self.sample_ids[n]
                for k, c in enumerate(ids):
                    c = int(c)
                    g[c] = g.get(c, 0.0) + float(self.d_sample_scores[n, k])
            out.append(g)
        return out


def _as_2d(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores[None, :] if scores.ndim == 1 else scores


def _sample_arrays(
    sample_set: SampleSet | Sequence[SampleSet], batch_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Normalize shared/per-pair sample sets to (ids, counts, exclusions)."""
    if isinstance(sample_set, SampleSet):
        excl = None
        if sample_set.excluded_target is not None:
            excl = np.full(batch_size, sample_set.excluded_target, dtype=np.int64)
        return sample_set.samples, sample_set.expected_counts[None, :], excl
    sets = list(sample_set)
    if len(sets) != batch_size:
        raise ValueError(f"expected {batch_size} per-pair sample sets, got {len(sets)}")
    ids, counts = per_pair_sample_arrays(sets)
    if all(s.excluded_target is not None for s in sets):
        excl = np.array([s.excluded_target for s in sets], dtype=np.int64)
    else:
        excl = None
    return ids, counts, excl


def ce_loss(all_scores: np.ndarray, targets: np.ndarray) -> LossResult:
    """Full-softmax cross entropy: mean log softmax(s)[target]."""
    s = np.asarray(all_scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    b = s.shape[0]
    logp = log_softmax(s, axis=1)
    loss = float(np.mean(logp[np.arange(b), targets]))
    d_full = -softmax(s, axis=1)
    d_full[np.arange(b), targets] += 1.0
    d_full /= b
    return LossResult(loss=loss, targets=targets, d_full_scores=d_full)


def bce_full_loss(all_scores: np.ndarray, targets: np.ndarray) -> LossResult:
    """Binary cross entropy over the full vocabulary, q = sigmoid(s)."""
    s = np.asarray(all_scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    b = s.shape[0]
    rows = np.arange(b)
    q = clamped_sigmoid(s)
    q_t = q[rows, targets]
    total = np.log1p(-q).sum(axis=1) - np.log1p(-q_t) + np.log(q_t)
    loss = float(np.mean(total))
    d_full = -q / b
    d_full[rows, targets] = (1.0 - q_t) / b
    return LossResult(loss=loss, targets=targets, d_full_scores=d_full)


def _target_part(target_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(log q_t, d/ds log q_t) for the sigmoid link."""
    q_t = clamped_sigmoid(np.asarray(target_scores, dtype=np.float64))
    return np.log(q_t), 1.0 - q_t


def nce_loss(
    target_scores: np.ndarray,
    sample_scores: np.ndarray,
    sample_set: SampleSet | Sequence[SampleSet],
    target_expected_counts: np.ndarray,
    link: str = "sigmoid",
    targets: np.ndarray | None = None,
) -> LossResult:
    """Noise contrastive estimation.

    ``target_expected_counts`` holds E for each pair's target class under the
    same noise distribution and scheme that produced the samples; a target
    with zero noise support is a contract violation.
    """
    t_scores = np.asarray(target_scores, dtype=np.float64)
    s_scores = _as_2d(sample_scores)
    b = t_scores.shape[0]
    ids, e_k, _ = _sample_arrays(sample_set, b)
    e_t = np.asarray(target_expected_counts, dtype=np.float64)
    if np.any(e_t <= 0):
        raise ValueError("NCE target expected count is zero: target has no noise support")
    if link == "sigmoid":
        q_t = clamped_sigmoid(t_scores)
        q_k = clamped_sigmoid(s_scores)
        dq_t, dq_k = q_t * (1.0 - q_t), q_k * (1.0 - q_k)
    elif link == "exp":
        q_t = np.maximum(exp_link(t_scores), CLAMP_EPS)
        q_k = np.maximum(exp_link(s_scores), CLAMP_EPS)
        dq_t, dq_k = q_t, q_k
    else:
        raise ValueError(f"NCE link must be sigmoid or exp, got {link!r}")
    per_pair = np.log(q_t / (q_t + e_t)) + np.sum(np.log(e_k / (q_k + e_k)), axis=1)
    loss = float(np.mean(per_pair))
    d_t = dq_t * e_t / (q_t * (q_t + e_t)) / b
    d_k = -dq_k / (q_k + e_k) / b
    return LossResult(
        loss=loss,
        targets=targets,
        sample_ids=ids,
        d_target_scores=d_t,
        d_sample_scores=d_k,
    )


def is_loss(
    target_scores: np.ndarray,
    sample_scores: np.ndarray,
    sample_set: SampleSet | Sequence[SampleSet],
    targets: np.ndarray | None = None,
) -> LossResult:
    """Importance sampling: log q_t + sum_k log(1 - q_k) / E_k.

    The optimum output is p / (1 + p); apply ``is_correct_posterior`` to
    recover the class posterior.
    """
    t_scores = np.asarray(target_scores, dtype=np.float64)
    s_scores = _as_2d(sample_scores)
    b = t_scores.shape[0]
    ids, e_k, _ = _sample_arrays(sample_set, b)
    log_qt, d_t = _target_part(t_scores)
    q_k = clamped_sigmoid(s_scores)
    per_pair = log_qt + np.sum(np.log1p(-q_k) / e_k, axis=1)
    return LossResult(
        loss=float(np.mean(per_pair)),
        targets=targets,
        sample_ids=ids,
        d_target_scores=d_t / b,
        d_sample_scores=-q_k / e_k / b,
    )


def is_correct_posterior(q: np.ndarray | float) -> np.ndarray | float:
    """Invert the importance-sampling optimum: q / (1 - q) recovers p.

    The caller may renormalize the corrected values over a candidate list.
    """
    arr = np.asarray(q, dtype=np.float64)
    if np.any(arr >= 1.0) or np.any(arr < 0.0):
        raise ValueError("correction requires outputs in [0, 1)")
    out = arr / (1.0 - arr)
    return float(out) if np.isscalar(q) else out


def mode1_loss(
    target_scores: np.ndarray,
    sample_scores: np.ndarray,
    sample_set: SampleSet | Sequence[SampleSet],
    targets: np.ndarray | None = None,
) -> LossResult:
    """Self-normalized IS, subtraction form: is - log(1 - q_t).

    Sampling may include the target; a hit contributes through the sampled
    term exactly as any other sample. With the target unsampled the gradient
    with respect to log q_t is 1 + q_t / (1 - q_t), which grows without bound
    as q_t approaches 1 - the small-K convergence pathology of this mode.
    """
    base = is_loss(target_scores, sample_scores, sample_set, targets=targets)
    q_t = clamped_sigmoid(np.asarray(target_scores, dtype=np.float64))
    b = q_t.shape[0]
    extra = -np.log1p(-q_t)
    return LossResult(
        loss=base.loss + float(np.mean(extra)),
        targets=base.targets,
        sample_ids=base.sample_ids,
        d_target_scores=base.d_target_scores + q_t / b,
        d_sample_scores=base.d_sample_scores,
    )


def mode2_loss(
    target_scores: np.ndarray,
    sample_scores: np.ndarray,
    sample_set: SampleSet | Sequence[SampleSet],
    targets: np.ndarray,
) -> LossResult:
    """Self-normalized IS via per-target noise with zero mass on the target.

    Arithmetic is identical to ``is_loss``; the defining contract is that each
    pair's sample set excludes exactly that pair's target.
    """
    targets = np.asarray(targets, dtype=np.int64)
    b = targets.shape[0]
    _, _, exclusions = _sample_arrays(sample_set, b)
    if exclusions is None:
        raise ValueError("mode2 requires target-excluding sample sets")
    bad = np.nonzero(exclusions != targets)[0]
    if bad.size:
        n = int(bad[0])
        raise ValueError(
            f"mode2 sample set for pair {n} excludes {int(exclusions[n])}, "
            f"but the pair's target is {int(targets[n])}"
        )
    result = is_loss(target_scores, sample_scores, sample_set)
    result.targets = targets
    return result


def mode3_loss(
    target_scores: np.ndarray,
    sample_scores: np.ndarray,
    sample_set: SampleSet | Sequence[SampleSet],
    targets: np.ndarray,
) -> LossResult:
    """Self-normalized IS, zeroing the sampled term when it hits the target.

    Equals ``is_loss`` whenever no sample coincides with the pair's target.
    Intended for sampling without replacement, where at most one sample can
    be zeroed per pair.
    """
    t_scores = np.asarray(target_scores, dtype=np.float64)
    s_scores = _as_2d(sample_scores)
    targets = np.asarray(targets, dtype=np.int64)
    b = t_scores.shape[0]
    ids, e_k, _ = _sample_arrays(sample_set, b)
    keep = (ids[None, :] if ids.ndim == 1 else ids) != targets[:, None]
    log_qt, d_t = _target_part(t_scores)
    q_k = clamped_sigmoid(s_scores)
    per_pair = log_qt + np.sum(np.where(keep, np.log1p(-q_k) / e_k, 0.0), axis=1)
    return LossResult(
        loss=float(np.mean(per_pair)),
        targets=targets,
        sample_ids=ids,
        d_target_scores=d_t / b,
        d_sample_scores=np.where(keep, -q_k / e_k, 0.0) / b,
    )
