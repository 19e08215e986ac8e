"""Evaluation battery: perplexity, normalization deficit, posterior recovery.

Perplexity is always computed from properly normalized per-context
distributions: full cross entropy uses the softmax directly; sigmoid-trained
models are renormalized over the full vocabulary; importance-sampling models
are first mapped through the posterior correction q / (1 - q) and then
renormalized. Raw (unnormalized) output behaviour is measured separately by
the normalization deficit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from snislm.corpus import Corpus, SyntheticTask, corpus_pairs
from snislm.criteria import CriterionKind, is_correct_posterior
from snislm.model import ModelParams, forward_hidden, score_candidates
from snislm.numerics import clamped_sigmoid, exp_link, softmax

METRICS_HEADER = "epoch,criterion,K,train_loss,eval_ppl,norm_deficit,posterior_tv,sec_per_batch"

_EVAL_CHUNK = 512


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    criterion: str
    k: int
    train_loss: float
    eval_ppl: float
    norm_deficit: float
    posterior_tv: float | None
    sec_per_batch: float

    def __post_init__(self) -> None:
        if self.eval_ppl < 1.0:
            raise ValueError(f"perplexity {self.eval_ppl} < 1")
        if self.norm_deficit < 0.0:
            raise ValueError(f"normalization deficit {self.norm_deficit} < 0")
        if self.posterior_tv is not None and not 0.0 <= self.posterior_tv <= 1.0:
            raise ValueError(f"posterior TV {self.posterior_tv} outside [0, 1]")
        if self.sec_per_batch < 0.0:
            raise ValueError("sec_per_batch must be >= 0")


def write_metrics_csv(rows: list[MetricsRow], path: str | Path) -> None:
    """Write rows under the fixed header, LF line endings, '.' decimals."""
    path = Path(path)
    lines = [METRICS_HEADER]
    for r in rows:
        tv = "" if r.posterior_tv is None else repr(r.posterior_tv)
        lines.append(
            f"{r.epoch},{r.criterion},{r.k},{r.train_loss!r},{r.eval_ppl!r},"
            f"{r.norm_deficit!r},{tv},{r.sec_per_batch!r}"
        )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    tmp.replace(path)


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    path = Path(path)
    rows: list[MetricsRow] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if ",".join(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {','.join(header)!r}")
        for rec in reader:
            if not rec:
                continue
            rows.append(
                MetricsRow(
                    epoch=int(rec[0]),
                    criterion=rec[1],
                    k=int(rec[2]),
                    train_loss=float(rec[3]),
                    eval_ppl=float(rec[4]),
                    norm_deficit=float(rec[5]),
                    posterior_tv=None if rec[6] == "" else float(rec[6]),
                    sec_per_batch=float(rec[7]),
                )
            )
    return rows


def raw_outputs(params: ModelParams, histories: np.ndarray, kind: CriterionKind) -> np.ndarray:
    """Link outputs q(x, .) over the full vocabulary, shape (N, C)."""
    scores = score_candidates(params, forward_hidden(params, histories), None)
    if kind.link == "softmax":
        return softmax(scores, axis=1)
    if kind.link == "exp":
        return exp_link(scores)
    return clamped_sigmoid(scores)


def normalized_probabilities(
    params: ModelParams, histories: np.ndarray, kind: CriterionKind
) -> np.ndarray:
    """Per-context probability distributions used for perplexity.

    Importance-sampling outputs go through the posterior correction before
    renormalizing; everything else renormalizes the raw outputs (a no-op for
    softmax).
    """
    q = raw_outputs(params, histories, kind)
    if kind.tag == "IS":
        q = is_correct_posterior(q)
    total = q.sum(axis=1, keepdims=True)
    if np.any(total <= 0.0):
        raise ValueError("cannot normalize: outputs sum to zero for some context")
    return q / total


def perplexity(params: ModelParams, kind: CriterionKind, corpus: Corpus) -> float:
    """exp of the mean negative log probability of each target token."""
    histories, targets = corpus_pairs(corpus, params.order)
    n = targets.shape[0]
    total = 0.0
    for start in range(0, n, _EVAL_CHUNK):
        h = histories[start : start + _EVAL_CHUNK]
        t = targets[start : start + _EVAL_CHUNK]
        probs = normalized_probabilities(params, h, kind)
        total += float(np.sum(np.log(probs[np.arange(t.shape[0]), t])))
    return math.exp(-total / n)


def _eval_context_rows(corpus: Corpus, order: int, num_contexts: int) -> np.ndarray:
    histories, _ = corpus_pairs(corpus, order)
    n = histories.shape[0]
    if n <= num_contexts:
        return histories
    idx = np.unique(np.linspace(0, n - 1, num_contexts).astype(np.int64))
    return histories[idx]


def normalization_deficit(
    params: ModelParams,
    kind: CriterionKind,
    corpus: Corpus,
    num_contexts: int = 512,
    correct: bool = False,
) -> float:
    """Mean |sum_c q(x, c) - 1| over contexts drawn from the corpus.

    ``correct`` applies the importance-sampling posterior correction before
    summing, which restores near-unit mass for a converged IS model.
    """
    histories = _eval_context_rows(corpus, params.order, num_contexts)
    deficits = []
    for start in range(0, histories.shape[0], _EVAL_CHUNK):
        q = raw_outputs(params, histories[start : start + _EVAL_CHUNK], kind)
        if correct:
            q = is_correct_posterior(q)
        deficits.append(np.abs(q.sum(axis=1) - 1.0))
    return float(np.mean(np.concatenate(deficits)))


def representative_histories(task: SyntheticTask, corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """One representative history per task state observed in the corpus.

    Returns (state ids, histories); states never visited by the corpus are
    omitted, since no concrete history for them is available.
    """
    histories, _ = corpus_pairs(corpus, task.order)
    states = task.states_of(histories)
    state_ids, first = np.unique(states, return_index=True)
    return state_ids, histories[first]


def posterior_error(
    params: ModelParams,
    kind: CriterionKind,
    task: SyntheticTask,
    corpus: Corpus,
) -> float:
    """Mean total-variation distance between model and true posteriors.

    Model posteriors follow the same normalization convention as perplexity.
    Averaged uniformly over the task states observed in the corpus.
    """
    state_ids, histories = representative_histories(task, corpus)
    tvs = []
    for start in range(0, histories.shape[0], _EVAL_CHUNK):
        sl = slice(start, start + _EVAL_CHUNK)
        probs = normalized_probabilities(params, histories[sl], kind)
        truth = task.table[state_ids[sl]]
        tvs.append(0.5 * np.abs(probs - truth).sum(axis=1))
    return float(np.mean(np.concatenate(tvs)))


def oracle_perplexity(task: SyntheticTask, corpus: Corpus) -> float:
    """Perplexity of the true table itself on the corpus.

    This is the optimum any model can reach; as the corpus grows it converges
    to the exponential of the true conditional entropy under the empirical
    history distribution.
    """
    histories, targets = corpus_pairs(corpus, task.order)
    states = task.states_of(histories)
    p = task.table[states, targets]
    if np.any(p <= 0.0):
        raise ValueError("corpus contains a transition with zero true probability")
    return math.exp(-float(np.mean(np.log(p))))
