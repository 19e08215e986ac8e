"""End-to-end analytic-vs-finite-difference gradient verification.

For random small instances, every parameter entry the batch touches is
perturbed by central differences over the full objective (sample draws held
fixed), and compared with the analytic gradient from ``backward``. The check
is the strongest single correctness statement the package makes: it covers
every criterion's loss formula, the chain rule through scoring and the hidden
combiner, and the sparse accumulation of duplicate candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from snislm.corpus import Batch
from snislm.criteria import (
    TAGS,
    CriterionKind,
    bce_full_loss,
    ce_loss,
    is_loss,
    mode1_loss,
    mode2_loss,
    mode3_loss,
    nce_loss,
)
from snislm.model import ModelParams, backward, forward_hidden, init_params, score_candidates
from snislm.rng import stream_rng
from snislm.sampling import (
    SampleSet,
    draw_excluding_target,
    draw_with_replacement,
    draw_without_replacement,
    expected_count,
    log_uniform,
)

DEFAULT_STEP = 1e-5


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    instances: int
    entries_checked: int


def _loss_for(
    kind: CriterionKind,
    params: ModelParams,
    batch: Batch,
    sample_sets: SampleSet | list[SampleSet] | None,
    target_expected: np.ndarray | None,
):
    hidden = forward_hidden(params, batch.histories)
    targets = batch.targets
    if kind.tag == "CE":
        return ce_loss(score_candidates(params, hidden, None), targets)
    if kind.tag == "BCE_FULL":
        return bce_full_loss(score_candidates(params, hidden, None), targets)
    t_scores = score_candidates(params, hidden, targets[:, None])[:, 0]
    if isinstance(sample_sets, SampleSet):
        ids = sample_sets.samples
    else:
        ids = np.stack([s.samples for s in sample_sets])
    s_scores = score_candidates(params, hidden, ids)
    if kind.tag == "NCE":
        return nce_loss(t_scores, s_scores, sample_sets, target_expected, kind.link, targets=targets)
    if kind.tag == "IS":
        return is_loss(t_scores, s_scores, sample_sets, targets=targets)
    if kind.tag == "MODE1":
        return mode1_loss(t_scores, s_scores, sample_sets, targets=targets)
    if kind.tag == "MODE2":
        return mode2_loss(t_scores, s_scores, sample_sets, targets)
    return mode3_loss(t_scores, s_scores, sample_sets, targets)


def _random_instance(kind: CriterionKind, rng: np.random.Generator):
    vocab_size = int(rng.integers(4, 17))
    dim = int(rng.integers(2, 9))
    order = int(rng.integers(1, 3))
    batch_size = int(rng.integers(1, 5))
    k = int(rng.integers(1, min(9, vocab_size)))
    combiner = "matrix" if rng.random() < 0.8 else "average"
    params = init_params(vocab_size, dim, order, int(rng.integers(1 << 30)), combiner)
    # Spread the parameters out so scores (and gradients) are non-degenerate.
    params.input_embeddings += rng.normal(scale=0.5, size=params.input_embeddings.shape)
    params.output_embeddings += rng.normal(scale=0.5, size=params.output_embeddings.shape)
    params.output_bias += rng.normal(scale=0.5, size=params.output_bias.shape)
    if params.context_weights is not None:
        params.context_weights += rng.normal(scale=0.5, size=params.context_weights.shape)
    batch = Batch(
        histories=rng.integers(0, vocab_size, size=(batch_size, order)),
        targets=rng.integers(0, vocab_size, size=batch_size),
    )
    sample_sets = None
    target_expected = None
    if not kind.full_vocabulary:
        noise = log_uniform(vocab_size)
        if kind.tag == "MODE2":
            family = log_uniform(vocab_size - 1)
            sample_sets = [
                draw_excluding_target(family, k, int(t), rng) for t in batch.targets
            ]
        elif kind.tag == "MODE3":
            sample_sets = draw_without_replacement(noise, k, rng)
        else:
            sample_sets = draw_with_replacement(noise, k, rng)
            if kind.tag == "NCE":
                target_expected = expected_count(noise, batch.targets, k, replacement=True)
    return params, batch, sample_sets, target_expected


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)


def check_criterion(
    kind: CriterionKind,
    instances: int = 50,
    seed: int = 0,
    step: float = DEFAULT_STEP,
) -> GradCheckReport:
    """Max relative error between analytic and central-difference gradients."""
    rng = stream_rng(seed, 0x6C, TAGS.index(kind.tag))
    max_err = 0.0
    entries = 0
    for _ in range(instances):
        params, batch, sample_sets, target_expected = _random_instance(kind, rng)
        loss = _loss_for(kind, params, batch, sample_sets, target_expected)
        grads = backward(params, batch, loss)

        def loss_at(p: ModelParams) -> float:
            return _loss_for(kind, p, batch, sample_sets, target_expected).loss

        def fd(tensor: np.ndarray, index: tuple[int, ...]) -> float:
            orig = tensor[index]
            tensor[index] = orig + step
            up = loss_at(params)
            tensor[index] = orig - step
            down = loss_at(params)
            tensor[index] = orig
            return (up - down) / (2.0 * step)

        dense_out = grads.dense_output(params.vocab_size)
        dense_bias = grads.dense_bias(params.vocab_size)
        dense_in = grads.dense_input(params.vocab_size)
        out_rows = set(int(i) for i in grads.output_ids)
        # one untouched output row keeps the sparsity claim honest
        for row in range(params.vocab_size):
            if row not in out_rows:
                out_rows.add(row)
                break
        for row in sorted(out_rows):
            for col in range(params.dim):
                err = _rel_error(dense_out[row, col], fd(params.output_embeddings, (row, col)))
                max_err = max(max_err, err)
                entries += 1
            err = _rel_error(dense_bias[row], fd(params.output_bias, (row,)))
            max_err = max(max_err, err)
            entries += 1
        for row in grads.input_ids:
            for col in range(params.dim):
                err = _rel_error(dense_in[row, col], fd(params.input_embeddings, (row, col)))
                max_err = max(max_err, err)
                entries += 1
        if grads.context_grads is not None:
            for index in np.ndindex(*grads.context_grads.shape):
                err = _rel_error(grads.context_grads[index], fd(params.context_weights, index))
                max_err = max(max_err, err)
                entries += 1
    return GradCheckReport(max_rel_error=max_err, instances=instances, entries_checked=entries)
