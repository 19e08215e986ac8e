"""Training loop wiring criteria, samplers and the model, plus K-sweeps and
throughput benchmarks.

Criteria return objectives to maximize; the optimizers ascend them. The sign
is flipped exactly once, when the per-epoch training loss is reported, so the
metrics column behaves like a conventional loss (lower is better).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from snislm.corpus import Batch, Corpus, SyntheticTask, make_batches
from snislm.criteria import (
    CriterionKind,
    bce_full_loss,
    ce_loss,
    is_loss,
    mode1_loss,
    mode2_loss,
    mode3_loss,
    nce_loss,
)
from snislm.evaluation import (
    MetricsRow,
    normalization_deficit,
    perplexity,
    posterior_error,
)
from snislm.model import (
    AdamHyper,
    AdamState,
    ModelParams,
    adam_step,
    backward,
    forward_hidden,
    init_params,
    score_candidates,
    sgd_step,
)
from snislm.rng import stream_rng
from snislm.sampling import (
    NoiseDistribution,
    draw_excluding_targets,
    expected_count,
    log_uniform,
    shared_batch_samples,
    unigram_from_counts,
)

SAMPLERS = ("with_replacement", "without_replacement", "exclude_target")
NOISES = ("log_uniform", "unigram")
OPTIMIZERS = ("sgd", "adam")

# Stream tags keep RNG consumers on disjoint Philox paths.
_TAG_SAMPLES = 0x5A
_TAG_BENCH = 0xBE


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the data itself."""

    criterion: CriterionKind
    k: int = 16
    sampler: str = "with_replacement"
    share_batch: bool = True
    noise: str = "log_uniform"
    smoothing: float = 1.0
    optimizer: str = "adam"
    lr: float = 0.05
    lr_decay: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 64
    shuffle: bool = True
    seed: int = 1
    eval_every: int = 1
    dim: int = 64
    combiner: str = "matrix"
    order: int = 1
    eval_contexts: int = 512
    record_timing: bool = True

    def validate(self) -> None:
        """Refuse inconsistent criterion/sampler combinations up front."""
        tag = self.criterion.tag
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise {self.noise!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if tag == "MODE2":
            if self.sampler != "exclude_target":
                raise ValueError("mode2 requires the target-excluding sampler")
            if self.share_batch:
                raise ValueError("mode2 cannot share samples across a batch")
            if self.noise != "log_uniform":
                raise ValueError("mode2 target exclusion is defined for log-uniform noise")
        elif self.sampler == "exclude_target":
            raise ValueError(f"{tag} must not use the target-excluding sampler")
        if not self.criterion.full_vocabulary and self.k < 1:
            raise ValueError("sampled criteria require k >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.dim < 1 or self.order < 1:
            raise ValueError("batch_size, dim and order must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")

    @property
    def effective_k(self) -> int:
        """K as reported in metrics: 0 for full-vocabulary criteria."""
        return 0 if self.criterion.full_vocabulary else self.k


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[MetricsRow] = field(default_factory=list)
    adam_state: AdamState | None = None


class _Stepper:
    """One training step: sample, score, loss, backward, update."""

    def __init__(self, config: TrainConfig, vocab_size: int, corpus: Corpus | None):
        self.config = config
        self.kind = config.criterion
        self.vocab_size = vocab_size
        self.replacement = config.sampler != "without_replacement"
        self.dist: NoiseDistribution | None = None
        self.family: NoiseDistribution | None = None
        if not self.kind.full_vocabulary:
            if self.kind.excludes_target:
                self.family = log_uniform(vocab_size - 1)
            elif config.noise == "log_uniform":
                self.dist = log_uniform(vocab_size)
            else:
                counts = np.bincount(corpus.ids, minlength=vocab_size)
                self.dist = unigram_from_counts(counts, config.smoothing)
        self.params = init_params(
            vocab_size, config.dim, config.order, config.seed, config.combiner
        )
        self.adam_state = AdamState.zeros_like(self.params) if config.optimizer == "adam" else None
        self.lr = config.lr

    def set_epoch(self, epoch: int) -> None:
        self.lr = self.config.lr * self.config.lr_decay**epoch

    def step(self, batch: Batch, rng: np.random.Generator) -> float:
        """Run one update; returns the batch objective (to maximize)."""
        config = self.config
        kind = self.kind
        hidden = forward_hidden(self.params, batch.histories)
        targets = batch.targets
        if kind.full_vocabulary:
            scores = score_candidates(self.params, hidden, None)
            loss = ce_loss(scores, targets) if kind.tag == "CE" else bce_full_loss(scores, targets)
        else:
            t_scores = score_candidates(self.params, hidden, targets[:, None])[:, 0]
            if kind.excludes_target:
                sets = draw_excluding_targets(self.family, config.k, targets, rng)
                ids = np.stack([s.samples for s in sets])
            elif config.share_batch:
                sets = shared_batch_samples(self.dist, config.k, rng, self.replacement)
                ids = sets.samples
            else:
                sets = [
                    shared_batch_samples(self.dist, config.k, rng, self.replacement)
                    for _ in range(batch.size)
                ]
                ids = np.stack([s.samples for s in sets])
            s_scores = score_candidates(self.params, hidden, ids)
            if kind.tag == "NCE":
                e_t = expected_count(self.dist, targets, config.k, self.replacement)
                loss = nce_loss(t_scores, s_scores, sets, e_t, kind.link, targets=targets)
            elif kind.tag == "IS":
                loss = is_loss(t_scores, s_scores, sets, targets=targets)
            elif kind.tag == "MODE1":
                loss = mode1_loss(t_scores, s_scores, sets, targets=targets)
            elif kind.tag == "MODE2":
                loss = mode2_loss(t_scores, s_scores, sets, targets)
            else:
                loss = mode3_loss(t_scores, s_scores, sets, targets)
        grads = backward(self.params, batch, loss)
        if self.adam_state is None:
            sgd_step(self.params, grads, self.lr)
        else:
            hyper = AdamHyper(
                lr=self.lr,
                beta1=config.adam_beta1,
                beta2=config.adam_beta2,
                eps=config.adam_eps,
            )
            adam_step(self.params, grads, self.adam_state, hyper)
        return loss.loss


def train(
    config: TrainConfig, corpus: Corpus, task: SyntheticTask | None = None
) -> TrainResult:
    """Train a model on the corpus, emitting one metrics row per eval point.

    Fully deterministic given the config seed: batch permutations and noise
    draws come from per-(epoch, batch) streams. ``epochs == 0`` returns the
    freshly initialized parameters and no metrics.
    """
    config.validate()
    stepper = _Stepper(config, corpus.vocab_size, corpus)
    rows: list[MetricsRow] = []
    timing = config.record_timing
    for epoch in range(config.epochs):
        stepper.set_epoch(epoch)
        loss_sum = 0.0
        pair_count = 0
        seconds = 0.0
        n_batches = 0
        batches = make_batches(
            corpus,
            config.batch_size,
            config.order,
            shuffle=config.shuffle,
            seed=config.seed,
            epoch=epoch,
        )
        for i, batch in enumerate(batches):
            rng = stream_rng(config.seed, _TAG_SAMPLES, epoch, i)
            t0 = time.perf_counter() if timing else 0.0
            batch_loss = stepper.step(batch, rng)
            if timing:
                seconds += time.perf_counter() - t0
            loss_sum += batch_loss * batch.size
            pair_count += batch.size
            n_batches += 1
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            rows.append(
                _metrics_row(
                    config,
                    stepper.params,
                    corpus,
                    task,
                    epoch=epoch + 1,
                    train_loss=-loss_sum / pair_count,
                    sec_per_batch=seconds / n_batches if timing else 0.0,
                )
            )
    return TrainResult(params=stepper.params, metrics=rows, adam_state=stepper.adam_state)


def _metrics_row(
    config: TrainConfig,
    params: ModelParams,
    corpus: Corpus,
    task: SyntheticTask | None,
    epoch: int,
    train_loss: float,
    sec_per_batch: float,
) -> MetricsRow:
    kind = config.criterion
    tv = None
    if task is not None:
        tv = posterior_error(params, kind, task, corpus)
    return MetricsRow(
        epoch=epoch,
        criterion=kind.name,
        k=config.effective_k,
        train_loss=train_loss,
        eval_ppl=perplexity(params, kind, corpus),
        norm_deficit=normalization_deficit(params, kind, corpus, config.eval_contexts),
        posterior_tv=tv,
        sec_per_batch=sec_per_batch,
    )


def evaluate(
    config: TrainConfig,
    params: ModelParams,
    corpus: Corpus,
    task: SyntheticTask | None = None,
    epoch: int = 0,
    train_loss: float = 0.0,
) -> MetricsRow:
    """Metrics row for an already-trained model."""
    return _metrics_row(config, params, corpus, task, epoch, train_loss, 0.0)


def sweep_k(
    config: TrainConfig,
    corpus: Corpus,
    ks: list[int],
    task: SyntheticTask | None = None,
) -> list[MetricsRow]:
    """One full training per K with shared seeds; final metrics row per K."""
    if config.epochs < 1:
        raise ValueError("sweep_k requires epochs >= 1")
    rows = []
    for k in ks:
        result = train(replace(config, k=k), corpus, task)
        rows.append(result.metrics[-1])
    return rows


def bench_speed(
    config: TrainConfig,
    vocab_size: int,
    warmup_batches: int = 20,
    measure_batches: int = 200,
    threads: int = 1,
) -> float:
    """Mean wall-clock seconds per training step on synthetic batches.

    Batches hold uniform random ids (step cost does not depend on token
    values). BLAS thread pools are pinned to ``threads`` when threadpoolctl
    is available, to keep timings comparable across criteria.
    """
    config.validate()
    if warmup_batches < 0 or measure_batches < 1:
        raise ValueError("need warmup_batches >= 0 and measure_batches >= 1")
    total = warmup_batches + measure_batches
    rng = stream_rng(config.seed, _TAG_BENCH)
    n_tokens = total * config.batch_size + config.order
    ids = rng.integers(0, vocab_size, size=n_tokens, dtype=np.int64)
    corpus = Corpus(ids=ids, vocab_size=vocab_size)
    stepper = _Stepper(config, vocab_size, corpus)

    def run() -> float:
        seconds = 0.0
        measured = 0
        batches = make_batches(corpus, config.batch_size, config.order)
        for i, batch in enumerate(batches):
            if i >= total:
                break
            batch_rng = stream_rng(config.seed, _TAG_BENCH, 1, i)
            t0 = time.perf_counter()
            stepper.step(batch, batch_rng)
            if i >= warmup_batches:
                seconds += time.perf_counter() - t0
                measured += 1
        return seconds / measured

    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return run()
    with threadpool_limits(limits=threads):
        return run()
