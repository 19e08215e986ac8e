"""Sampling-based training criteria for small language models.

Implements full-vocabulary criteria (cross entropy, binary cross entropy),
sampled criteria (noise contrastive estimation, importance sampling) and three
self-normalized variants of importance sampling, together with a log-bilinear
model with hand-derived gradients, noise samplers, and an evaluation battery
(perplexity, normalization deficit, posterior recovery, K-sweeps, throughput).
"""

from snislm.corpus import (
    Batch,
    Corpus,
    SyntheticTask,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_task,
    load_task,
    make_batches,
    sample_corpus,
    save_task,
)
from snislm.criteria import (
    CriterionKind,
    LossResult,
    bce_full_loss,
    ce_loss,
    is_correct_posterior,
    is_loss,
    mode1_loss,
    mode2_loss,
    mode3_loss,
    nce_loss,
)
from snislm.evaluation import (
    MetricsRow,
    normalization_deficit,
    oracle_perplexity,
    perplexity,
    posterior_error,
)
from snislm.model import (
    AdamHyper,
    AdamState,
    ModelParams,
    ParamGrads,
    adam_step,
    backward,
    forward_hidden,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score_candidates,
    sgd_step,
)
from snislm.rng import stream_rng
from snislm.sampling import (
    NoiseDistribution,
    SampleSet,
    draw_excluding_target,
    draw_with_replacement,
    draw_without_replacement,
    log_uniform,
    shared_batch_samples,
    unigram,
)
from snislm.training import TrainConfig, bench_speed, sweep_k, train

__version__ = "0.1.0"

__all__ = [
    "AdamHyper",
    "AdamState",
    "Batch",
    "Corpus",
    "CriterionKind",
    "LossResult",
    "MetricsRow",
    "ModelParams",
    "NoiseDistribution",
    "ParamGrads",
    "SampleSet",
    "SyntheticTask",
    "TrainConfig",
    "Vocabulary",
    "adam_step",
    "backward",
    "bce_full_loss",
    "bench_speed",
    "build_vocabulary",
    "ce_loss",
    "draw_excluding_target",
    "draw_with_replacement",
    "draw_without_replacement",
    "forward_hidden",
    "generate_synthetic_task",
    "init_params",
    "is_correct_posterior",
    "is_loss",
    "load_checkpoint",
    "load_task",
    "log_uniform",
    "make_batches",
    "mode1_loss",
    "mode2_loss",
    "mode3_loss",
    "nce_loss",
    "normalization_deficit",
    "oracle_perplexity",
    "perplexity",
    "posterior_error",
    "sample_corpus",
    "save_checkpoint",
    "save_task",
    "score_candidates",
    "sgd_step",
    "shared_batch_samples",
    "stream_rng",
    "sweep_k",
    "train",
    "unigram",
]
