"""Log-bilinear language model with hand-derived gradients and optimizers.

The model maps an m-token history to a hidden state h, either through one
d x d matrix per history position (h = sum_j W_j e(x_j)) or by averaging the
history embeddings, and scores a candidate class c as s = w_c . h + b_c.
Gradients touch only the parameter rows involved in a batch, which is the
efficiency sampled criteria exist for, so they are kept in compacted
(row ids, row values) form throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from snislm.corpus import Batch
from snislm.criteria import LossResult
from snislm.rng import stream_rng

MODEL_MAGIC = b"SNISMODL"
ADAM_MAGIC = b"SNISADAM"
MODEL_FORMAT_VERSION = 1

_COMBINERS = ("matrix", "average")


@dataclass
class ModelParams:
    """All trainable tensors. Mutated in place by optimizer steps."""

    input_embeddings: np.ndarray  # (C, d)
    context_weights: np.ndarray | None  # (m, d, d), None for the average combiner
    output_embeddings: np.ndarray  # (C, d)
    output_bias: np.ndarray  # (C,)
    order: int
    combiner: str = "matrix"

    def __post_init__(self) -> None:
        if self.combiner not in _COMBINERS:
            raise ValueError(f"combiner must be one of {_COMBINERS}")
        if self.combiner == "matrix":
            if self.context_weights is None:
                raise ValueError("matrix combiner requires context weights")
            if self.context_weights.shape != (self.order, self.dim, self.dim):
                raise ValueError("context_weights must be (order, d, d)")
        elif self.context_weights is not None:
            raise ValueError("average combiner takes no context weights")
        if self.output_embeddings.shape != self.input_embeddings.shape:
            raise ValueError("input and output embeddings must share (C, d)")
        if self.output_bias.shape != (self.vocab_size,):
            raise ValueError("output_bias must be (C,)")

    @property
    def vocab_size(self) -> int:
        return int(self.input_embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.input_embeddings.shape[1])

    def copy(self) -> "ModelParams":
        ctx = None if self.context_weights is None else self.context_weights.copy()
        return ModelParams(
            input_embeddings=self.input_embeddings.copy(),
            context_weights=ctx,
            output_embeddings=self.output_embeddings.copy(),
            output_bias=self.output_bias.copy(),
            order=self.order,
            combiner=self.combiner,
        )


def init_params(
    vocab_size: int, dim: int, order: int, seed: int, combiner: str = "matrix"
) -> ModelParams:
    """Uniform init in [-0.05, 0.05], zero bias; early sigmoid outputs ~ 0.5."""
    rng = stream_rng(seed, 0x171)
    ctx = None
    if combiner == "matrix":
        ctx = rng.uniform(-0.05, 0.05, size=(order, dim, dim))
    return ModelParams(
        input_embeddings=rng.uniform(-0.05, 0.05, size=(vocab_size, dim)),
        context_weights=ctx,
        output_embeddings=rng.uniform(-0.05, 0.05, size=(vocab_size, dim)),
        output_bias=np.zeros(vocab_size),
        order=order,
        combiner=combiner,
    )


def forward_hidden(params: ModelParams, histories: np.ndarray) -> np.ndarray:
    """(B, m) history ids -> (B, d) hidden states."""
    histories = np.asarray(histories, dtype=np.int64)
    emb = params.input_embeddings[histories]  # (B, m, d)
    if params.combiner == "average":
        return emb.mean(axis=1)
    if params.order == 1:
        return emb[:, 0, :] @ params.context_weights[0].T
    return np.einsum("jik,bjk->bi", params.context_weights, emb)


def score_candidates(
    params: ModelParams, hidden: np.ndarray, candidate_ids: np.ndarray | None = None
) -> np.ndarray:
    """Raw scores s = w_c . h + b_c.

    candidate_ids None scores the full vocabulary, shape (B, C); a 1-D id list
    is shared across the batch, shape (B, K); a 2-D (B, K) array scores
    per-pair candidates.
    """
    if candidate_ids is None:
        return hidden @ params.output_embeddings.T + params.output_bias
    ids = np.asarray(candidate_ids, dtype=np.int64)
    w = params.output_embeddings[ids]
    if ids.ndim == 1:
        return hidden @ w.T + params.output_bias[ids]
    return np.einsum("bd,bkd->bk", hidden, w) + params.output_bias[ids]


@dataclass
class ParamGrads:
    """Gradient of the objective, sparse over the rows a batch touched.

    Row ids are unique and sorted; values are aligned with them. Rows outside
    the touched set are exactly zero by construction.
    """

    input_ids: np.ndarray  # (U,)
    input_grads: np.ndarray  # (U, d)
    context_grads: np.ndarray | None  # (m, d, d)
    output_ids: np.ndarray  # (V,)
    output_grads: np.ndarray  # (V, d)
    bias_grads: np.ndarray  # (V,)

    def dense_output(self, vocab_size: int) -> np.ndarray:
        out = np.zeros((vocab_size, self.output_grads.shape[1]))
        out[self.output_ids] = self.output_grads
        return out

    def dense_input(self, vocab_size: int) -> np.ndarray:
        out = np.zeros((vocab_size, self.input_grads.shape[1]))
        out[self.input_ids] = self.input_grads
        return out

    def dense_bias(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.output_ids] = self.bias_grads
        return out


def _sum_rows(inverse: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Group-sum (n, d) values by inverse index; bincount beats ufunc.at here."""
    n, d = values.shape
    flat_index = inverse[:, None] * d + np.arange(d)[None, :]
    acc = np.bincount(flat_index.ravel(), weights=values.ravel(), minlength=n_rows * d)
    return acc.reshape(n_rows, d)


def _accumulate_rows(ids: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum duplicate row contributions; returns (unique ids, summed values)."""
    uniq, inverse = np.unique(ids, return_inverse=True)
    return uniq, _sum_rows(inverse, values, uniq.shape[0])


def backward(params: ModelParams, batch: Batch, loss: LossResult) -> ParamGrads:
    """Chain rule from per-score gradients to per-parameter-row gradients.

    Duplicate candidate ids (with-replacement sampling) accumulate additively.
    Sparse candidate gradients are scalar weights on hidden rows, so they
    factor through a small (B, touched-rows) coefficient matrix.
    """
    histories = np.asarray(batch.histories, dtype=np.int64)
    b = histories.shape[0]
    d = params.dim
    hidden = forward_hidden(params, histories)
    grad_hidden = np.zeros((b, d))

    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    if loss.d_full_scores is not None:
        g = loss.d_full_scores  # (B, C)
        blocks.append(
            (np.arange(params.vocab_size, dtype=np.int64), g.T @ hidden, g.sum(axis=0))
        )
        grad_hidden += g @ params.output_embeddings

    cand_parts: list[np.ndarray] = []
    pair_parts: list[np.ndarray] = []
    gval_parts: list[np.ndarray] = []
    if loss.d_target_scores is not None:
        cand_parts.append(np.asarray(loss.targets, dtype=np.int64))
        pair_parts.append(np.arange(b))
        gval_parts.append(loss.d_target_scores)
    if loss.d_sample_scores is not None:
        ids = loss.sample_ids
        k = loss.d_sample_scores.shape[1]
        cand_parts.append(np.tile(ids, b) if ids.ndim == 1 else ids.reshape(-1))
        pair_parts.append(np.repeat(np.arange(b), k))
        gval_parts.append(loss.d_sample_scores.reshape(-1))
    if cand_parts:
        cand = np.concatenate(cand_parts)
        pair = np.concatenate(pair_parts)
        gval = np.concatenate(gval_parts)
        uniq, inverse = np.unique(cand, return_inverse=True)
        u = uniq.shape[0]
        coeff = np.bincount(pair * u + inverse, weights=gval, minlength=b * u)
        coeff = coeff.reshape(b, u)
        grad_hidden += coeff @ params.output_embeddings[uniq]
        blocks.append((uniq, coeff.T @ hidden, coeff.sum(axis=0)))

    if len(blocks) == 1:
        output_ids, output_grads, bias_grads = blocks[0]
    else:
        all_ids = np.concatenate([blk[0] for blk in blocks])
        output_ids, output_grads = _accumulate_rows(
            all_ids, np.concatenate([blk[1] for blk in blocks])
        )
        bias_grads = np.bincount(
            np.unique(all_ids, return_inverse=True)[1],
            weights=np.concatenate([blk[2] for blk in blocks]),
            minlength=output_ids.shape[0],
        )

    emb = params.input_embeddings[histories]  # (B, m, d)
    if params.combiner == "average":
        context_grads = None
        grad_emb = np.repeat(grad_hidden[:, None, :], params.order, axis=1) / params.order
    elif params.order == 1:
        context_grads = (grad_hidden.T @ emb[:, 0, :])[None, :, :]
        grad_emb = (grad_hidden @ params.context_weights[0])[:, None, :]
    else:
        context_grads = np.einsum("bi,bjk->jik", grad_hidden, emb)
        grad_emb = np.einsum("bi,jik->bjk", grad_hidden, params.context_weights)
    input_ids, input_grads = _accumulate_rows(
        histories.reshape(-1), grad_emb.reshape(-1, d)
    )
    return ParamGrads(
        input_ids=input_ids,
        input_grads=input_grads,
        context_grads=context_grads,
        output_ids=output_ids,
        output_grads=output_grads,
        bias_grads=bias_grads,
    )


def sgd_step(params: ModelParams, grads: ParamGrads, lr: float) -> ModelParams:
    """One ascent step on the objective: rows += lr * grad."""
    params.input_embeddings[grads.input_ids] += lr * grads.input_grads
    if grads.context_grads is not None:
        params.context_weights += lr * grads.context_grads
    params.output_embeddings[grads.output_ids] += lr * grads.output_grads
    params.output_bias[grads.output_ids] += lr * grads.bias_grads
    return params


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators, updated lazily on touched rows only."""

    step: int
    m_input: np.ndarray
    v_input: np.ndarray
    m_context: np.ndarray | None
    v_context: np.ndarray | None
    m_output: np.ndarray
    v_output: np.ndarray
    m_bias: np.ndarray
    v_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        zc = None if params.context_weights is None else np.zeros_like(params.context_weights)
        vc = None if params.context_weights is None else np.zeros_like(params.context_weights)
        return cls(
            step=0,
            m_input=np.zeros_like(params.input_embeddings),
            v_input=np.zeros_like(params.input_embeddings),
            m_context=zc,
            v_context=vc,
            m_output=np.zeros_like(params.output_embeddings),
            v_output=np.zeros_like(params.output_embeddings),
            m_bias=np.zeros_like(params.output_bias),
            v_bias=np.zeros_like(params.output_bias),
        )


def _adam_rows(
    target: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    rows: np.ndarray,
    grad: np.ndarray,
    hyper: AdamHyper,
    bias1: float,
    bias2: float,
) -> None:
    m[rows] = hyper.beta1 * m[rows] + (1.0 - hyper.beta1) * grad
    v[rows] = hyper.beta2 * v[rows] + (1.0 - hyper.beta2) * grad**2
    m_hat = m[rows] / bias1
    v_hat = v[rows] / bias2
    target[rows] += hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def adam_step(
    params: ModelParams, grads: ParamGrads, state: AdamState, hyper: AdamHyper
) -> tuple[ModelParams, AdamState]:
    """Lazy Adam ascent: moments decay only when their rows are touched."""
    state.step += 1
    bias1 = 1.0 - hyper.beta1**state.step
    bias2 = 1.0 - hyper.beta2**state.step
    _adam_rows(
        params.input_embeddings, state.m_input, state.v_input,
        grads.input_ids, grads.input_grads, hyper, bias1, bias2,
    )
    if grads.context_grads is not None:
        state.m_context *= hyper.beta1
        state.m_context += (1.0 - hyper.beta1) * grads.context_grads
        state.v_context *= hyper.beta2
        state.v_context += (1.0 - hyper.beta2) * grads.context_grads**2
        params.context_weights += (
            hyper.lr * (state.m_context / bias1)
            / (np.sqrt(state.v_context / bias2) + hyper.eps)
        )
    _adam_rows(
        params.output_embeddings, state.m_output, state.v_output,
        grads.output_ids, grads.output_grads, hyper, bias1, bias2,
    )
    _adam_rows(
        params.output_bias, state.m_bias, state.v_bias,
        grads.output_ids, grads.bias_grads, hyper, bias1, bias2,
    )
    return params, state


# --- checkpoint format: magic, version u32, C u32, d u32, m u32, combiner u32
# --- (0 matrix, 1 average), then tensors row-major little-endian float64 in
# --- order: input embeddings, context weights (matrix combiner only), output
# --- embeddings, output bias. Adam state lives in a sibling file under a
# --- second magic with the step counter and moment tensors in the same order.


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")


def adam_state_path(model_path: str | Path) -> Path:
    path = Path(model_path)
    return path.with_name(path.name + ".adam")


def save_checkpoint(
    params: ModelParams, path: str | Path, adam_state: AdamState | None = None
) -> None:
    path = Path(path)
    header = MODEL_MAGIC + struct.pack(
        "<IIIII",
        MODEL_FORMAT_VERSION,
        params.vocab_size,
        params.dim,
        params.order,
        _COMBINERS.index(params.combiner),
    )
    parts = [header, _tensor_bytes(params.input_embeddings)]
    if params.context_weights is not None:
        parts.append(_tensor_bytes(params.context_weights))
    parts.append(_tensor_bytes(params.output_embeddings))
    parts.append(_tensor_bytes(params.output_bias))
    _write_atomic(path, b"".join(parts))
    if adam_state is not None:
        tensors = [
            adam_state.m_input, adam_state.v_input,
            adam_state.m_context, adam_state.v_context,
            adam_state.m_output, adam_state.v_output,
            adam_state.m_bias, adam_state.v_bias,
        ]
        blobs = [ADAM_MAGIC + struct.pack("<IQ", MODEL_FORMAT_VERSION, adam_state.step)]
        blobs.extend(_tensor_bytes(t) for t in tensors if t is not None)
        _write_atomic(adam_state_path(path), b"".join(blobs))


def _read_tensor(blob: bytes, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    end = offset + count * 8
    if end > len(blob):
        raise ValueError("checkpoint file truncated")
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
    return arr.copy(), end


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 28 or blob[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    version, c, d, m, comb = struct.unpack("<IIIII", blob[8:28])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    combiner = _COMBINERS[comb]
    offset = 28
    input_emb, offset = _read_tensor(blob, offset, (c, d))
    ctx = None
    if combiner == "matrix":
        ctx, offset = _read_tensor(blob, offset, (m, d, d))
    output_emb, offset = _read_tensor(blob, offset, (c, d))
    bias, offset = _read_tensor(blob, offset, (c,))
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(
        input_embeddings=input_emb,
        context_weights=ctx,
        output_embeddings=output_emb,
        output_bias=bias,
        order=m,
        combiner=combiner,
    )


def load_adam_state(path: str | Path, params: ModelParams) -> AdamState:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:8] != ADAM_MAGIC:
        raise ValueError(f"{path}: not an optimizer state file (bad magic)")
    version, step = struct.unpack("<IQ", blob[8:20])
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported optimizer state version {version}")
    c, d, m = params.vocab_size, params.dim, params.order
    offset = 20
    m_in, offset = _read_tensor(blob, offset, (c, d))
    v_in, offset = _read_tensor(blob, offset, (c, d))
    m_ctx = v_ctx = None
    if params.combiner == "matrix":
        m_ctx, offset = _read_tensor(blob, offset, (m, d, d))
        v_ctx, offset = _read_tensor(blob, offset, (m, d, d))
    m_out, offset = _read_tensor(blob, offset, (c, d))
    v_out, offset = _read_tensor(blob, offset, (c, d))
    m_b, offset = _read_tensor(blob, offset, (c,))
    v_b, offset = _read_tensor(blob, offset, (c,))
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in optimizer state")
    return AdamState(
        step=step, m_input=m_in, v_input=v_in, m_context=m_ctx, v_context=v_ctx,
        m_output=m_out, v_output=v_out, m_bias=m_b, v_bias=v_b,
    )
