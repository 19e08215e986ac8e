"""Vocabulary construction, synthetic ground-truth tasks, corpora, batching.

The synthetic task is the test oracle of the repository: it tabulates the true
conditional distribution over the next token for every (reduced) history
state, so that trained models can be compared against a known posterior.
Histories of length m are reduced to at most ``state_cap`` states; when the
full m-tuple space fits under the cap the reduction is a mixed-radix bijection,
otherwise a deterministic mixing hash.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from snislm.rng import stream_rng

UNK_TOKEN = "<unk>"

TASK_MAGIC = b"SNISTASK"
TASK_FORMAT_VERSION = 1

# Fixed odd multipliers for the history-state mixing hash (splitmix64 finalizer
# constants); Python's built-in hash is salted per process and unusable here.
_MIX_MULT1 = 0xBF58476D1CE4E5B9
_MIX_MULT2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def _mix64(h: int) -> int:
    h &= _MASK64
    h ^= h >> 30
    h = (h * _MIX_MULT1) & _MASK64
    h ^= h >> 27
    h = (h * _MIX_MULT2) & _MASK64
    h ^= h >> 31
    return h


@dataclass(frozen=True)
class Vocabulary:
    """Token/id bijection ordered by descending frequency.

    id 0 is the most frequent token; ties are broken lexicographically so the
    ordering is total and stable. The unknown token is always present and is
    counted like any other token.
    """

    tokens: tuple[str, ...]
    counts: np.ndarray  # int64, aligned with tokens, non-increasing

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if len(self.tokens) != counts.shape[0]:
            raise ValueError("tokens and counts must have equal length")
        if counts.shape[0] == 0:
            raise ValueError("vocabulary must not be empty")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if np.any(np.diff(counts) > 0):
            raise ValueError("counts must be non-increasing in id")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = self._index.get(UNK_TOKEN)
            if idx is None:
                raise KeyError(f"token {token!r} unknown and no {UNK_TOKEN} entry")
        return idx

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.fromiter((self.id_of(t) for t in tokens), dtype=np.int64)


def build_vocabulary(lines: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Count whitespace tokens and return a frequency-ordered vocabulary.

    Tokens seen fewer than ``min_count`` times are folded into the reserved
    unknown token, which participates in the frequency ordering with the
    accumulated count of everything it absorbed (possibly zero).
    """
    counts: dict[str, int] = {}
    total = 0
    for line in lines:
        for token in line.split():
            counts[token] = counts.get(token, 0) + 1
            total += 1
    if total == 0:
        raise ValueError("cannot build a vocabulary from empty input")
    unk_count = counts.pop(UNK_TOKEN, 0)
    kept: list[tuple[str, int]] = []
    for token, count in counts.items():
        if count >= min_count:
            kept.append((token, count))
        else:
            unk_count += count
    kept.append((UNK_TOKEN, unk_count))
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = tuple(t for t, _ in kept)
    return Vocabulary(tokens=tokens, counts=np.array([c for _, c in kept], dtype=np.int64))


@dataclass(frozen=True)
class SyntheticTask:
    """Tabulated ground-truth next-token distribution per history state.

    ``table`` has one row per history state; each row is an exact probability
    vector of length ``vocab_size``. ``seed`` records how the table was
    generated (None for tables loaded from disk or built by hand).
    """

    order: int
    vocab_size: int
    table: np.ndarray  # (num_states, vocab_size) float64, rows sum to 1
    state_cap: int = 512
    seed: int | None = None
    concentration: float | None = None

    def __post_init__(self) -> None:
        table = np.ascontiguousarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", table)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if table.ndim != 2 or table.shape[1] != self.vocab_size:
            raise ValueError("table must be (num_states, vocab_size)")
        if table.shape[0] != expected_num_states(self.vocab_size, self.order, self.state_cap):
            raise ValueError("table row count inconsistent with (C, m, state_cap)")
        if np.any(table < 0):
            raise ValueError("table entries must be >= 0")
        sums = table.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValueError("table rows must sum to 1 within 1e-9")

    @property
    def num_states(self) -> int:
        return self.table.shape[0]

    @property
    def exhaustive_states(self) -> bool:
        """True when every m-tuple has its own state (mixed-radix bijection)."""
        return self.vocab_size**self.order <= self.state_cap

    def state_of(self, history: Sequence[int]) -> int:
        if len(history) != self.order:
            raise ValueError(f"history must have length {self.order}")
        if self.exhaustive_states:
            state = 0
            for t in history:
                state = state * self.vocab_size + int(t)
            return state
        h = 0
        for t in history:
            h = _mix64(h ^ (int(t) + 1))
        return h % self.num_states

    def states_of(self, histories: np.ndarray) -> np.ndarray:
        """Vectorized state ids for a (N, order) matrix of histories."""
        histories = np.asarray(histories, dtype=np.int64)
        if self.exhaustive_states:
            states = np.zeros(histories.shape[0], dtype=np.int64)
            for j in range(self.order):
                states = states * self.vocab_size + histories[:, j]
            return states
        return np.array([self.state_of(row) for row in histories], dtype=np.int64)


def expected_num_states(vocab_size: int, order: int, state_cap: int) -> int:
    return int(min(state_cap, vocab_size**order))


def generate_synthetic_task(
    vocab_size: int,
    order: int,
    concentration: float,
    seed: int,
    state_cap: int = 512,
) -> SyntheticTask:
    """Draw a random ground-truth table with controllable peakedness.

    Each row is a symmetric Dirichlet draw whose total concentration mass is
    ``concentration`` spread evenly over the vocabulary (per-class parameter
    concentration / C). Small values concentrate rows on a few classes
    independent of the vocabulary size; large values approach uniform rows.
    Deterministic given (C, m, concentration, seed, state_cap).
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if order < 1:
        raise ValueError("order must be >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    if state_cap < 1:
        raise ValueError("state_cap must be >= 1")
    num_states = expected_num_states(vocab_size, order, state_cap)
    rng = stream_rng(seed, 0x7A5C)
    alpha = np.full(vocab_size, concentration / vocab_size, dtype=np.float64)
    table = rng.dirichlet(alpha, size=num_states)
    table /= table.sum(axis=1, keepdims=True)
    return SyntheticTask(
        order=order,
        vocab_size=vocab_size,
        table=table,
        state_cap=state_cap,
        seed=seed,
        concentration=concentration,
    )


@dataclass(frozen=True)
class Corpus:
    """A flat sequence of token ids, with optional document boundaries."""

    ids: np.ndarray  # int64
    vocab_size: int
    boundaries: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        if ids.ndim != 1:
            raise ValueError("corpus ids must be one-dimensional")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("corpus contains ids outside [0, vocab_size)")

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def sample_corpus(task: SyntheticTask, num_tokens: int, seed: int) -> Corpus:
    """Sample a token stream from the task's conditional table.

    The rolling history starts as all-zero ids; each token is drawn from
    p(. | state(history)) by inversion on the row's cumulative table.
    """
    if num_tokens <= task.order:
        raise ValueError("num_tokens must exceed the task order")
    rng = stream_rng(seed, 0xC0A7)
    cumulative = np.cumsum(task.table, axis=1)
    cumulative[:, -1] = 1.0
    uniforms = rng.random(num_tokens)
    ids = np.empty(num_tokens, dtype=np.int64)
    history = [0] * task.order
    state_of = task.state_of
    for n in range(num_tokens):
        state = state_of(history)
        token = int(np.searchsorted(cumulative[state], uniforms[n], side="right"))
        ids[n] = token
        history.pop(0)
        history.append(token)
    return Corpus(ids=ids, vocab_size=task.vocab_size)


@dataclass(frozen=True)
class Batch:
    """(history, target) training pairs: histories (B, m), targets (B,)."""

    histories: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if self.histories.ndim != 2 or self.targets.ndim != 1:
            raise ValueError("histories must be (B, m) and targets (B,)")
        if self.histories.shape[0] != self.targets.shape[0]:
            raise ValueError("histories and targets disagree on batch size")
        if self.targets.shape[0] < 1:
            raise ValueError("batch must contain at least one pair")

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])


def corpus_pairs(corpus: Corpus, order: int) -> tuple[np.ndarray, np.ndarray]:
    """All (history, target) pairs: one per position n >= order."""
    if len(corpus) <= order:
        raise ValueError("corpus too short for the requested order")
    ids = corpus.ids
    n_pairs = len(corpus) - order
    histories = np.lib.stride_tricks.sliding_window_view(ids[:-1], order)[:n_pairs]
    targets = ids[order:]
    return np.ascontiguousarray(histories), np.ascontiguousarray(targets)


def make_batches(
    corpus: Corpus,
    batch_size: int,
    order: int,
    shuffle: bool = False,
    seed: int | None = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Partition every corpus position n >= order into batches of pairs.

    Each position contributes exactly one pair per epoch; the final batch may
    be smaller than ``batch_size``. With ``shuffle`` the pair order is a fixed
    permutation derived from (``seed``, ``epoch``).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    histories, targets = corpus_pairs(corpus, order)
    n_pairs = targets.shape[0]
    index = np.arange(n_pairs)
    if shuffle:
        if seed is None:
            raise ValueError("shuffled batching requires a seed")
        stream_rng(seed, 0x50F, epoch).shuffle(index)
    for start in range(0, n_pairs, batch_size):
        sel = index[start : start + batch_size]
        yield Batch(histories=histories[sel], targets=targets[sel])


# --- task serialization: magic, version u32, C u32, m u32, state_cap u32,
# --- then rows row-major little-endian float64.


def save_task(task: SyntheticTask, path: str | Path) -> None:
    path = Path(path)
    header = TASK_MAGIC + struct.pack(
        "<IIII", TASK_FORMAT_VERSION, task.vocab_size, task.order, task.state_cap
    )
    payload = header + task.table.astype("<f8", copy=False).tobytes(order="C")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_task(path: str | Path) -> SyntheticTask:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 24 or blob[:8] != TASK_MAGIC:
        raise ValueError(f"{path}: not a task file (bad magic)")
    version, vocab_size, order, state_cap = struct.unpack("<IIII", blob[8:24])
    if version != TASK_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported task format version {version}")
    num_states = expected_num_states(vocab_size, order, state_cap)
    expected = 24 + num_states * vocab_size * 8
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated task file ({len(blob)} != {expected} bytes)")
    table = np.frombuffer(blob, dtype="<f8", offset=24).reshape(num_states, vocab_size)
    return SyntheticTask(
        order=order, vocab_size=vocab_size, table=table.copy(), state_cap=state_cap
    )


# --- corpus text format: UTF-8, one sentence per line, whitespace tokens.


def write_corpus_text(corpus: Corpus, path: str | Path, tokens_per_line: int = 20) -> None:
    """Write ids as decimal tokens, ``tokens_per_line`` per line."""
    path = Path(path)
    parts = []
    ids = corpus.ids
    for start in range(0, len(ids), tokens_per_line):
        parts.append(" ".join(str(t) for t in ids[start : start + tokens_per_line]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(parts) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_corpus_text(path: str | Path, vocab_size: int) -> Corpus:
    """Read a decimal-token corpus back into a flat id sequence."""
    path = Path(path)
    ids: list[int] = []
    boundaries: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if not toks:
                continue
            ids.extend(int(t) for t in toks)
            boundaries.append(len(ids))
    if not ids:
        raise ValueError(f"{path}: empty corpus")
    return Corpus(
        ids=np.array(ids, dtype=np.int64),
        vocab_size=vocab_size,
        boundaries=tuple(boundaries),
    )


def encode_corpus(lines: Iterable[str], vocab: Vocabulary) -> Corpus:
    """Encode raw text lines through a vocabulary (real-text path)."""
    ids: list[int] = []
    boundaries: list[int] = []
    for line in lines:
        for token in line.split():
            ids.append(vocab.id_of(token))
        boundaries.append(len(ids))
    if not ids:
        raise ValueError("cannot encode an empty corpus")
    return Corpus(
        ids=np.array(ids, dtype=np.int64),
        vocab_size=vocab.size,
        boundaries=tuple(boundaries),
    )
