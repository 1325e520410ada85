"""Next-token scorers with forward-call accounting, and the CLM training loss.

Every scorer maps a token-id prefix to a length-V vector of log-probabilities
and counts its invocations. Decoders never see anything else, so the oracle,
uniform, n-gram and random scorers below are interchangeable with any larger
model that honours the same contract.
"""

from __future__ import annotations

import struct
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from genel.errors import EmptyTargetError, FileFormatError
from genel.markup import BOS_ID, Vocabulary

ORACLE_EPS = 1e-6


class TokenScorer:
    """Base class. Subclasses implement ``_logprobs``."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self._count = 0
        self._lock = threading.Lock()

    @property
    def forward_count(self) -> int:
        return self._count

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        with self._lock:
            self._count += 1
        return self._logprobs(prefix)

    def _logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError


class CountingView:
    """Per-decode call counter that forwards to a shared scorer.

    Keeps ``lm_forwards`` exact when several documents decode concurrently
    against one scorer.
    """

    def __init__(self, scorer: TokenScorer):
        self.scorer = scorer
        self.vocab_size = scorer.vocab_size
        self.calls = 0

    def next_logprobs(self, prefix: Sequence[int]) -> np.ndarray:
        self.calls += 1
        return self.scorer.next_logprobs(prefix)


class UniformScorer(TokenScorer):
    def __init__(self, vocab_size: int):
        super().__init__(vocab_size)
        self._row = np.full(vocab_size, -np.log(vocab_size))
        self._row.flags.writeable = False

    def _logprobs(self, prefix):
        return self._row


def uniform_scorer(vocab_size: int) -> UniformScorer:
    return UniformScorer(vocab_size)


class OracleScorer(TokenScorer):
    """Puts 1 - eps on the gold next token along the gold sequence, uniform off it."""

    def __init__(self, gold: Sequence[int], vocab_size: int, eps: float = ORACLE_EPS):
        super().__init__(vocab_size)
        self.gold = tuple(gold)
        if vocab_size < 2:
            raise ValueError("oracle scorer needs at least two tokens")
        if any(not 0 <= t < vocab_size for t in self.gold):
            raise ValueError("gold sequence contains ids outside the vocabulary")
        self._off = np.log(eps / (vocab_size - 1))
        self._on = np.log1p(-eps)
        self._uniform = np.full(vocab_size, -np.log(vocab_size))

    def _logprobs(self, prefix):
        n = len(prefix)
        if n < len(self.gold) and tuple(prefix) == self.gold[:n]:
            row = np.full(self.vocab_size, self._off)
            row[self.gold[n]] = self._on
            return row
        return self._uniform


def oracle_scorer(gold_target: Sequence[int], vocab_size: int, eps: float = ORACLE_EPS) -> OracleScorer:
    """Oracle over ``<s>`` + ``gold_target``, the prefix layout the decoders use."""
    return OracleScorer([BOS_ID, *gold_target], vocab_size, eps)


class NGramScorer(TokenScorer):
    """Additively smoothed n-gram model over token ids.

    P(w | h) = (c(h, w) + alpha) / (c(h) + alpha * V), with h the last
    ``order - 1`` tokens of the prefix, left-padded with -1.
    """

    def __init__(self, vocab_size: int, order: int = 3, smoothing: float = 0.1):
        super().__init__(vocab_size)
        if order < 1 or smoothing <= 0:
            raise ValueError("order must be >= 1 and smoothing > 0")
        self.order = order
        self.smoothing = smoothing
        self.counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
        self.totals: dict[tuple[int, ...], int] = defaultdict(int)
        self.vocab: Vocabulary | None = None

    def context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        k = self.order - 1
        if k == 0:
            return ()
        tail = tuple(prefix[-k:])
        return (-1,) * (k - len(tail)) + tail

    def update(self, seq: Sequence[int]) -> None:
        for i in range(len(seq)):
            if i == 0 and seq[0] == BOS_ID:
                continue
            h = self.context(seq[:i])
            row = self.counts[h]
            row[seq[i]] = row.get(seq[i], 0) + 1
            self.totals[h] += 1

    def _logprobs(self, prefix):
        h = self.context(prefix)
        a = self.smoothing
        denom = self.totals.get(h, 0) + a * self.vocab_size
        out = np.full(self.vocab_size, np.log(a / denom))
        row = self.counts.get(h)
        if row:
            ids = np.fromiter(row.keys(), dtype=np.int64, count=len(row))
            cs = np.fromiter(row.values(), dtype=np.float64, count=len(row))
            out[ids] = np.log((cs + a) / denom)
        return out


def train_ngram_scorer(
    sequences: Iterable[Sequence[int]],
    vocab_size: int,
    order: int = 3,
    smoothing: float = 0.1,
    vocab: Vocabulary | None = None,
) -> NGramScorer:
    """Fit counts on ``<s>``-prefixed target sequences. Deterministic."""
    model = NGramScorer(vocab_size, order, smoothing)
    empty = True
    for seq in sequences:
        empty = False
        model.update(seq)
    if empty:
        raise ValueError("training corpus is empty")
    model.vocab = vocab
    return model


class RandomScorer(TokenScorer):
    """Fixed random log-probability table indexed by a hash of the recent context.

    Cheap, deterministic and arbitrary; used to fuzz decoders.
    """

    def __init__(self, vocab_size: int, seed: int = 0, context: int = 2, buckets: int = 512, temperature: float = 2.0):
        super().__init__(vocab_size)
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=temperature, size=(buckets, vocab_size))
        logits -= logits.max(axis=1, keepdims=True)
        self.table = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        self.context = context
        self.buckets = buckets

    def _logprobs(self, prefix):
        h = hash((len(prefix),) + tuple(prefix[-self.context:])) % self.buckets
        return self.table[h]


@dataclass(frozen=True)
class TrainingExample:
    y: tuple[int, ...]
    n: int  # prompt length

    def __post_init__(self):
        if not 1 <= self.n <= len(self.y):
            raise ValueError("prompt length must satisfy 1 <= n <= len(y)")


def clm_loss(scorer: TokenScorer, example: TrainingExample) -> float:
    """Next-token loss over the target positions only.

    Sums -log P(y[i] | y[:i]) for 0-based i in [n, len(y)); prompt
    positions contribute nothing.
    """
    y, n = example.y, example.n
    if n == len(y):
        raise EmptyTargetError("example has no target tokens")
    return float(-sum(scorer.next_logprobs(y[:i])[y[i]] for i in range(n, len(y))))


# --- persistence -----------------------------------------------------------

SCORER_MAGIC = b"GELNGRAM"
SCORER_VERSION = 1
_HEADER = struct.Struct("<8sHIHd")  # magic, version, V, order, smoothing


def save_ngram(model: NGramScorer, path: str | Path) -> None:
    """Write a versioned little-endian binary file; layout documented in README."""
    k = model.order - 1
    rows = []
    for h in sorted(model.counts):
        for w in sorted(model.counts[h]):
            rows.append((*h, w, model.counts[h][w]))
    table = np.asarray(rows, dtype="<i8").reshape(len(rows), k + 2)
    surfaces = model.vocab.ordinary_surfaces() if model.vocab is not None else []
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SCORER_MAGIC, SCORER_VERSION, model.vocab_size, model.order, model.smoothing))
        f.write(struct.pack("<Q", len(rows)))
        f.write(table.tobytes())
        f.write(struct.pack("<I", len(surfaces)))
        for s in surfaces:
            b = s.encode("utf-8")
            f.write(struct.pack("<I", len(b)) + b)


def load_ngram(path: str | Path) -> NGramScorer:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:8] != SCORER_MAGIC:
        raise FileFormatError(f"{path}: not a scorer file")
    _, version, V, order, smoothing = _HEADER.unpack_from(data, 0)
    if version != SCORER_VERSION:
        raise FileFormatError(f"{path}: unsupported scorer version {version}")
    off = _HEADER.size
    (nrows,) = struct.unpack_from("<Q", data, off)
    off += 8
    width = order + 1
    table = np.frombuffer(data, dtype="<i8", count=nrows * width, offset=off).reshape(nrows, width)
    off += table.nbytes
    model = NGramScorer(V, order, smoothing)
    for row in table.tolist():
        h, w, c = tuple(row[:order - 1]), row[order - 1], row[order]
        model.counts[h][w] = c
        model.totals[h] += c
    (nsurf,) = struct.unpack_from("<I", data, off)
    off += 4
    surfaces = []
    for _ in range(nsurf):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        surfaces.append(data[off:off + ln].decode("utf-8"))
        off += ln
    if nsurf:
        model.vocab = Vocabulary(surfaces, frozen=True)
    return model
