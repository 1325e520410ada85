"""Dual-encoder entity retriever trained with a multi-label NCE objective.

Both encoders are hashed bag-of-words feature maps followed by a linear
projection. The chunk and entity projections are separate arrays, so the
two towers share no parameters.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from genel.errors import (
    DimMismatchError,
    FileFormatError,
    GoldNegativeOverlapError,
    InsufficientPoolError,
)
from genel.kb import EntityRecord, KnowledgeBase
from genel.markup import Annotation, Document, split_surfaces

CHUNK_LEN = 32


@dataclass(frozen=True)
class DocChunk:
    doc_id: str
    tokens: tuple[str, ...]  # token surfaces
    start: int  # first token index in the document
    char_start: int
    char_end: int

    @property
    def text(self) -> str:
        return "".join(self.tokens)


def chunk_document(doc: Document, length: int = CHUNK_LEN) -> list[DocChunk]:
    """Tile the document with non-overlapping windows of ``length`` tokens."""
    out = []
    for i in range(0, len(doc.tokens), length):
        window = doc.tokens[i:i + length]
        out.append(DocChunk(doc.doc_id, tuple(t.surface for t in window), i, window[0].start, window[-1].end))
    return out


def chunk_gold(chunk: DocChunk, anns: Sequence[Annotation]) -> set[str]:
    """Entities whose mention starts inside the chunk."""
    end = chunk.start + len(chunk.tokens)
    return {a.ent for a in anns if chunk.start <= a.m_s < end}


class FeatureHasher:
    """Casefolded token surface -> bucket via salted CRC32."""

    def __init__(self, buckets: int = 2 ** 15, seed: int = 0):
        self.buckets = buckets
        self.salt = f"{seed}:".encode()

    def bucket(self, word: str) -> int:
        return zlib.crc32(self.salt + word.encode("utf-8")) % self.buckets

    def words(self, text: str) -> list[str]:
        return [s.strip().casefold() for s in split_surfaces(text) if s.strip()]

    def histogram(self, text: str) -> dict[int, float]:
        h: dict[int, float] = {}
        for w in self.words(text):
            b = self.bucket(w)
            h[b] = h.get(b, 0.0) + 1.0
        return h

    def matrix(self, texts: Sequence[str]) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for i, t in enumerate(texts):
            for b, v in self.histogram(t).items():
                rows.append(i)
                cols.append(b)
                vals.append(v)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(texts), self.buckets), dtype=np.float64)


@dataclass
class DualEncoder:
    chunk_proj: np.ndarray  # (buckets, d)
    entity_proj: np.ndarray  # (buckets, d)
    hasher: FeatureHasher

    @classmethod
    def init(cls, dim: int = 128, buckets: int = 2 ** 15, seed: int = 0, scale: float = 0.1) -> "DualEncoder":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(scale=scale, size=(buckets, dim)),
            rng.normal(scale=scale, size=(buckets, dim)),
            FeatureHasher(buckets, seed),
        )

    @property
    def dim(self) -> int:
        return self.chunk_proj.shape[1]

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.chunk_proj.copy(), self.entity_proj.copy(), self.hasher)

    def encode_chunk_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(self.hasher.matrix(texts) @ self.chunk_proj)

    def encode_entity_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(self.hasher.matrix(texts) @ self.entity_proj)


def encode_chunk(encoder: DualEncoder, chunk: DocChunk | str) -> np.ndarray:
    text = chunk.text if isinstance(chunk, DocChunk) else chunk
    return encoder.encode_chunk_texts([text])[0]


def encode_entity(encoder: DualEncoder, entity: EntityRecord) -> np.ndarray:
    return encoder.encode_entity_texts([entity.text])[0]


def score(chunk_vec: np.ndarray, entity_vec: np.ndarray) -> float:
    if chunk_vec.shape != entity_vec.shape:
        raise DimMismatchError(f"{chunk_vec.shape} vs {entity_vec.shape}")
    return float(chunk_vec @ entity_vec)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def nce_loss_from_scores(gold_scores: Sequence[float], negative_scores: Sequence[float]) -> float:
    """-sum_g log(exp(S_g) / (exp(S_g) + sum_n exp(S_n)))."""
    neg = np.asarray(negative_scores, dtype=np.float64)
    total = 0.0
    for s in gold_scores:
        total += _logsumexp(np.concatenate(([s], neg))) - s
    return total


def _check_disjoint(gold: Iterable[str], negatives: Iterable[str]) -> None:
    both = set(gold) & set(negatives)
    if both:
        raise GoldNegativeOverlapError(f"negatives overlap gold: {sorted(both)}")


def nce_loss(encoder: DualEncoder, chunk: DocChunk | str, gold: Sequence[EntityRecord],
             negatives: Sequence[EntityRecord]) -> float:
    """Multi-label NCE: one instance per gold entity, other golds never act as negatives."""
    _check_disjoint((e.title for e in gold), (e.title for e in negatives))
    x = encode_chunk(encoder, chunk)
    g = encoder.encode_entity_texts([e.text for e in gold]) @ x
    n = encoder.encode_entity_texts([e.text for e in negatives]) @ x if negatives else np.empty(0)
    return nce_loss_from_scores(g, n)


def _nce_parts(encoder: DualEncoder, text: str, gold: Sequence[EntityRecord], negatives: Sequence[EntityRecord]):
    """Loss, feature rows and gradients w.r.t. the encoded vectors."""
    hx = encoder.hasher.matrix([text])
    x = np.asarray(hx @ encoder.chunk_proj)[0]
    he = encoder.hasher.matrix([e.text for e in gold] + [e.text for e in negatives])
    E = np.asarray(he @ encoder.entity_proj)
    s = E @ x
    n_gold = len(gold)
    neg = s[n_gold:]
    loss = 0.0
    coef = np.zeros(len(s))  # dL/dS for every entity row
    for g in range(n_gold):
        logits = np.concatenate(([s[g]], neg))
        lse = _logsumexp(logits)
        loss += lse - s[g]
        p = np.exp(logits - lse)
        coef[g] += p[0] - 1.0
        coef[n_gold:] += p[1:]
    dx = coef @ E
    dE = np.outer(coef, x)
    return loss, hx, dx, he, dE


def nce_gradients(encoder: DualEncoder, chunk: DocChunk | str, gold: Sequence[EntityRecord],
                  negatives: Sequence[EntityRecord]) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and dense gradients w.r.t. (chunk_proj, entity_proj)."""
    _check_disjoint((e.title for e in gold), (e.title for e in negatives))
    text = chunk.text if isinstance(chunk, DocChunk) else chunk
    loss, hx, dx, he, dE = _nce_parts(encoder, text, gold, negatives)
    return loss, np.asarray(hx.T @ dx[None, :]), np.asarray(he.T @ dE)


def _sparse_step(proj: np.ndarray, feats: sp.csr_matrix, grads: np.ndarray, step: float) -> None:
    """proj -= step * feats.T @ grads, touching only the rows with features."""
    cols = np.unique(feats.indices)
    if len(cols):
        proj[cols] -= step * np.asarray(feats[:, cols].T @ grads)


def sample_negatives(encoder: DualEncoder, chunk: DocChunk | str, gold: Iterable[str], pool: Sequence[EntityRecord],
                     count: int, seed: int | np.random.Generator = 0,
                     pool_vecs: np.ndarray | None = None) -> list[EntityRecord]:
    """floor(0.9 * count) uniform draws plus the highest-scoring incorrect entities.

    Hard negatives are picked first and excluded from the random draw, so the
    result has no duplicates. ``pool_vecs`` may carry cached entity embeddings
    aligned with ``pool``.
    """
    gold = set(gold)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    candidates = [i for i, e in enumerate(pool) if e.title not in gold]
    if len(candidates) < count:
        raise InsufficientPoolError(f"need {count} negatives, pool has {len(candidates)}")
    n_random = count * 9 // 10
    n_hard = count - n_random
    hard: list[int] = []
    if n_hard:
        if pool_vecs is None:
            pool_vecs = encoder.encode_entity_texts([pool[i].text for i in candidates])
            cand_vecs = pool_vecs
        else:
            cand_vecs = pool_vecs[candidates]
        s = cand_vecs @ encode_chunk(encoder, chunk)
        order = np.argsort(-s, kind="stable")[:n_hard]
        hard = [candidates[j] for j in order]
    rest = [i for i in candidates if i not in set(hard)]
    drawn = rng.choice(len(rest), size=n_random, replace=False) if n_random else []
    return [pool[i] for i in hard] + [pool[rest[j]] for j in sorted(drawn)]


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.1
    negatives: int = 32
    batch_size: int = 16
    dim: int = 128
    buckets: int = 2 ** 15
    seed: int = 0
    init_scale: float = 0.1


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)  # mean loss per epoch, each batch before its update
    initial_loss: float = 0.0
    final_loss: float = 0.0


def mean_nce_loss(encoder: DualEncoder, corpus, kb: KnowledgeBase, negatives: int, seed: int) -> float:
    pool = list(kb)
    rng = np.random.default_rng(seed)
    total = 0.0
    for chunk, gold in corpus:
        golds = [kb[t] for t in sorted(gold)]
        negs = sample_negatives(encoder, chunk, gold, pool, min(negatives, len(pool) - len(gold)), rng)
        total += nce_loss(encoder, chunk, golds, negs)
    return total / max(len(corpus), 1)


def train_retriever(corpus: Sequence[tuple[DocChunk | str, set[str]]], kb: KnowledgeBase,
                    config: TrainConfig | None = None, encoder: DualEncoder | None = None) -> tuple[DualEncoder, TrainLog]:
    """Plain SGD over shuffled mini-batches; negatives resampled for every instance."""
    cfg = config or TrainConfig()
    if not corpus:
        raise ValueError("training corpus is empty")
    enc = (encoder or DualEncoder.init(cfg.dim, cfg.buckets, cfg.seed, cfg.init_scale)).copy()
    rng = np.random.default_rng(cfg.seed)
    pool = list(kb)
    pool_texts = [e.text for e in pool]
    corpus = [(c, g) for c, g in corpus if g]
    log = TrainLog()
    n_neg = min(cfg.negatives, len(pool) - max(len(g) for _, g in corpus))
    # same seed for both evaluations so the two numbers see the same negatives
    log.initial_loss = float(mean_nce_loss(enc, corpus, kb, n_neg, cfg.seed))
    for _ in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        epoch_loss = 0.0
        for b in range(0, len(order), cfg.batch_size):
            pool_vecs = enc.encode_entity_texts(pool_texts)
            batch = order[b:b + cfg.batch_size]
            hxs, dxs, hes, dEs = [], [], [], []
            for idx in batch:
                chunk, gold = corpus[idx]
                negs = sample_negatives(enc, chunk, gold, pool, n_neg, rng, pool_vecs)
                text = chunk.text if isinstance(chunk, DocChunk) else chunk
                loss, hx, dx, he, dE = _nce_parts(enc, text, [kb[t] for t in sorted(gold)], negs)
                epoch_loss += loss
                hxs.append(hx)
                dxs.append(dx)
                hes.append(he)
                dEs.append(dE)
            step = cfg.lr / len(batch)
            _sparse_step(enc.chunk_proj, sp.vstack(hxs, format="csr"), np.vstack(dxs), step)
            _sparse_step(enc.entity_proj, sp.vstack(hes, format="csr"), np.vstack(dEs), step)
        log.losses.append(float(epoch_loss / len(corpus)))
    log.final_loss = float(mean_nce_loss(enc, corpus, kb, n_neg, cfg.seed)) if cfg.epochs else log.initial_loss
    return enc, log


class EntityIndex:
    """Cached entity embeddings; row i is ``titles[i]``."""

    def __init__(self, vectors: np.ndarray, titles: Sequence[str]):
        if len(vectors) != len(titles):
            raise ValueError("row count must match title count")
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.vectors.flags.writeable = False
        self.titles = list(titles)

    def __len__(self) -> int:
        return len(self.titles)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if query.shape != (self.dim,):
            raise DimMismatchError(f"query shape {query.shape}, index dim {self.dim}")
        s = self.vectors.astype(np.float64) @ query.astype(np.float64)
        order = np.argsort(-s, kind="stable")[:k]
        return [(self.titles[i], float(s[i])) for i in order]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.dim, len(self)))
            f.write(self.vectors.astype("<f4").tobytes())
            for t in self.titles:
                b = t.encode("utf-8")
                f.write(struct.pack("<I", len(b)) + b)

    @classmethod
    def load(cls, path: str | Path) -> "EntityIndex":
        data = Path(path).read_bytes()
        if data[:8] != INDEX_MAGIC:
            raise FileFormatError(f"{path}: not an index file")
        _, version, d, rows = INDEX_HEADER.unpack_from(data, 0)
        if version != INDEX_VERSION:
            raise FileFormatError(f"{path}: unsupported index version {version}")
        off = INDEX_HEADER.size
        vecs = np.frombuffer(data, dtype="<f4", count=d * rows, offset=off).reshape(rows, d)
        off += vecs.nbytes
        titles = []
        for _ in range(rows):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            titles.append(data[off:off + n].decode("utf-8"))
            off += n
        return cls(vecs.copy(), titles)


INDEX_MAGIC = b"GELINDEX"
INDEX_VERSION = 1
INDEX_HEADER = struct.Struct("<8sHII")  # magic, version, d, rows


def build_index(encoder: DualEncoder, kb: KnowledgeBase) -> EntityIndex:
    return EntityIndex(encoder.encode_entity_texts([e.text for e in kb]), kb.titles)


def retrieve_topk(index: EntityIndex, chunk_vec: np.ndarray, k: int) -> list[str]:
    """Exact top-k by inner product; ties keep index (KB insertion) order."""
    return [t for t, _ in index.search(chunk_vec, k)]


class Retriever:
    """Encoder plus index; document-level retrieval is the union over chunks."""

    def __init__(self, encoder: DualEncoder, index: EntityIndex, chunk_len: int = CHUNK_LEN):
        self.encoder = encoder
        self.index = index
        self.chunk_len = chunk_len

    def topk(self, chunk: DocChunk | str, k: int) -> list[str]:
        return retrieve_topk(self.index, encode_chunk(self.encoder, chunk), k)

    def retrieve(self, doc: Document, k: int) -> list[str]:
        seen: dict[str, None] = {}
        for chunk in chunk_document(doc, self.chunk_len):
            for t in self.topk(chunk, k):
                seen.setdefault(t, None)
        return list(seen)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(f, chunk_proj=self.encoder.chunk_proj, entity_proj=self.encoder.entity_proj,
                     buckets=self.encoder.hasher.buckets,
                     salt=np.frombuffer(self.encoder.hasher.salt, dtype=np.uint8),
                     chunk_len=self.chunk_len)

    @classmethod
    def load(cls, model_path: str | Path, index: EntityIndex) -> "Retriever":
        z = np.load(model_path)
        hasher = FeatureHasher(int(z["buckets"]))
        hasher.salt = z["salt"].tobytes()
        return cls(DualEncoder(z["chunk_proj"], z["entity_proj"], hasher), index, int(z["chunk_len"]))


def recall_at_k(retriever: Retriever, dataset: Iterable[tuple[DocChunk | str, set[str]]], k: int) -> float:
    """Fraction of (chunk, gold entity) pairs whose entity is in the chunk's top-k."""
    hit = total = 0
    for chunk, gold in dataset:
        if not gold:
            continue
        top = set(retriever.topk(chunk, k))
        hit += len(gold & top)
        total += len(gold)
    return hit / total if total else 0.0
