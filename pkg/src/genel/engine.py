"""Guided greedy decoding over decision spans, and the constrained beam-search baseline.

Both decoders talk to the language model only through ``next_logprobs`` and
make a call only when more than one continuation is legal. The guided
decoder copies everything outside decision spans; the baseline has to decide
between copying and opening a mention at every document token.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from genel.errors import EmptyChoiceError, InternalStateError, VocabularyError
from genel.kb import KnowledgeBase, MentionDict
from genel.markup import (
    BOS_ID,
    ECLOSE_ID,
    EOPEN_ID,
    MCLOSE_ID,
    MOPEN_ID,
    UNK_ID,
    Annotation,
    Document,
    Vocabulary,
    parse_annotated,
    render_pieces,
    tokenize,
)
from genel.scorer import CountingView, TokenScorer
from genel.spans import Anchored, DecisionSpan, candidate_mention_set, decision_spans
from genel.trie import PrefixTrie, TrieNode


class DecoderState(enum.Enum):
    OUTSIDE = "outside"
    IN_SPAN_PENDING = "in_span_pending"
    MENTION_SELECT = "mention_select"
    ENTITY_SELECT = "entity_select"


@dataclass
class GuidedConfig:
    mention_start_offset: float = 0.0
    k: int = 100
    strategy: str = "greedy"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.strategy != "greedy":
            raise ValueError("guided decoding is greedy only")


@dataclass
class LinkResult:
    doc_id: str
    annotations: list[Annotation]
    lm_forwards: int
    wall_time: float
    sequence: str
    token_ids: list[int] = field(default_factory=list, repr=False)
    score: float | None = None  # normalized beam score (baseline only)

    def to_json(self, timing: bool = True) -> dict:
        rec = {
            "doc_id": self.doc_id,
            "annotations": [[a.m_s, a.m_e, a.ent] for a in self.annotations],
            "lm_forwards": self.lm_forwards,
        }
        if timing:
            rec["wall_time_ms"] = round(self.wall_time * 1000, 3)
        return rec


class TitleTokens:
    """Title -> (token ids, surfaces), checked against the scorer vocabulary."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._cache: dict[str, tuple[list[int], list[str]]] = {}

    def __call__(self, title: str, vocab_size: int | None = None) -> tuple[list[int], list[str]]:
        hit = self._cache.get(title)
        if hit is None:
            toks = tokenize(title, self.vocab)
            hit = ([t.id for t in toks], [t.surface for t in toks])
            self._cache[title] = hit
        if vocab_size is not None:
            for tid, s in zip(*hit):
                if tid == UNK_ID or tid >= vocab_size:
                    raise VocabularyError(f"token {s!r} of entity {title!r} is outside the scorer vocabulary")
        return hit


def _argmax(lp: np.ndarray, allowed: Iterable[int]) -> int:
    """Highest log-prob among ``allowed``; ties go to the lowest id."""
    best, best_lp = -1, -math.inf
    for t in sorted(allowed):
        if lp[t] > best_lp or best < 0:
            best, best_lp = t, lp[t]
    return best


def _check_ids(ids: Iterable[int], vocab_size: int, what: str) -> None:
    for t in ids:
        if t >= vocab_size:
            raise VocabularyError(f"{what}: token id {t} outside scorer vocabulary of size {vocab_size}")


def dynamic_mention_trie(doc: Document, anchored: Sequence[Anchored], position: int) -> PrefixTrie:
    """Mentions anchored exactly at ``position``, each closed by the mention-close id."""
    ends = sorted({a.end for a in anchored if a.start == position})
    if not ends:
        raise EmptyChoiceError(f"no mention anchored at token {position}")
    ids = doc.token_ids
    return PrefixTrie(ids[position:e] + [MCLOSE_ID] for e in ends)


def dynamic_entity_trie(titles: Iterable[str], title_tokens: TitleTokens, vocab_size: int | None = None) -> PrefixTrie:
    """Associated entity titles, each closed by the entity-close id."""
    titles = sorted(set(titles))
    if not titles:
        raise EmptyChoiceError("no entity associated with the emitted mention")
    return PrefixTrie(title_tokens(t, vocab_size)[0] + [ECLOSE_ID] for t in titles)


def _walk_trie(trie: PrefixTrie, scorer, prefix: list[int]) -> list[int]:
    """Greedy constrained walk; calls the scorer only at branching nodes."""
    node = trie.root
    path: list[int] = []
    while node.children:
        if len(node.children) == 1:
            (t,) = node.children
        else:
            _check_ids(node.children, scorer.vocab_size, "trie continuation")
            t = _argmax(scorer.next_logprobs(prefix + path), node.children)
        path.append(t)
        node = node.children[t]
    return path


def _verify(doc: Document, pieces: list, anns: list[Annotation]) -> str:
    seq = render_pieces(pieces)
    try:
        text, parsed = parse_annotated(seq)
    except ValueError as exc:
        raise InternalStateError(f"emitted sequence does not parse: {exc}") from exc
    if text != doc.text or parsed != sorted(anns):
        raise InternalStateError("emitted sequence disagrees with tracked annotations")
    return seq


def guided_link(doc: Document, spans: Sequence[DecisionSpan], scorer: TokenScorer, config: GuidedConfig | None = None,
                vocab: Vocabulary | None = None, title_tokens: TitleTokens | None = None) -> LinkResult:
    """Greedy decoding that consults the scorer only inside decision spans.

    Per position inside a span where some mention is anchored, one call
    compares the next document token against the mention-open token plus the
    configured offset. Mention and entity choices are constrained by tries
    built on the fly; single choices are copied without a call.
    """
    cfg = config or GuidedConfig()
    if title_tokens is None:
        title_tokens = TitleTokens(vocab if vocab is not None else Vocabulary())
    view = CountingView(scorer)
    V = scorer.vocab_size
    t0 = time.perf_counter()

    ids = [BOS_ID]
    pieces: list = []
    anns: list[Annotation] = []
    toks = doc.tokens
    n = len(toks)
    span_at: dict[int, DecisionSpan] = {}
    for s in spans:
        for p in range(s.start, s.end):
            span_at[p] = s

    i = 0
    state = DecoderState.OUTSIDE
    while i < n:
        span = span_at.get(i)
        state = DecoderState.OUTSIDE if span is None else DecoderState.IN_SPAN_PENDING
        anchored = [a for a in span.mentions if a.start == i] if span is not None else []
        if state is DecoderState.OUTSIDE or not anchored or not toks[i].core:
            ids.append(toks[i].id)
            pieces.append(toks[i].surface)
            i += 1
            continue

        _check_ids((toks[i].id,), V, "document token")
        lp = view.next_logprobs(ids)
        open_score = lp[MOPEN_ID] + cfg.mention_start_offset
        copy_score = lp[toks[i].id]
        if not (open_score > copy_score or (open_score == copy_score and MOPEN_ID < toks[i].id)):
            ids.append(toks[i].id)
            pieces.append(toks[i].surface)
            i += 1
            continue

        state = DecoderState.MENTION_SELECT
        ids.append(MOPEN_ID)
        pieces.append(MOPEN_ID)
        ends = sorted({a.end for a in anchored})
        if len(ends) == 1:
            end = ends[0]
            path = [t.id for t in toks[i:end]] + [MCLOSE_ID]
        else:
            path = _walk_trie(dynamic_mention_trie(doc, anchored, i), view, ids)
            end = i + len(path) - 1
        ids.extend(path)
        pieces.extend(t.surface for t in toks[i:end])
        pieces.append(MCLOSE_ID)

        state = DecoderState.ENTITY_SELECT
        ids.append(EOPEN_ID)
        pieces.append(EOPEN_ID)
        titles = sorted({a.mention.entity for a in anchored if a.end == end})
        if len(titles) == 1:
            title = titles[0]
            tids, _ = title_tokens(title, V)
            path = tids + [ECLOSE_ID]
        else:
            trie = dynamic_entity_trie(titles, title_tokens, V)
            path = _walk_trie(trie, view, ids)
            by_ids = {tuple(title_tokens(t)[0]): t for t in titles}
            title = by_ids[tuple(path[:-1])]
        ids.extend(path)
        pieces.extend(title_tokens(title)[1])
        pieces.append(ECLOSE_ID)
        anns.append(Annotation(i, end, title))
        i = end

    seq = _verify(doc, pieces, anns)
    return LinkResult(doc.doc_id, anns, view.calls, time.perf_counter() - t0, seq, ids)


# --- constrained beam search baseline ------------------------------------

_OUT, _MENTION, _AFTER_MENTION, _ENTITY, _DONE = range(5)


@dataclass
class _Beam:
    ids: list[int]
    pieces: list
    score: float
    length: int
    pos: int
    mode: int
    mention_start: int = -1
    title_start: int = -1
    node: TrieNode | None = None
    anns: tuple = ()

    @property
    def norm(self) -> float:
        return self.score / self.length if self.length else 0.0


class VanillaDecoder:
    """Constrained beam search with a global entity trie.

    At every document token each beam chooses between copying the token and
    opening a mention; mention bodies copy the document; entity titles are
    constrained by the global trie, or by the mention's dictionary
    candidates when a mention dictionary is supplied and knows the mention.
    Step scores are log-probabilities renormalized over the legal tokens;
    beams are ranked by total score divided by generated length.
    """

    def __init__(self, kb: KnowledgeBase, vocab: Vocabulary, mention_dict: MentionDict | None = None,
                 global_trie: PrefixTrie | None = None, title_tokens: TitleTokens | None = None):
        self.kb = kb
        self.vocab = vocab
        self.mention_dict = mention_dict
        self.title_tokens = title_tokens or TitleTokens(vocab)
        for t in kb.titles:
            self.title_tokens(t, len(vocab))
        self.global_trie = global_trie if global_trie is not None else PrefixTrie(
            self.title_tokens(t)[0] + [ECLOSE_ID] for t in kb.titles)
        self._by_ids = {tuple(self.title_tokens(t)[0]): t for t in kb.titles}
        self._cand_tries: dict[str, PrefixTrie] = {}

    def entity_trie(self, mention: str) -> PrefixTrie:
        if self.mention_dict is None:
            return self.global_trie
        key = self.mention_dict.key(mention)
        trie = self._cand_tries.get(key)
        if trie is None:
            titles = [t for t, _ in self.mention_dict.candidates(mention) if t in self.kb]
            trie = dynamic_entity_trie(titles, self.title_tokens) if titles else self.global_trie
            self._cand_tries[key] = trie
        return trie

    def _allowed(self, doc: Document, b: _Beam) -> list[int]:
        toks = doc.tokens
        if b.mode == _OUT:
            if b.pos == len(toks):
                return []
            out = [toks[b.pos].id]
            if toks[b.pos].core:
                out.append(MOPEN_ID)
            return out
        if b.mode == _MENTION:
            out = [toks[b.pos].id] if b.pos < len(toks) else []
            if b.pos > b.mention_start:
                out.append(MCLOSE_ID)
            return out
        if b.mode == _AFTER_MENTION:
            return [EOPEN_ID]
        return list(b.node.children)

    def _advance(self, doc: Document, b: _Beam, t: int, logp: float) -> _Beam:
        nb = _Beam(b.ids + [t], list(b.pieces), b.score + logp, b.length + 1, b.pos, b.mode,
                   b.mention_start, b.title_start, b.node, b.anns)
        toks = doc.tokens
        if b.mode == _OUT:
            if t == MOPEN_ID:
                nb.mode, nb.mention_start = _MENTION, b.pos
                nb.pieces.append(MOPEN_ID)
            else:
                nb.pieces.append(toks[b.pos].surface)
                nb.pos += 1
        elif b.mode == _MENTION:
            if t == MCLOSE_ID:
                nb.mode = _AFTER_MENTION
                nb.pieces.append(MCLOSE_ID)
            else:
                nb.pieces.append(toks[b.pos].surface)
                nb.pos += 1
        elif b.mode == _AFTER_MENTION:
            nb.mode = _ENTITY
            nb.pieces.append(EOPEN_ID)
            nb.node = self.entity_trie(doc.span_text(b.mention_start, b.pos)).root
            nb.title_start = len(nb.ids)
        else:
            nb.node = b.node.children[t]
            if t == ECLOSE_ID:
                title = self._by_ids[tuple(nb.ids[b.title_start:-1])]
                nb.anns = b.anns + (Annotation(b.mention_start, b.pos, title),)
                nb.pieces.extend(self.title_tokens(title)[1])
                nb.pieces.append(ECLOSE_ID)
                nb.mode, nb.node = _OUT, None
        if nb.mode == _OUT and nb.pos == len(toks):
            nb.mode = _DONE
        return nb

    def decode(self, doc: Document, scorer: TokenScorer, beam_size: int = 2) -> LinkResult:
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        view = CountingView(scorer)
        V = scorer.vocab_size
        t0 = time.perf_counter()
        start = _Beam([BOS_ID], [], 0.0, 0, 0, _OUT)
        if not doc.tokens:
            start.mode = _DONE
        beams = [start]
        while any(b.mode != _DONE for b in beams):
            cands = []
            for b in beams:
                if b.mode == _DONE:
                    cands.append(b)
                    continue
                allowed = self._allowed(doc, b)
                if len(allowed) == 1:
                    cands.append(self._advance(doc, b, allowed[0], 0.0))
                    continue
                _check_ids(allowed, V, "beam continuation")
                lp = view.next_logprobs(b.ids)
                sel = lp[allowed]
                m = sel.max()
                lse = m + math.log(np.exp(sel - m).sum())
                for t, v in zip(allowed, sel):
                    cands.append(self._advance(doc, b, t, float(v - lse)))
            cands.sort(key=lambda c: (-c.norm, c.ids))
            beams = cands[:beam_size]
        best = beams[0]
        anns = list(best.anns)
        seq = _verify(doc, best.pieces, anns)
        return LinkResult(doc.doc_id, sorted(anns), view.calls, time.perf_counter() - t0, seq, best.ids, best.norm)


def vanilla_link(doc: Document, global_trie: PrefixTrie | None, mention_dict: MentionDict | None, scorer: TokenScorer,
                 beam_size: int = 2, *, kb: KnowledgeBase, vocab: Vocabulary) -> LinkResult:
    return VanillaDecoder(kb, vocab, mention_dict, global_trie).decode(doc, scorer, beam_size)


# --- end-to-end linkers ------------------------------------------------------

RetrieveFn = Callable[[Document, int], Sequence[str]]


class GuidedLinker:
    """Retrieve -> possible mentions -> decision spans -> guided decoding."""

    def __init__(self, retrieve: RetrieveFn, entity_to_mentions: Mapping[str, Iterable[str]], scorer: TokenScorer | None,
                 vocab: Vocabulary, config: GuidedConfig | None = None):
        self.retrieve = retrieve
        self.entity_to_mentions = entity_to_mentions
        self.scorer = scorer
        self.vocab = vocab
        self.config = config or GuidedConfig()
        self.title_tokens = TitleTokens(vocab)
        self.mode = "guided"

    def spans(self, doc: Document) -> list[DecisionSpan]:
        entities = self.retrieve(doc, self.config.k)
        return decision_spans(doc, candidate_mention_set(entities, self.entity_to_mentions))

    def link(self, doc: Document, scorer: TokenScorer | None = None) -> LinkResult:
        t0 = time.perf_counter()
        res = guided_link(doc, self.spans(doc), scorer or self.scorer, self.config, title_tokens=self.title_tokens)
        res.wall_time = time.perf_counter() - t0
        return res


class VanillaLinker:
    def __init__(self, kb: KnowledgeBase, vocab: Vocabulary, scorer: TokenScorer | None,
                 mention_dict: MentionDict | None = None, beam_size: int = 2):
        self.decoder = VanillaDecoder(kb, vocab, mention_dict)
        self.scorer = scorer
        self.beam_size = beam_size
        self.mode = "vanilla"

    def link(self, doc: Document, scorer: TokenScorer | None = None) -> LinkResult:
        return self.decoder.decode(doc, scorer or self.scorer, self.beam_size)
