import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genel.engine import (
    GuidedConfig,
    GuidedLinker,
    TitleTokens,
    VanillaDecoder,
    dynamic_entity_trie,
    dynamic_mention_trie,
    guided_link,
    vanilla_link,
)
from genel.errors import EmptyChoiceError, VocabularyError
from genel.kb import build_kb
from genel.markup import (
    ECLOSE_ID,
    MCLOSE_ID,
    MOPEN_ID,
    Annotation,
    Document,
    Vocabulary,
    parse_annotated,
    target_ids,
    tokenize,
)
from genel.scorer import RandomScorer, TokenScorer, oracle_scorer, uniform_scorer
from genel.spans import Anchored, PossibleMention, candidate_mention_set, decision_spans
from cases import CEO_GOLD, ceo_sentence, fuzz_triple, tiny_problem
from oracles import legal_annotation_sets, sequence_scores

INF = float("inf")


def _oracle_for(doc, gold, vocab):
    return oracle_scorer(target_ids(doc, gold, vocab), len(vocab))


# ---- guided decoding ----------------------------------------------------------

def test_ceo_sentence_guided():
    doc, kb, vocab, spans = ceo_sentence()
    scorer = _oracle_for(doc, CEO_GOLD, vocab)
    res = guided_link(doc, spans, scorer, vocab=vocab)
    assert res.annotations == CEO_GOLD
    assert res.sequence == "( Steve ) [ Steve Jobs ] became CEO of ( Apple ) [ Apple Inc. ]."
    # one call per anchored span position (3) and one to pick Apple Inc. over Apple
    assert res.lm_forwards == 4
    assert scorer.forward_count == res.lm_forwards


def test_zero_spans_zero_calls():
    vocab = Vocabulary()
    doc = Document.from_text("d", "Nothing to link here.", vocab)
    scorer = uniform_scorer(len(vocab))
    res = guided_link(doc, [], scorer, vocab=vocab)
    assert res.lm_forwards == 0 and scorer.forward_count == 0
    assert res.sequence == doc.text and res.annotations == []


def _nyc(offset, extra=()):
    vocab = Vocabulary()
    kb = build_kb([{"title": "New York City"}, {"title": "York (city)"}])
    for t in kb.titles:
        tokenize(t, vocab)
    doc = Document.from_text("d", "I love New York City.", vocab)
    assert len(doc) == 6
    e2m = {"New York City": ["New York City", *extra], "York (city)": ["York"]}
    spans = decision_spans(doc, candidate_mention_set(kb.titles, e2m))
    res = guided_link(doc, spans, uniform_scorer(len(vocab)), GuidedConfig(mention_start_offset=offset), vocab=vocab)
    return doc, spans, res


def test_hand_counted_calls_on_six_token_doc():
    # span [2, 5): "New York City" anchored at 2, "York" anchored at 3, nothing at 4
    doc, spans, res = _nyc(INF)
    assert [(s.start, s.end) for s in spans] == [(2, 5)]
    # open at 2 (1 call); the mention and its only entity are copied for free
    assert res.lm_forwards == 1
    assert res.annotations == [Annotation(2, 5, "New York City")]
    _, _, res = _nyc(-INF)
    # copy at 2 and at 3 (2 calls); token 4 has no anchored mention
    assert res.lm_forwards == 2
    assert res.annotations == []


def test_hand_counted_calls_with_a_mention_choice():
    # "New York" and "New York City" both anchored at 2: the mention trie branches once
    _, _, res = _nyc(INF, extra=("New York",))
    assert res.lm_forwards == 2  # open decision + close-or-continue after "York"
    assert res.annotations[0].m_s == 2


def test_uniform_tie_prefers_opening():
    # equal log-probabilities: the mention-open id is the lowest, so it wins
    _, _, res = _nyc(0.0)
    assert res.annotations == [Annotation(2, 5, "New York City")]


def test_dynamic_tries():
    doc, kb, vocab, spans = ceo_sentence()
    tt = TitleTokens(vocab)
    trie = dynamic_entity_trie(["Apple", "Apple Inc."], tt, len(vocab))
    assert set(trie) == {tuple(tt("Apple")[0]) + (ECLOSE_ID,), tuple(tt("Apple Inc.")[0]) + (ECLOSE_ID,)}
    single = dynamic_entity_trie(["Apple"], tt)
    assert len(single) == 1
    with pytest.raises(EmptyChoiceError):
        dynamic_entity_trie([], tt)
    anchored = [Anchored(PossibleMention("E", "Steve"), 0, 1)]
    assert list(dynamic_mention_trie(doc, anchored, 0)) == [(doc.token_ids[0], MCLOSE_ID)]
    with pytest.raises(EmptyChoiceError):
        dynamic_mention_trie(doc, anchored, 1)


def test_dynamic_trie_random_candidate_sets():
    rng = random.Random(0)
    vocab = Vocabulary()
    tt = TitleTokens(vocab)
    for _ in range(200):
        titles = {" ".join(rng.choice(["a", "b", "Inc.", "(x)"]) for _ in range(rng.randint(1, 3)))
                  for _ in range(rng.randint(1, 5))}
        trie = dynamic_entity_trie(titles, tt)
        assert set(trie) == {tuple(tt(t)[0]) + (ECLOSE_ID,) for t in titles}


def test_vocabulary_error_for_out_of_range_title():
    doc, kb, vocab, spans = ceo_sentence()
    small = uniform_scorer(len(vocab) - 1)  # the last title token is now unknown to the scorer
    with pytest.raises(VocabularyError):
        guided_link(doc, spans, small, GuidedConfig(mention_start_offset=INF), vocab=vocab)
    with pytest.raises(VocabularyError):
        VanillaDecoder(kb, Vocabulary(frozen=True))


def test_config_validation():
    with pytest.raises(ValueError):
        GuidedConfig(k=0)
    with pytest.raises(ValueError):
        GuidedConfig(strategy="beam")


def test_guided_linker_end_to_end():
    doc, kb, vocab, _ = ceo_sentence()
    from cases import CEO_E2M

    linker = GuidedLinker(lambda d, k: kb.titles[:k], CEO_E2M, None, vocab)
    res = linker.link(doc, _oracle_for(doc, CEO_GOLD, vocab))
    assert res.annotations == CEO_GOLD


# ---- properties over random triples -----------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_outputs_always_parse_and_respect_constraints(seed):
    t = fuzz_triple(random.Random(seed))
    spans = t.spans()
    before = t.scorer.forward_count
    g = guided_link(t.doc, spans, t.scorer, vocab=t.vocab)
    assert t.scorer.forward_count - before == g.lm_forwards
    text, anns = parse_annotated(g.sequence)
    assert text == t.doc.text and anns == g.annotations
    allowed = {(a.start, a.end, a.mention.entity) for s in spans for a in s.mentions}
    assert all((a.m_s, a.m_e, a.ent) in allowed for a in g.annotations)
    # no calls outside spans: a doc without spans costs nothing
    if not spans:
        assert g.lm_forwards == 0

    before = t.scorer.forward_count
    v = vanilla_link(t.doc, None, t.mention_dict, t.scorer, 2, kb=t.kb, vocab=t.vocab)
    assert t.scorer.forward_count - before == v.lm_forwards
    text, anns = parse_annotated(v.sequence)
    assert text == t.doc.text and anns == v.annotations
    assert all(a.ent in t.kb for a in v.annotations)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-5, 5), st.floats(0, 5))
def test_raising_offset_first_divergence_is_an_open(seed, low, gap):
    t = fuzz_triple(random.Random(seed))
    spans = t.spans()
    lo = guided_link(t.doc, spans, t.scorer, GuidedConfig(mention_start_offset=low), vocab=t.vocab)
    hi = guided_link(t.doc, spans, t.scorer, GuidedConfig(mention_start_offset=low + gap), vocab=t.vocab)
    for a, b in zip(lo.token_ids, hi.token_ids):
        if a != b:
            assert b == MOPEN_ID  # the higher offset opened where the lower one copied
            break


class _ConstantScorer(TokenScorer):
    """Same distribution at every prefix, so decisions are independent."""

    def __init__(self, row):
        super().__init__(len(row))
        self.row = row

    def _logprobs(self, prefix):
        return self.row


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_offset_monotone_in_mention_count_with_independent_decisions(seed):
    rng = random.Random(seed)
    t = fuzz_triple(rng)
    spans = t.spans()
    # keep only spans whose mentions all start at the same token
    spans = [s for s in spans if len({a.start for a in s.mentions}) == 1]
    logits = np.random.default_rng(seed).normal(size=len(t.vocab))
    scorer = _ConstantScorer(logits - np.log(np.exp(logits).sum()))
    counts = [len(guided_link(t.doc, spans, scorer, GuidedConfig(mention_start_offset=d), vocab=t.vocab).annotations)
              for d in (-INF, -2.0, -0.5, 0.0, 0.5, 2.0, INF)]
    assert counts == sorted(counts)


def test_count_can_drop_when_offset_rises_with_nested_anchors():
    # one long mention covering two short ones: opening early swallows both
    vocab = Vocabulary()
    kb = build_kb([{"title": "L"}, {"title": "S1"}, {"title": "S2"}])
    for t in kb.titles:
        tokenize(t, vocab)
    doc = Document.from_text("d", "p q r", vocab)
    e2m = {"L": ["p q r"], "S1": ["q"], "S2": ["r"]}
    spans = decision_spans(doc, candidate_mention_set(kb.titles, e2m))
    row = np.full(len(vocab), -10.0)
    row[MOPEN_ID] = -3.0
    for tok in doc.tokens:
        row[tok.id] = -1.0
    scorer = _ConstantScorer(row)
    # at offset 1.5 no open wins (-1.5 < -1); at 2.5 every position opens, the first swallows the rest
    low = guided_link(doc, spans, scorer, GuidedConfig(mention_start_offset=1.5), vocab=vocab)
    high = guided_link(doc, spans, scorer, GuidedConfig(mention_start_offset=2.5), vocab=vocab)
    assert len(low.annotations) == 0 and len(high.annotations) == 1
    # a tie-free scorer where only later positions prefer opening shows the drop
    row2 = row.copy()
    row2[doc.tokens[0].id] = 0.0  # "p" strongly preferred to opening at 0
    s2 = _ConstantScorer(row2)
    mid = guided_link(doc, spans, s2, GuidedConfig(mention_start_offset=2.5), vocab=vocab)
    top = guided_link(doc, spans, s2, GuidedConfig(mention_start_offset=4.0), vocab=vocab)
    assert [a.ent for a in mid.annotations] == ["S1", "S2"]
    assert [a.ent for a in top.annotations] == ["L"]


# ---- vanilla beam search ------------------------------------------------------

def test_vanilla_oracle_recovers_gold():
    doc, kb, vocab, _ = ceo_sentence()
    scorer = _oracle_for(doc, CEO_GOLD, vocab)
    res = vanilla_link(doc, None, None, scorer, 2, kb=kb, vocab=vocab)
    assert res.annotations == CEO_GOLD
    assert res.lm_forwards == scorer.forward_count


def test_vanilla_costs_more_than_guided_when_spans_leave_gaps():
    doc, kb, vocab, spans = ceo_sentence()
    g = guided_link(doc, spans, _oracle_for(doc, CEO_GOLD, vocab), vocab=vocab)
    v = vanilla_link(doc, None, None, _oracle_for(doc, CEO_GOLD, vocab), 2, kb=kb, vocab=vocab)
    assert v.lm_forwards > g.lm_forwards


def exhaustive_check(doc, kb, vocab, md, scorer):
    """Beam search with a beam as wide as the legal set returns the enumerated argmax."""

    def candidates_for(s, e):
        mention = doc.span_text(s, e)
        if md is not None and mention in md:
            titles = [t for t, _ in md.candidates(mention) if t in kb]
            if titles:
                return sorted(set(titles))
        return kb.titles

    flags = [bool(t.core) for t in doc.tokens]
    sets = legal_annotation_sets(flags, len(doc), candidates_for)
    seqs = [tuple(target_ids(doc, [Annotation(*a) for a in s], vocab)) for s in sets]
    assert len(set(seqs)) == len(seqs)
    scores = sequence_scores(seqs, scorer.next_logprobs, 5)
    ranked = sorted(scores, key=lambda s: (-scores[s], s))
    res = vanilla_link(doc, None, md, scorer, len(seqs), kb=kb, vocab=vocab)
    got = tuple(res.token_ids[1:])
    diff = abs(res.score - scores[ranked[0]])
    near_tie = len(ranked) > 1 and abs(scores[ranked[0]] - scores[ranked[1]]) < 1e-9
    return diff, (got == ranked[0] or near_tie), len(seqs)


def test_beam_exact_on_tiny_problems():
    rng = random.Random(1)
    for _ in range(60):
        diff, same, n = exhaustive_check(*tiny_problem(rng))
        assert same and diff < 1e-9


def test_beam_exact_hand_sized_example():
    # "a b" with KB {A, B}: 1 + 2 + 2 + 2 + 4 = 11 legal annotation sets
    vocab = Vocabulary()
    kb = build_kb([{"title": "A"}, {"title": "B"}])
    for t in kb.titles:
        tokenize(t, vocab)
    doc = Document.from_text("d", "a b", vocab)
    diff, same, n = exhaustive_check(doc, kb, vocab, None, RandomScorer(len(vocab), seed=3))
    assert n == 11 and same and diff < 1e-9
