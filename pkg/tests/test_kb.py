import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genel.errors import DuplicateTitleError, UnknownEntityError
from genel.kb import (
    DEFAULT_STOPWORDS,
    MentionDict,
    build_entity_trie,
    build_kb,
    build_mention_dict,
    expand_coreference,
    invert_to_entity_mentions,
    load_dicts,
    load_kb,
    load_stopwords,
    save_dicts,
)
from genel.markup import ECLOSE_ID, Annotation, Document, Vocabulary, tokenize


def _apple_corpus():
    # "Apple" links three times to the company and once to the fruit
    lines = [
        ("Apple shipped a phone.", [(0, 1, "Apple Inc.")]),
        ("Shares of Apple rose.", [(2, 3, "Apple Inc.")]),
        ("An apple a day.", [(1, 2, "Apple")]),
        ("Apple hired staff.", [(0, 1, "Apple Inc.")]),
    ]
    return [(Document.from_text(f"d{i}", t), [Annotation(*a) for a in anns]) for i, (t, anns) in enumerate(lines)]


def test_build_kb_sizes_and_order():
    kb = build_kb([{"title": "Apple"}, {"title": "Apple Inc.", "description": "company"}])
    assert len(kb) == 2
    assert kb.titles == ["Apple", "Apple Inc."]
    assert kb["Apple Inc."].text == "Apple Inc. company"
    assert len(build_kb([])) == 0


def test_duplicate_title_names_it():
    with pytest.raises(DuplicateTitleError, match="Apple"):
        build_kb([{"title": "Apple"}, {"title": "Apple"}])


def test_kb_file_round_trip(tmp_path):
    kb = build_kb([{"title": "Apple", "description": "fruit", "aliases": ["apple"]}, {"title": "NeXT"}])
    kb.save(tmp_path / "kb.jsonl")
    back = load_kb(tmp_path / "kb.jsonl")
    assert back.titles == kb.titles
    assert back["Apple"] == kb["Apple"]


def test_mention_dict_hand_counted():
    md = build_mention_dict(_apple_corpus())
    assert md.candidates("Apple") == [("Apple Inc.", 3), ("Apple", 1)]
    assert md.prior("Apple Inc.", "Apple") == 0.75
    assert md.prior("Apple", "APPLE") == 0.25  # case-normalized lookup
    assert len(build_mention_dict([])) == 0


def test_mention_dict_case_sensitive_mode():
    md = build_mention_dict(_apple_corpus(), casefold=False)
    assert md.candidates("Apple") == [("Apple Inc.", 3)]
    assert md.candidates("apple") == [("Apple", 1)]


def test_mention_dict_strict_unknown_entity():
    kb = build_kb([{"title": "Apple"}])
    with pytest.raises(UnknownEntityError):
        build_mention_dict(_apple_corpus(), kb, strict=True)
    lenient = build_mention_dict(_apple_corpus(), kb)
    assert lenient.candidates("apple") == [("Apple", 1)]


def test_mention_dict_tie_break_by_title():
    md = MentionDict({"x": [("B", 2), ("A", 2), ("C", 5)]})
    assert md.candidates("x") == [("C", 5), ("A", 2), ("B", 2)]


def _invert_bruteforce(entries, stop):
    out = {}
    for m, cands in entries.items():
        words = [t.core.casefold() for t in tokenize(m) if t.core]
        if all(w in stop for w in words):
            continue
        for e, _ in cands:
            bucket = out.setdefault(e, {})
            bucket.setdefault(m.casefold(), m)
    return {e: sorted(v.values(), key=str.casefold) for e, v in out.items()}


def test_inversion_example():
    entries = {
        "Apple": [("Apple Inc.", 3)],
        "the apple company": [("Apple Inc.", 1)],
        "the": [("Apple Inc.", 1)],
        "APPLE": [("Apple Inc.", 1), ("Apple", 1)],
        "apple": [("Apple", 2)],
    }
    got = invert_to_entity_mentions(MentionDict(entries, casefold=False), {"the"})
    assert sorted(got["Apple Inc."], key=str.casefold) == ["Apple", "the apple company"]
    assert len(got["Apple"]) == 1 and got["Apple"][0].casefold() == "apple"
    want = _invert_bruteforce(entries, {"the"})
    assert {e: sorted(ms, key=str.casefold) for e, ms in got.items()}.keys() == want.keys()
    for e in want:
        assert sorted(m.casefold() for m in got[e]) == sorted(m.casefold() for m in want[e])
    assert invert_to_entity_mentions(MentionDict({}), {"the"}) == {}


@settings(max_examples=200)
@given(st.dictionaries(
    st.text(st.sampled_from(list("abT h")), min_size=1, max_size=6),
    st.lists(st.tuples(st.sampled_from(["E1", "E2", "E3"]), st.integers(1, 4)), min_size=1, max_size=3),
    max_size=6,
))
def test_inversion_consistency(entries):
    md = MentionDict(entries, casefold=False)
    stop = {"the", "a"}
    inv = invert_to_entity_mentions(md, stop)
    for e, ms in inv.items():
        assert len({m.casefold() for m in ms}) == len(ms)
        for m in ms:
            assert e in dict(md.candidates(m))
            assert not all(t.core.casefold() in stop for t in tokenize(m) if t.core)


def test_default_stopwords_are_lowercase_words():
    assert "the" in DEFAULT_STOPWORDS
    assert all(w == w.casefold() for w in DEFAULT_STOPWORDS)


def test_load_stopwords(tmp_path):
    p = tmp_path / "stop.txt"
    p.write_text("The\nof\n\n")
    assert load_stopwords(p) == frozenset({"the", "of"})


def test_dicts_file_round_trip(tmp_path):
    md = build_mention_dict(_apple_corpus())
    inv = invert_to_entity_mentions(md)
    save_dicts(tmp_path / "dicts.json", md, inv)
    md2, inv2 = load_dicts(tmp_path / "dicts.json")
    assert dict(md2.items()) == dict(md.items())
    assert inv2 == inv
    assert json.loads((tmp_path / "dicts.json").read_text())["mention_dict"]["casefold"] is True


def test_coreference_example():
    doc = Document.from_text("d", "Jobs founded X. Jobs retired.")
    out = expand_coreference(doc, [Annotation(0, 1, "Steve Jobs")])
    assert out == [Annotation(0, 1, "Steve Jobs"), Annotation(4, 5, "Steve Jobs")]


def test_coreference_no_repetition_is_identity():
    doc = Document.from_text("d", "Jobs founded NeXT.")
    anns = [Annotation(0, 1, "Steve Jobs")]
    assert expand_coreference(doc, anns) == anns


def test_coreference_respects_existing_annotations():
    doc = Document.from_text("d", "Jobs met Steve Jobs.")
    anns = [Annotation(0, 1, "Steve Jobs"), Annotation(2, 4, "Steve Jobs")]
    assert expand_coreference(doc, anns) == anns


def test_coreference_is_case_sensitive():
    doc = Document.from_text("d", "Apple and apple.")
    anns = [Annotation(0, 1, "Apple Inc.")]
    assert expand_coreference(doc, anns) == anns


@st.composite
def _coref_cases(draw):
    words = draw(st.lists(st.sampled_from(["A", "B", "C", "x", "."]), min_size=1, max_size=12))
    doc = Document.from_text("d", " ".join(words))
    anns, pos = [], 0
    while pos < len(doc):
        pos += draw(st.integers(0, 3))
        if pos >= len(doc):
            break
        end = draw(st.integers(pos + 1, min(len(doc), pos + 2)))
        anns.append(Annotation(pos, end, draw(st.sampled_from(["E1", "E2"]))))
        pos = end
    return doc, anns


@settings(max_examples=300)
@given(_coref_cases())
def test_coreference_idempotent_and_preserving(case):
    doc, anns = case
    once = expand_coreference(doc, anns)
    assert set(anns) <= set(once)
    assert expand_coreference(doc, once) == once
    for a, b in zip(once, once[1:]):
        assert a.m_e <= b.m_s


def test_entity_trie_apple_titles():
    v = Vocabulary()
    kb = build_kb([{"title": "Apple"}, {"title": "Apple Inc."}])
    trie = build_entity_trie(kb, v)
    apple = [t.id for t in tokenize("Apple", v)]
    inc = v.lookup(" Inc")
    assert trie.allowed_next(apple) == {ECLOSE_ID, inc}
    assert len(trie) == 2


def test_entity_trie_singleton():
    v = Vocabulary()
    trie = build_entity_trie(build_kb([{"title": "NeXT"}]), v)
    assert list(trie) == [(v.lookup("NeXT"), ECLOSE_ID)]


def test_entity_trie_random_kb_exact():
    import random

    rng = random.Random(5)
    v = Vocabulary()
    titles = set()
    while len(titles) < 50:
        titles.add(" ".join(rng.choice(["Alpha", "Beta", "Gamma", "(x)", "Inc."]) for _ in range(rng.randint(1, 3))))
    kb = build_kb({"title": t} for t in sorted(titles))
    trie = build_entity_trie(kb, v)
    expected = {tuple(t.id for t in tokenize(title, v)) + (ECLOSE_ID,) for title in titles}
    assert set(trie) == expected
