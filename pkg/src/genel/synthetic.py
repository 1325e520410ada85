"""Synthetic knowledge bases and corpora with known gold links.

Entity names and context words are built from disjoint syllable sets and
never collide with the lowercase filler vocabulary, so the only places a
mention can match are the places it was inserted. Organisations come in
pairs such as ``Kazo`` / ``Kazo Corp.`` sharing the mention ``Kazo``, and
some people share a surname, so disambiguation is never trivial.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from genel.kb import EntityRecord, KnowledgeBase
from genel.markup import Annotation, Document, Vocabulary, char_to_token_span

_NAME_SYL = ["ka", "zo", "rin", "tel", "mar", "vos", "quin", "dra", "lu", "pex", "bor", "sen",
             "vi", "gar", "tho", "nel", "ri", "dax", "mo", "fen", "ul", "cor", "ze", "bal"]
_CTX_SYL = ["ph", "yst", "orm", "ack", "ilb", "uv", "esk", "ight", "aw", "oj", "ulp", "ix"]
FILLER = ("the a of in on and to was is for with by as at from that this it be were "
          "new year city team group company first after later during report said told "
          "people time work market game season music film state government local").split()


@dataclass
class World:
    kb: KnowledgeBase
    surface_forms: dict[str, list[str]]  # entity -> mention strings used in text
    context_words: dict[str, list[str]]  # entity -> words that co-occur with it
    confusables: dict[str, list[str]] = field(default_factory=dict)  # entity -> entities sharing a mention

    @property
    def entity_to_mentions(self) -> dict[str, list[str]]:
        return {e: list(ms) for e, ms in self.surface_forms.items()}


def _word(rng: random.Random, syllables: Sequence[str], n: tuple[int, int]) -> str:
    return "".join(rng.choice(syllables) for _ in range(rng.randint(*n)))


def _unique(rng, used: set[str], make) -> str:
    while True:
        w = make()
        if w.casefold() not in used and w.casefold() not in FILLER:
            used.add(w.casefold())
            return w


def make_world(n_entities: int = 50, seed: int = 0, context_size: int = 3) -> World:
    rng = random.Random(seed)
    used: set[str] = set()
    name = lambda: _unique(rng, used, lambda: _word(rng, _NAME_SYL, (2, 3)).capitalize())
    ctx = lambda: _unique(rng, used, lambda: _word(rng, _NAME_SYL, (1, 1)) + _word(rng, _CTX_SYL, (1, 2)))

    records, forms, contexts = [], {}, {}
    surnames: list[str] = []
    while len(records) < n_entities:
        kind = rng.random()
        if kind < 0.3 and len(records) + 2 <= n_entities:
            base = name()
            pair = [(base, [base]), (f"{base} Corp.", [base, f"{base} Corp."])]
        else:
            if surnames and rng.random() < 0.3:
                last = rng.choice(surnames)
            else:
                last = name()
                surnames.append(last)
            first = name()
            pair = [(f"{first} {last}", [f"{first} {last}", last])]
        for title, ms in pair:
            words = [ctx() for _ in range(context_size)]
            records.append(EntityRecord(title, "known for " + " ".join(words)))
            forms[title] = ms
            contexts[title] = words
    kb = KnowledgeBase(records)
    by_mention: dict[str, list[str]] = {}
    for e, ms in forms.items():
        for m in ms:
            by_mention.setdefault(m.casefold(), []).append(e)
    conf = {e: sorted({o for m in ms for o in by_mention[m.casefold()] if o != e}) for e, ms in forms.items()}
    return World(kb, forms, contexts, conf)


def make_corpus(world: World, n_docs: int, seed: int = 0, vocab: Vocabulary | None = None,
                sentences: tuple[int, int] = (2, 4), filler: tuple[int, int] = (7, 12),
                mention_prob: float = 0.8, context_prob: float = 0.7,
                entities: Sequence[str] | None = None) -> list[tuple[Document, list[Annotation]]]:
    """Documents of filler sentences, each with at most one inserted mention."""
    rng = random.Random(seed)
    pool = list(entities) if entities is not None else world.kb.titles
    out = []
    for d in range(n_docs):
        text = ""
        spans: list[tuple[int, int, str]] = []
        for _ in range(rng.randint(*sentences)):
            words = [rng.choice(FILLER) for _ in range(rng.randint(*filler))]
            if rng.random() < mention_prob:
                ent = rng.choice(pool)
                mention = rng.choice(world.surface_forms[ent])
                at = rng.randint(0, len(words))
                if rng.random() < context_prob:
                    words.insert(rng.randint(0, len(words)), rng.choice(world.context_words[ent]))
                words.insert(at, (ent, mention))
            pieces = []
            for w in words:
                if text or pieces:
                    pieces.append(" ")
                if isinstance(w, tuple):
                    start = len(text) + len("".join(pieces))
                    spans.append((start, start + len(w[1]), w[0]))
                    pieces.append(w[1])
                else:
                    pieces.append(w)
            text += "".join(pieces) + "."
        doc = Document.from_text(f"doc{d:05d}", text, vocab)
        anns = [Annotation(*char_to_token_span(doc, s, e), ent) for s, e, ent in spans]
        out.append((doc, anns))
    return out


def retrieval_with_gold(world: World, gold: dict[str, Sequence[Annotation]], distractors: int = 5, seed: int = 0):
    """Retrieval stand-in that always returns a document's gold entities,
    their confusable neighbours, and a few random distractors."""
    titles = world.kb.titles

    def retrieve(doc: Document, k: int) -> list[str]:
        rng = random.Random(f"{seed}:{doc.doc_id}")
        out = dict.fromkeys(sorted({a.ent for a in gold.get(doc.doc_id, ())}))
        for e in list(out):
            out.update(dict.fromkeys(world.confusables.get(e, ())))
        out.update(dict.fromkeys(rng.sample(titles, min(distractors, len(titles)))))
        return list(out)

    return retrieve


def make_separable(n_entities: int = 20, n_chunks: int = 100, seed: int = 0, words_per_entity: int = 8,
                   chunk_words: int = 6, noise_words: int = 4, chunk_seed: int | None = None) -> tuple[KnowledgeBase, list[tuple[str, set[str]]]]:
    """Chunks whose content words belong to exactly one entity each.

    Entity descriptions hold half of that entity's words; chunks draw from
    all of them plus shared filler, so a linear model can separate them but
    has to learn which unseen description words go together.
    """
    rng = random.Random(seed)
    used: set[str] = set()
    vocab = {}
    records = []
    for i in range(n_entities):
        words = [_unique(rng, used, lambda: _word(rng, _NAME_SYL, (1, 1)) + _word(rng, _CTX_SYL, (2, 2)))
                 for _ in range(words_per_entity)]
        title = f"Entity {i:03d}"
        vocab[title] = words
        records.append(EntityRecord(title, " ".join(words[:words_per_entity // 2])))
    kb = KnowledgeBase(records)
    if chunk_seed is not None:
        rng = random.Random(f"chunks:{chunk_seed}")
    corpus = []
    for c in range(n_chunks):
        title = records[c % n_entities].title
        ws = [rng.choice(vocab[title]) for _ in range(chunk_words)] + [rng.choice(FILLER) for _ in range(noise_words)]
        rng.shuffle(ws)
        corpus.append((" ".join(ws), {title}))
    return kb, corpus
