"""Knowledge base, mention-candidate dictionary and its entity-to-mention inversion."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from genel.errors import DuplicateTitleError, UnknownEntityError
from genel.markup import ECLOSE_ID, Annotation, Document, Vocabulary, tokenize
from genel.trie import PrefixTrie

DEFAULT_STOPWORDS = frozenset("""
a an the and or but if then else of at by for with about against between into
through during before after above below to from up down in out on off over
under again further once here there when where why how all any both each few
more most other some such no nor not only own same so than too very is are was
were be been being have has had do does did it its he she they them his her
their this that these those i you we me my our your which who whom what
""".split())


@dataclass(frozen=True)
class EntityRecord:
    title: str
    description: str = ""
    aliases: frozenset[str] = field(default_factory=frozenset)

    @property
    def text(self) -> str:
        """Title and description, the input of the entity encoder."""
        return f"{self.title} {self.description}".strip()


class KnowledgeBase:
    """Entities keyed by unique title, iterated in insertion order."""

    def __init__(self, records: Iterable[EntityRecord] = ()):
        self._records: dict[str, EntityRecord] = {}
        for r in records:
            if not r.title:
                raise ValueError("entity title must be non-empty")
            if r.title in self._records:
                raise DuplicateTitleError(r.title)
            self._records[r.title] = r
        self._position = {t: i for i, t in enumerate(self._records)}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, title: object) -> bool:
        return title in self._records

    def __iter__(self) -> Iterator[EntityRecord]:
        return iter(self._records.values())

    def __getitem__(self, title: str) -> EntityRecord:
        return self._records[title]

    @property
    def titles(self) -> list[str]:
        return list(self._records)

    def position(self, title: str) -> int:
        return self._position[title]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for r in self:
                rec = {"title": r.title, "description": r.description, "aliases": sorted(r.aliases)}
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def build_kb(entries: Iterable[Mapping | EntityRecord]) -> KnowledgeBase:
    records = []
    for e in entries:
        if not isinstance(e, EntityRecord):
            e = EntityRecord(e["title"], e.get("description", ""), frozenset(e.get("aliases", ())))
        records.append(e)
    return KnowledgeBase(records)


def load_kb(path: str | Path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as f:
        return build_kb(json.loads(line) for line in f if line.strip())


def load_stopwords(path: str | Path) -> frozenset[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(w.strip().casefold() for w in lines if w.strip())


class MentionDict:
    """Mention string -> [(entity title, count)], sorted by count desc then title.

    Keys are casefolded when ``casefold`` is set; lookups normalize the same way.
    """

    def __init__(self, entries: Mapping[str, Iterable[tuple[str, int]]] | None = None, casefold: bool = True):
        self.casefold = casefold
        self._table: dict[str, list[tuple[str, int]]] = {}
        for m, cands in (entries or {}).items():
            merged: Counter[str] = Counter()
            for title, count in cands:
                if count < 1:
                    raise ValueError(f"non-positive count for ({m!r}, {title!r})")
                merged[title] += count
            key = self.key(m)
            if key in self._table:
                merged.update(dict(self._table[key]))
            self._table[key] = _ranked(merged)

    def key(self, mention: str) -> str:
        return mention.casefold() if self.casefold else mention

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, mention: str) -> bool:
        return self.key(mention) in self._table

    def __iter__(self) -> Iterator[str]:
        return iter(self._table)

    def items(self):
        return self._table.items()

    def candidates(self, mention: str) -> list[tuple[str, int]]:
        return self._table.get(self.key(mention), [])

    def prior(self, title: str, mention: str) -> float:
        """Empirical p(entity | mention) from link counts."""
        cands = self.candidates(mention)
        total = sum(c for _, c in cands)
        return dict(cands).get(title, 0) / total if total else 0.0

    def to_json(self) -> dict:
        return {"casefold": self.casefold, "mentions": {m: [list(c) for c in v] for m, v in self._table.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "MentionDict":
        return cls({m: [tuple(c) for c in v] for m, v in obj["mentions"].items()}, obj.get("casefold", True))


def _ranked(counts: Mapping[str, int]) -> list[tuple[str, int]]:
    return sorted(counts.items(), key=lambda tc: (-tc[1], tc[0]))


def build_mention_dict(
    corpus: Iterable[tuple[Document, Sequence[Annotation]]],
    kb: KnowledgeBase | None = None,
    strict: bool = False,
    casefold: bool = True,
) -> MentionDict:
    """Count how often each mention surface links to each entity.

    No truncation of candidate lists. In strict mode an annotation whose
    entity is missing from ``kb`` raises; otherwise such links are skipped
    when a KB is given.
    """
    counts: dict[str, Counter[str]] = defaultdict(Counter)
    for doc, anns in corpus:
        for a in anns:
            if kb is not None and a.ent not in kb:
                if strict:
                    raise UnknownEntityError(a.ent)
                continue
            counts[doc.span_text(a.m_s, a.m_e)][a.ent] += 1
    return MentionDict({m: c.items() for m, c in counts.items()}, casefold=casefold)


def is_stopword_only(mention: str, stopwords: frozenset[str] | set[str]) -> bool:
    words = [t.core.casefold() for t in tokenize(mention) if t.core]
    return all(w in stopwords for w in words)


def invert_to_entity_mentions(
    mention_dict: MentionDict | Mapping[str, Iterable[tuple[str, int]]],
    stopwords: Iterable[str] = DEFAULT_STOPWORDS,
) -> dict[str, list[str]]:
    """Entity -> mentions, dropping stopword-only mentions and case duplicates.

    The first surface seen (in dictionary order) represents a casefold class.
    """
    stop = frozenset(w.casefold() for w in stopwords)
    items = mention_dict.items()
    out: dict[str, list[str]] = {}
    seen: dict[str, set[str]] = defaultdict(set)
    for mention, cands in items:
        if not mention.strip() or is_stopword_only(mention, stop):
            continue
        norm = mention.casefold()
        for title, _ in cands:
            if norm in seen[title]:
                continue
            seen[title].add(norm)
            out.setdefault(title, []).append(mention)
    return out


def restrict_to_kb(e2m: Mapping[str, list[str]], kb: KnowledgeBase) -> dict[str, list[str]]:
    return {e: ms for e, ms in e2m.items() if e in kb}


def save_dicts(path: str | Path, mention_dict: MentionDict, e2m: Mapping[str, list[str]]) -> None:
    obj = {"mention_dict": mention_dict.to_json(), "entity_to_mentions": dict(e2m)}
    Path(path).write_text(json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True), encoding="utf-8")


def load_dicts(path: str | Path) -> tuple[MentionDict, dict[str, list[str]]]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return MentionDict.from_json(obj["mention_dict"]), obj["entity_to_mentions"]


def expand_coreference(doc: Document, anns: Sequence[Annotation]) -> list[Annotation]:
    """Label later exact repetitions of annotated mentions.

    A repetition takes the entity of the closest preceding annotation with
    the same (case-sensitive) surface. Repetitions that would overlap an
    existing annotation are left alone.
    """
    anns = sorted(anns)
    if not anns:
        return []
    by_surface: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for a in anns:
        by_surface[doc.span_text(a.m_s, a.m_e)].append((a.m_s, a.m_e - a.m_s, a.ent))

    taken = [False] * len(doc.tokens)
    for a in anns:
        for i in range(a.m_s, a.m_e):
            taken[i] = True

    added = []
    n = len(doc.tokens)
    for j in range(n):
        if taken[j] or not doc.tokens[j].core:
            continue
        best = None  # (anchor start, length, entity) of the closest preceding source
        for surface, sources in by_surface.items():
            for start, length, ent in sources:
                if start >= j or j + length > n:
                    continue
                if any(taken[j:j + length]) or doc.span_text(j, j + length) != surface:
                    continue
                if best is None or start > best[0]:
                    best = (start, length, ent)
        if best is not None:
            _, length, ent = best
            added.append(Annotation(j, j + length, ent))
            for i in range(j, j + length):
                taken[i] = True
    return sorted(anns + added)


def build_entity_trie(kb: KnowledgeBase, vocab: Vocabulary) -> PrefixTrie:
    """Trie over every title's token ids followed by the entity-close id."""
    return PrefixTrie([t.id for t in tokenize(title, vocab)] + [ECLOSE_ID] for title in kb.titles)
