"""Decision-required spans: possible mentions, surface matching and merging."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

from genel.markup import Document, split_surfaces

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class PossibleMention:
    entity: str
    mention: str


class RawMatch(NamedTuple):
    start: int
    end: int
    mention: object  # usually a PossibleMention


@dataclass(frozen=True)
class Anchored:
    """A possible mention pinned to the token range where it occurs."""
    mention: PossibleMention
    start: int
    end: int


@dataclass
class DecisionSpan:
    start: int
    end: int
    mentions: list


def candidate_mention_set(entities: Iterable[str], entity_to_mentions: Mapping[str, Iterable[str]]) -> set[PossibleMention]:
    out = set()
    for e in entities:
        ms = entity_to_mentions.get(e)
        if ms is None:
            log.warning("retrieved entity %r has no entry in the entity-to-mention map", e)
            continue
        out.update(PossibleMention(e, m) for m in ms)
    return out


# Symbols: ("w", ws-string) for a whitespace run, ("c", casefolded core) for a
# token body. Matches must start and end on a core symbol, which makes them
# token aligned while ignoring the whitespace before the first token.

def _symbols(surfaces: Sequence[str]) -> tuple[list[tuple[str, str]], list[int]]:
    syms: list[tuple[str, str]] = []
    owner: list[int] = []
    for i, s in enumerate(surfaces):
        core = s.lstrip()
        ws = s[:len(s) - len(core)]
        if ws:
            syms.append(("w", ws))
            owner.append(i)
        if core:
            syms.append(("c", core.casefold()))
            owner.append(i)
    return syms, owner


def pattern_symbols(mention: str) -> tuple[tuple[str, str], ...]:
    syms, _ = _symbols(split_surfaces(mention.strip()))
    return tuple(syms)


class _Node:
    __slots__ = ("goto", "fail", "out")

    def __init__(self):
        self.goto: dict = {}
        self.fail: _Node | None = None
        self.out: list = []


class MultiPatternMatcher:
    """Aho-Corasick automaton over arbitrary hashable symbols."""

    def __init__(self, patterns: Iterable[tuple[Sequence[Hashable], object]] = ()):
        self.root = _Node()
        for syms, payload in patterns:
            self.add(syms, payload)
        self._build()

    def add(self, syms: Sequence[Hashable], payload) -> None:
        if not syms:
            return
        node = self.root
        for s in syms:
            node = node.goto.setdefault(s, _Node())
        node.out.append((len(syms), payload))

    def _build(self) -> None:
        self.root.fail = self.root
        queue = deque()
        for child in self.root.goto.values():
            child.fail = self.root
            queue.append(child)
        while queue:
            node = queue.popleft()
            for sym, child in node.goto.items():
                f = node.fail
                while f is not self.root and sym not in f.goto:
                    f = f.fail
                child.fail = f.goto[sym] if sym in f.goto and f.goto[sym] is not child else self.root
                child.out = child.out + child.fail.out
                queue.append(child)

    def scan(self, syms: Sequence[Hashable]):
        """Yield (start, end_exclusive, payload) for every occurrence."""
        node = self.root
        for i, s in enumerate(syms):
            while node is not self.root and s not in node.goto:
                node = node.fail
            node = node.goto.get(s, self.root)
            for length, payload in node.out:
                yield i + 1 - length, i + 1, payload


def match_surface_forms(doc: Document, mentions: Iterable[PossibleMention]) -> list[RawMatch]:
    """Every token-aligned, case-insensitive occurrence of every possible mention."""
    by_pattern: dict[tuple, list[PossibleMention]] = {}
    for pm in sorted(set(mentions)):
        syms = pattern_symbols(pm.mention)
        if syms:
            by_pattern.setdefault(syms, []).append(pm)
    if not by_pattern:
        return []
    matcher = MultiPatternMatcher(by_pattern.items())
    syms, owner = _symbols([t.surface for t in doc.tokens])
    out = []
    for s, e, pms in matcher.scan(syms):
        if syms[s][0] != "c":
            continue
        for pm in pms:
            out.append(RawMatch(owner[s], owner[e - 1] + 1, pm))
    out.sort(key=lambda m: (m.start, m.end, m.mention))
    return out


def merge_decision_spans(raw: Iterable[RawMatch]) -> list[DecisionSpan]:
    """Fold start-sorted matches into disjoint spans.

    A match joins the previous span when it starts inside it; touching
    end-exclusive ranges do not merge.
    """
    merged: list[DecisionSpan] = []
    for m in sorted(raw, key=lambda m: m.start):
        if merged and merged[-1].start <= m.start < merged[-1].end:
            merged[-1].end = max(merged[-1].end, m.end)
            merged[-1].mentions.append(m)
        else:
            merged.append(DecisionSpan(m.start, m.end, [m]))
    return merged


def decision_spans(doc: Document, mentions: Iterable[PossibleMention]) -> list[DecisionSpan]:
    """Match and merge; span members are :class:`Anchored` possible mentions."""
    spans = merge_decision_spans(match_surface_forms(doc, mentions))
    for span in spans:
        span.mentions = [Anchored(m.mention, m.start, m.end) for m in span.mentions]
    return spans
