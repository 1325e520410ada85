"""In-context-learning prompt construction and response parsing.

The language model is any ``complete(prompt) -> str`` callable. Responses
are parsed line by line; each prediction carries a few words of context so
that repeated surface forms can be told apart.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from genel.kb import KnowledgeBase
from genel.markup import Annotation, Document
from genel.spans import PossibleMention, match_surface_forms

TEMPLATE_VERSION = "icl_v1"
CONTEXT_WINDOW = 3
# recorded with every run; not sent anywhere
GENERATION_PARAMS = {"temperature": 0, "max_tokens": 300, "top_p": 1, "frequency_penalty": 0.0, "presence_penalty": 0.0}

_LINE_RE = re.compile(
    r"^\s*(?:[-*]|\d+[.)])?\s*Mention:\s*(?P<mention>.+?)\s*\|\s*Context:\s*(?P<context>.*?)\s*"
    r"\|\s*Entity:\s*(?P<entity>.+?)\s*$"
)
_NONE_RE = re.compile(r"^\s*(?:[-*]|\d+[.)])?\s*Mention:\s*none\s*$", re.IGNORECASE)


def load_template(version: str = TEMPLATE_VERSION) -> str:
    return resources.files("genel").joinpath(f"templates/{version}.txt").read_text(encoding="utf-8")


@dataclass
class Exemplar:
    doc: Document
    annotations: list[Annotation]
    entities: list[str]


def default_exemplar() -> Exemplar:
    doc = Document.from_text("exemplar", "Steve became CEO of Apple. Jobs later left Apple to found NeXT.")
    anns = [Annotation(0, 1, "Steve Jobs"), Annotation(4, 5, "Apple Inc."), Annotation(6, 7, "Steve Jobs"),
            Annotation(9, 10, "Apple Inc."), Annotation(12, 13, "NeXT")]
    return Exemplar(doc, anns, ["Steve Jobs", "Apple", "Apple Inc.", "NeXT", "Chief executive officer"])


def context_line(doc: Document, ann: Annotation, window: int = CONTEXT_WINDOW) -> str:
    mention = doc.span_text(ann.m_s, ann.m_e)
    first = doc.tokens[ann.m_s]
    lead = first.surface[:len(first.surface) - len(first.core)]
    left = "".join(t.surface for t in doc.tokens[max(0, ann.m_s - window):ann.m_s]) + lead
    right = "".join(t.surface for t in doc.tokens[ann.m_e:ann.m_e + window])
    # keep the document's own spacing so the context reads as a quote
    ctx = " ".join((left.lstrip() + f"**{mention}**" + right.rstrip()).split())
    return f"Mention: {mention} | Context: {ctx} | Entity: {ann.ent}"


def _entity_lines(entities: Iterable[str]) -> str:
    return "\n".join(f"- {e}" for e in entities)


def build_icl_prompt(doc: Document, entities: Sequence[str], exemplar: Exemplar | None = None,
                     template: str | None = None, window: int = CONTEXT_WINDOW) -> str:
    ex = exemplar or default_exemplar()
    answers = "\n".join(context_line(ex.doc, a, window) for a in sorted(ex.annotations)) or "Mention: none"
    return (template or load_template()).format(
        exemplar_document=ex.doc.text,
        exemplar_entities=_entity_lines(ex.entities),
        exemplar_answers=answers,
        document=doc.text,
        entities=_entity_lines(entities),
    )


@dataclass
class IclDiagnostics:
    malformed: int = 0
    unknown_entity: int = 0
    unlocated: int = 0
    overlapping: int = 0
    lines: list[str] = field(default_factory=list)


def _context_score(doc: Document, start: int, end: int, left: list[str], right: list[str], window: int) -> int:
    before = [t.core.casefold() for t in doc.tokens[max(0, start - window):start]]
    after = [t.core.casefold() for t in doc.tokens[end:end + window]]
    score = 0
    for a, b in zip(reversed(left), reversed(before)):
        if a != b:
            break
        score += 1
    for a, b in zip(right, after):
        if a != b:
            break
        score += 1
    return score


def _split_context(context: str, mention: str) -> tuple[list[str], list[str]]:
    m = re.search(r"\*\*(.+?)\*\*", context)
    if m:
        left, right = context[:m.start()], context[m.end():]
    else:
        i = context.casefold().find(mention.casefold())
        if i < 0:
            return [], []
        left, right = context[:i], context[i + len(mention):]
    return _cores(left), _cores(right)


def _cores(s: str) -> list[str]:
    # same granularity as the document side
    return [t.core.casefold() for t in Document.from_text("", s).tokens if t.core]


def parse_icl_response(response: str, doc: Document, kb: KnowledgeBase,
                       window: int = CONTEXT_WINDOW) -> tuple[list[Annotation], IclDiagnostics]:
    """Turn response lines into non-overlapping in-KB annotations."""
    diag = IclDiagnostics()
    taken = [False] * len(doc.tokens)
    out: list[Annotation] = []
    for line in response.splitlines():
        if not line.strip() or _NONE_RE.match(line):
            continue
        m = _LINE_RE.match(line)
        if m is None:
            diag.malformed += 1
            diag.lines.append(line)
            continue
        mention, context, entity = m["mention"], m["context"], m["entity"]
        if entity not in kb:
            diag.unknown_entity += 1
            continue
        occ = [(r.start, r.end) for r in match_surface_forms(doc, [PossibleMention(entity, mention)])]
        if not occ:
            diag.unlocated += 1
            continue
        left, right = _split_context(context, mention)
        exact = [o for o in occ if doc.span_text(*o) == mention.strip()]
        pool = exact or occ
        free = [o for o in pool if not any(taken[o[0]:o[1]])]
        if not free:
            diag.overlapping += 1
            continue
        best = max(free, key=lambda o: (_context_score(doc, o[0], o[1], left, right, window), -o[0]))
        for i in range(*best):
            taken[i] = True
        out.append(Annotation(best[0], best[1], entity))
    return sorted(out), diag


class ReplayCompleter:
    """File-backed stub: JSON Lines of {"prompt_sha256": ..., "response": ...}.

    A record whose hash is ``"*"`` answers any prompt not otherwise listed.
    """

    def __init__(self, records: dict[str, str]):
        self.records = records
        self.calls = 0

    @staticmethod
    def key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "ReplayCompleter":
        recs = {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    r = json.loads(line)
                    recs[r["prompt_sha256"]] = r["response"]
        return cls(recs)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for k in sorted(self.records):
                f.write(json.dumps({"prompt_sha256": k, "response": self.records[k]}, ensure_ascii=False) + "\n")

    def __call__(self, prompt: str) -> str:
        self.calls += 1
        k = self.key(prompt)
        if k in self.records:
            return self.records[k]
        if "*" in self.records:
            return self.records["*"]
        raise KeyError(f"no recorded response for prompt {k[:12]}")


def icl_link(doc: Document, entities: Sequence[str], complete: Callable[[str], str], kb: KnowledgeBase,
             exemplar: Exemplar | None = None) -> tuple[list[Annotation], IclDiagnostics]:
    prompt = build_icl_prompt(doc, entities, exemplar)
    return parse_icl_response(complete(prompt), doc, kb)
