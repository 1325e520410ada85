"""Tokenization, documents, annotations and the annotated-sequence grammar.

A linked document is rendered as plain text where every mention becomes::

    ( mention ) [ Entity Title ]

Whitespace that precedes a mention stays outside the opening delimiter, so
``"Steve became CEO of Apple."`` renders as
``"( Steve ) [ Steve Jobs ] became CEO of ( Apple ) [ Apple Inc. ]."``.
Literal ``( ) [ ] \\`` characters in text or titles are backslash-escaped.

At the token level the four delimiters are reserved vocabulary entries, so a
generated token sequence can never confuse a delimiter with a parenthesis
that happens to occur in the document.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from genel.errors import (
    DelimiterError,
    MalformedMarkupError,
    MisalignedSpanError,
    OverlapError,
    UnknownEntityError,
)

MENTION_OPEN = "( "
MENTION_CLOSE = " )"
ENTITY_OPEN = " [ "
ENTITY_CLOSE = " ]"

# reserved ids, fixed for every vocabulary
MOPEN_ID, MCLOSE_ID, EOPEN_ID, ECLOSE_ID, UNK_ID, BOS_ID = range(6)
SPECIAL_SURFACES = (MENTION_OPEN, MENTION_CLOSE, ENTITY_OPEN, ENTITY_CLOSE, "<unk>", "<s>")
DELIMITER_IDS = frozenset({MOPEN_ID, MCLOSE_ID, EOPEN_ID, ECLOSE_ID})

_DELIM_CHARS = "()[]\\"
_TOKEN_RE = re.compile(r"\s*(?:\w+|[^\w\s])|\s+")


@dataclass(frozen=True)
class Token:
    id: int
    surface: str
    start: int = 0  # character offset in the source text

    @property
    def end(self) -> int:
        return self.start + len(self.surface)

    @property
    def core(self) -> str:
        """Surface without its leading whitespace."""
        return self.surface.lstrip()

    @property
    def core_start(self) -> int:
        return self.end - len(self.core)


class Vocabulary:
    """Surface-to-id table with the six reserved ids at the front.

    Growable by default; once frozen, unseen surfaces map to ``<unk>``.
    Special tokens live in their own namespace so that a document token such
    as ``" )"`` never aliases the mention-close delimiter.
    """

    def __init__(self, surfaces: Iterable[str] = (), frozen: bool = False):
        self._surfaces: list[str] = list(SPECIAL_SURFACES)
        self._index: dict[str, int] = {}
        for s in surfaces:
            self.add(s)
        self.frozen = frozen

    def __len__(self) -> int:
        return len(self._surfaces)

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def add(self, surface: str) -> int:
        idx = self._index.get(surface)
        if idx is None:
            idx = len(self._surfaces)
            self._surfaces.append(surface)
            self._index[surface] = idx
        return idx

    def lookup(self, surface: str) -> int:
        idx = self._index.get(surface)
        if idx is not None:
            return idx
        if self.frozen:
            return UNK_ID
        return self.add(surface)

    def surface(self, idx: int) -> str:
        return self._surfaces[idx]

    def freeze(self) -> "Vocabulary":
        self.frozen = True
        return self

    def ordinary_surfaces(self) -> list[str]:
        return self._surfaces[len(SPECIAL_SURFACES):]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.ordinary_surfaces(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), frozen=True)


def split_surfaces(text: str) -> list[str]:
    """Rule-based split: words and single punctuation marks, each carrying
    the whitespace that precedes it. Trailing whitespace becomes its own token."""
    return _TOKEN_RE.findall(text)


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[Token]:
    if vocab is None:
        vocab = Vocabulary()
    tokens = []
    pos = 0
    for s in split_surfaces(text):
        tokens.append(Token(vocab.lookup(s), s, pos))
        pos += len(s)
    return tokens


def detokenize(tokens: Iterable[Token]) -> str:
    return "".join(t.surface for t in tokens)


@dataclass
class Document:
    doc_id: str
    text: str
    tokens: list[Token] = field(default_factory=list, repr=False)

    @classmethod
    def from_text(cls, doc_id: str, text: str, vocab: Vocabulary | None = None) -> "Document":
        return cls(doc_id, text, tokenize(text, vocab))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def token_ids(self) -> list[int]:
        return [t.id for t in self.tokens]

    def span_text(self, m_s: int, m_e: int) -> str:
        """Text of tokens [m_s, m_e) without the first token's leading whitespace."""
        return self.text[self.tokens[m_s].core_start:self.tokens[m_e - 1].end]


@dataclass(frozen=True, order=True)
class Annotation:
    m_s: int
    m_e: int
    ent: str


def validate_annotations(doc: Document, anns: Sequence[Annotation]) -> list[Annotation]:
    """Return annotations sorted by start; raise on overlap or out-of-range spans."""
    out = sorted(anns)
    prev_end = 0
    for a in out:
        if not 0 <= a.m_s < a.m_e <= len(doc.tokens):
            raise OverlapError(f"annotation {a} out of range for {len(doc.tokens)} tokens")
        if a.m_s < prev_end:
            raise OverlapError(f"annotation {a} overlaps a previous annotation")
        if not doc.tokens[a.m_s].core:
            raise OverlapError(f"annotation {a} starts on a whitespace-only token")
        prev_end = a.m_e
    return out


def escape(text: str) -> str:
    return "".join("\\" + c if c in _DELIM_CHARS else c for c in text)


def render_pieces(pieces: Iterable[int | str]) -> str:
    """Render a generated sequence to the annotated string form.

    ``pieces`` holds reserved ids for delimiters and surface strings for
    everything else. Leading whitespace of the first mention token is moved
    in front of the mention-open delimiter. ``<s>`` is dropped.
    """
    parts: list[str] = []
    pending_open = False
    for p in pieces:
        if p == BOS_ID:
            continue
        if p == MOPEN_ID:
            pending_open = True
            continue
        if isinstance(p, int):
            parts.append(SPECIAL_SURFACES[p])
            continue
        if pending_open:
            core = p.lstrip()
            parts.append(p[:len(p) - len(core)] + MENTION_OPEN + escape(core))
            pending_open = False
        else:
            parts.append(escape(p))
    if pending_open:
        parts.append(MENTION_OPEN)
    return "".join(parts)


def render_tokens(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    return render_pieces(t if t < len(SPECIAL_SURFACES) else vocab.surface(t) for t in token_ids)


def target_ids(doc: Document, anns: Sequence[Annotation], vocab: Vocabulary) -> list[int]:
    """Token-level generation target (without the ``<s>`` prompt)."""
    out: list[int] = []
    i = 0
    for a in validate_annotations(doc, anns):
        out.extend(t.id for t in doc.tokens[i:a.m_s])
        out.append(MOPEN_ID)
        out.extend(t.id for t in doc.tokens[a.m_s:a.m_e])
        out.extend((MCLOSE_ID, EOPEN_ID))
        out.extend(t.id for t in tokenize(a.ent, vocab))
        out.append(ECLOSE_ID)
        i = a.m_e
    out.extend(t.id for t in doc.tokens[i:])
    return out


def render_annotated(doc: Document, anns: Sequence[Annotation], kb=None, strict: bool = False) -> str:
    """Render ``doc`` with ``anns`` in the annotated grammar.

    In strict mode, documents containing delimiter characters are rejected
    instead of escaped, and (if ``kb`` is given) unknown entities raise.
    """
    anns = validate_annotations(doc, anns)
    if strict:
        bad = [c for c in doc.text if c in _DELIM_CHARS]
        if bad:
            raise DelimiterError(f"document {doc.doc_id!r} contains delimiter {bad[0]!r}")
        if kb is not None:
            for a in anns:
                if a.ent not in kb:
                    raise UnknownEntityError(a.ent)
    parts = []
    pos = 0
    for a in anns:
        core_start = doc.tokens[a.m_s].core_start
        end = doc.tokens[a.m_e - 1].end
        parts.append(escape(doc.text[pos:core_start]))
        parts.append(MENTION_OPEN + escape(doc.text[core_start:end]) + MENTION_CLOSE)
        parts.append(ENTITY_OPEN + escape(a.ent) + ENTITY_CLOSE)
        pos = end
    parts.append(escape(doc.text[pos:]))
    return "".join(parts)


def _read_block(seq: str, i: int, closer: str, what: str, forbidden: str) -> tuple[str, int]:
    """Read escaped characters up to the unescaped ``closer`` char.

    The closer must be preceded by an unescaped space, which belongs to the
    delimiter and is dropped.
    """
    buf = []
    plain_space = False
    n = len(seq)
    while i < n:
        c = seq[i]
        if c == "\\":
            if i + 1 >= n:
                raise MalformedMarkupError("dangling escape", i)
            buf.append(seq[i + 1])
            plain_space = False
            i += 2
            continue
        if c == closer:
            if not plain_space:
                raise MalformedMarkupError(f"{what} close without separating space", i)
            return "".join(buf[:-1]), i + 1
        if c in forbidden:
            raise MalformedMarkupError(f"unexpected {c!r} inside {what}", i)
        buf.append(c)
        plain_space = c == " "
        i += 1
    raise MalformedMarkupError(f"unterminated {what}", n)


def parse_spans(seq: str) -> tuple[str, list[tuple[int, int, str]]]:
    """Parse annotated markup into plain text and character-level spans."""
    text: list[str] = []
    spans: list[tuple[int, int, str]] = []
    length = 0
    i = 0
    n = len(seq)
    while i < n:
        c = seq[i]
        if c == "\\":
            if i + 1 >= n:
                raise MalformedMarkupError("dangling escape", i)
            text.append(seq[i + 1])
            length += 1
            i += 2
        elif c == "(":
            if not seq.startswith(MENTION_OPEN, i):
                raise MalformedMarkupError("mention open without trailing space", i)
            mention, j = _read_block(seq, i + 2, ")", "mention", "([]")
            if not mention:
                raise MalformedMarkupError("empty mention", i)
            if not seq.startswith(ENTITY_OPEN, j):
                raise MalformedMarkupError("mention not followed by entity block", j)
            title, k = _read_block(seq, j + 3, "]", "entity", "()[")
            if not title:
                raise MalformedMarkupError("empty entity", j)
            spans.append((length, length + len(mention), title))
            text.append(mention)
            length += len(mention)
            i = k
        elif c in ")[]":
            raise MalformedMarkupError(f"unexpected {c!r} outside a mention", i)
        else:
            text.append(c)
            length += 1
            i += 1
    return "".join(text), spans


def parse_annotated(seq: str, vocab: Vocabulary | None = None) -> tuple[str, list[Annotation]]:
    """Inverse of :func:`render_annotated`; annotations are in token indices."""
    text, spans = parse_spans(seq)
    doc = Document.from_text("", text, vocab)
    anns = [Annotation(*char_to_token_span(doc, s, e), ent) for s, e, ent in spans]
    return text, anns


def char_to_token_span(doc: Document, char_start: int, char_end: int) -> tuple[int, int]:
    """Map a character span to the token span covering it exactly.

    ``char_start`` may point at a token start or just past that token's
    leading whitespace; ``char_end`` must be a token end.
    """
    m_s = m_e = None
    for i, t in enumerate(doc.tokens):
        if m_s is None and char_start in (t.start, t.core_start) and char_start < t.end:
            m_s = i
        if t.end == char_end:
            m_e = i + 1
            break
    if m_s is None or m_e is None or m_e <= m_s:
        raise MisalignedSpanError(char_start, char_end)
    return m_s, m_e


def token_to_char_span(doc: Document, m_s: int, m_e: int) -> tuple[int, int]:
    return doc.tokens[m_s].core_start, doc.tokens[m_e - 1].end


# --- dataset files -------------------------------------------------------

def read_dataset(path: str | Path, vocab: Vocabulary | None = None) -> list[tuple[Document, list[Annotation]]]:
    """Read a JSON Lines dataset of character-offset annotations."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            doc = Document.from_text(rec["doc_id"], rec["text"], vocab)
            anns = [Annotation(*char_to_token_span(doc, a["start"], a["end"]), a["entity"])
                    for a in rec.get("annotations", [])]
            out.append((doc, validate_annotations(doc, anns)))
    return out


def dataset_record(doc: Document, anns: Sequence[Annotation]) -> dict:
    recs = []
    for a in sorted(anns):
        s, e = token_to_char_span(doc, a.m_s, a.m_e)
        recs.append({"start": s, "end": e, "entity": a.ent})
    return {"doc_id": doc.doc_id, "text": doc.text, "annotations": recs}


def write_dataset(path: str | Path, items: Iterable[tuple[Document, Sequence[Annotation]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc, anns in items:
            f.write(json.dumps(dataset_record(doc, anns), ensure_ascii=False) + "\n")
