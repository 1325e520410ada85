"""Walk through guided decoding on one sentence.

    python demos/ceo_sentence.py

"Steve became CEO of Apple." with four candidate entities. Only three
tokens are matched by a possible mention, so the decoder copies the rest
and asks the scorer for a decision only inside those spans.
"""

from genel.engine import guided_link, vanilla_link
from genel.kb import build_kb
from genel.markup import Annotation, Document, Vocabulary, render_annotated, target_ids, tokenize
from genel.scorer import oracle_scorer
from genel.spans import candidate_mention_set, decision_spans

entity_to_mentions = {
    "Steve Jobs": ["Steve", "Jobs"],
    "Apple": ["Apple"],
    "Apple Inc.": ["Apple"],
    "CEO (title)": ["CEO"],
}
kb = build_kb({"title": t} for t in entity_to_mentions)
vocab = Vocabulary()
for t in kb.titles:
    tokenize(t, vocab)
doc = Document.from_text("ceo", "Steve became CEO of Apple.", vocab)

print("tokens:", [t.surface for t in doc.tokens])
spans = decision_spans(doc, candidate_mention_set(kb.titles, entity_to_mentions))
for s in spans:
    print(f"decision span [{s.start}, {s.end}): {doc.span_text(s.start, s.end)!r} ->",
          sorted({a.mention.entity for a in s.mentions}))

# A scorer that knows the answer stands in for a trained model.
gold = [Annotation(0, 1, "Steve Jobs"), Annotation(4, 5, "Apple Inc.")]
print("\ntarget:", render_annotated(doc, gold))

res = guided_link(doc, spans, oracle_scorer(target_ids(doc, gold, vocab), len(vocab)), vocab=vocab)
print("guided output: ", res.sequence)
print("guided forward calls:", res.lm_forwards)

van = vanilla_link(doc, None, None, oracle_scorer(target_ids(doc, gold, vocab), len(vocab)), 2, kb=kb, vocab=vocab)
print("vanilla output:", van.sequence)
print("vanilla forward calls:", van.lm_forwards)
