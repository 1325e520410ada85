"""Count scorer calls for guided and vanilla decoding on a synthetic corpus.

    python demos/forward_calls.py

Both decoders share one trigram scorer trained on 300 annotated documents.
The guided decoder only pays inside decision spans; the vanilla beam search
pays for every generated token on both beams.
"""

from genel.engine import GuidedLinker, VanillaLinker
from genel.evaluation import benchmark, format_table
from genel.markup import BOS_ID, Vocabulary, render_annotated, target_ids, tokenize
from genel.scorer import train_ngram_scorer
from genel.synthetic import make_corpus, make_world, retrieval_with_gold

world = make_world(60, seed=7)
vocab = Vocabulary()
for t in world.kb.titles:
    tokenize(t, vocab)
train = make_corpus(world, 300, seed=8, vocab=vocab)
test = make_corpus(world, 100, seed=9, vocab=vocab)

doc, anns = test[0]
print("a test document with its gold links:\n ", render_annotated(doc, anns), "\n")

scorer = train_ngram_scorer([[BOS_ID, *target_ids(d, a, vocab)] for d, a in train], len(vocab), order=3, vocab=vocab)
gold = {d.doc_id: a for d, a in test}
# retrieval is replaced by a stand-in that always includes the gold entities
guided = GuidedLinker(retrieval_with_gold(world, gold), world.entity_to_mentions, scorer, vocab)
vanilla = VanillaLinker(world.kb, vocab, scorer, beam_size=2)

covered = sum(s.end - s.start for d, _ in test for s in guided.spans(d))
print(f"decision spans cover {covered / sum(len(d) for d, _ in test):.1%} of the test tokens\n")

rows = [benchmark(lk, test, repeats=3, kb=world.kb) for lk in (guided, vanilla)]
print(format_table(rows))
print(f"\nguided / vanilla forward calls: {rows[0].lm_forwards / rows[1].lm_forwards:.3f}")
