"""Build an in-context prompt and read a recorded answer back.

    python demos/icl_prompt.py

No model is called. The answer below is what a chat model might write; the
parser locates each mention by its quoted context and drops anything it
cannot place or that names an entity outside the knowledge base.
"""

from genel.icl import ReplayCompleter, build_icl_prompt, icl_link
from genel.kb import build_kb
from genel.markup import Document, render_annotated

kb = build_kb({"title": t} for t in ["Marcel Duchamp", "Fountain (Duchamp)", "New York City", "Fountain"])
doc = Document.from_text("k50", "Duchamp's Fountain was shown in New York in 1917.")
prompt = build_icl_prompt(doc, kb.titles)
print(prompt)

answer = "\n".join([
    "Mention: Duchamp | Context: **Duchamp**'s Fountain was | Entity: Marcel Duchamp",
    "Mention: Fountain | Context: Duchamp's **Fountain** was shown | Entity: Fountain (Duchamp)",
    "Mention: New York | Context: shown in **New York** in 1917 | Entity: New York City",
    "Mention: 1917 | Context: in **1917**. | Entity: 1917 in art",  # not in the KB, dropped
])
completer = ReplayCompleter({ReplayCompleter.key(prompt): answer})
anns, diag = icl_link(doc, kb.titles, completer, kb)
print("\nlinked:", render_annotated(doc, anns))
print("dropped:", diag)
