"""Command-line entry point: ``genel <command> [options]``.

Every artifact is addressed by an explicit path. Options can come from a
config file (``--config``, INI format with a ``[genel]`` section); flags
given on the command line win over the file, which wins over defaults.
Failures print one JSON line ``{"error": <kind>, "message": <text>}`` to
stderr and exit with status 2. ``eval`` exits 1 when F1 is below
``--min-f1``.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from genel import __version__
from genel.engine import GuidedConfig, GuidedLinker, VanillaLinker
from genel.errors import GenELError
from genel.evaluation import benchmark, format_table, micro_f1_inkb, rows_to_json
from genel.icl import GENERATION_PARAMS, TEMPLATE_VERSION, ReplayCompleter, build_icl_prompt, parse_icl_response
from genel.kb import (
    DEFAULT_STOPWORDS,
    build_kb,
    build_mention_dict,
    expand_coreference,
    invert_to_entity_mentions,
    load_dicts,
    load_kb,
    load_stopwords,
    restrict_to_kb,
    save_dicts,
)
from genel.markup import (
    BOS_ID,
    Annotation,
    Vocabulary,
    dataset_record,
    read_dataset,
    target_ids,
    tokenize,
)
from genel.retriever import (
    CHUNK_LEN,
    EntityIndex,
    Retriever,
    TrainConfig,
    build_index,
    chunk_document,
    chunk_gold,
    train_retriever,
)
from genel.scorer import load_ngram, save_ngram, train_ngram_scorer

log = logging.getLogger("genel")

# key -> (type, default); every key may appear in the [genel] section
CONFIG_KEYS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "k": (int, 100),
    "offset": (float, 0.0),
    "beam_size": (int, 2),
    "jobs": (int, 1),
    "chunk_len": (int, CHUNK_LEN),
    "order": (int, 3),
    "smoothing": (float, 0.1),
    "epochs": (int, 10),
    "lr": (float, 0.1),
    "negatives": (int, 32),
    "batch_size": (int, 16),
    "dim": (int, 128),
    "buckets": (int, 2 ** 15),
    "repeats": (int, 10),
    "min_f1": (float, 0.0),
    "window": (int, 3),
    "casefold": (bool, True),
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise CliError("ConfigError", f"not a boolean: {s!r}")


def load_config(path: str | None) -> dict:
    out = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if path is None:
        return out
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise CliError("ConfigError", f"cannot read config file {path}")
    if not cp.has_section("genel"):
        raise CliError("ConfigError", f"{path}: missing [genel] section")
    for key, raw in cp.items("genel"):
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise CliError("ConfigError", f"{path}: unknown key {key!r}")
        typ = CONFIG_KEYS[key][0]
        try:
            out[key] = _parse_bool(raw) if typ is bool else typ(raw)
        except ValueError:
            raise CliError("ConfigError", f"{path}: bad value for {key}: {raw!r}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Config-file values overlaid with the flags that were actually given."""
    cfg = load_config(args.config)
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _dump_jsonl(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# --- commands ----------------------------------------------------------------

def cmd_build_kb(args, cfg) -> int:
    kb = build_kb(_read_jsonl(args.entities))
    kb.save(args.out)
    print(json.dumps({"entities": len(kb), "out": args.out}))
    return 0


def cmd_build_dicts(args, cfg) -> int:
    kb = load_kb(args.kb)
    corpus = read_dataset(args.train)
    if args.coref:
        corpus = [(d, expand_coreference(d, a)) for d, a in corpus]
    md = build_mention_dict(corpus, kb, strict=args.strict, casefold=cfg["casefold"])
    stop = load_stopwords(args.stopwords) if args.stopwords else DEFAULT_STOPWORDS
    e2m = restrict_to_kb(invert_to_entity_mentions(md, stop), kb)
    save_dicts(args.out, md, e2m)
    print(json.dumps({"mentions": len(md), "entities": len(e2m), "out": args.out}))
    return 0


def cmd_train_retriever(args, cfg) -> int:
    kb = load_kb(args.kb)
    corpus = []
    for doc, anns in read_dataset(args.train):
        for ch in chunk_document(doc, cfg["chunk_len"]):
            gold = {e for e in chunk_gold(ch, anns) if e in kb}
            if gold:
                corpus.append((ch, gold))
    if not corpus:
        raise CliError("EmptyCorpus", f"{args.train}: no chunk has an in-KB gold entity")
    tc = TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], negatives=cfg["negatives"], batch_size=cfg["batch_size"],
                     dim=cfg["dim"], buckets=cfg["buckets"], seed=cfg["seed"])
    enc, tlog = train_retriever(corpus, kb, tc)
    index = build_index(enc, kb)
    index.save(args.index)
    Retriever(enc, index, cfg["chunk_len"]).save(args.model)
    print(json.dumps({"chunks": len(corpus), "initial_loss": round(tlog.initial_loss, 6),
                      "final_loss": round(tlog.final_loss, 6)}))
    return 0


def cmd_train_scorer(args, cfg) -> int:
    vocab = Vocabulary()
    kb = load_kb(args.kb) if args.kb else None
    if kb is not None:
        # titles must be spellable by the scorer for constrained decoding
        for t in kb.titles:
            tokenize(t, vocab)
    data = read_dataset(args.train, vocab)
    seqs = [[BOS_ID] + target_ids(d, a, vocab) for d, a in data]
    vocab.freeze()
    model = train_ngram_scorer(seqs, len(vocab), cfg["order"], cfg["smoothing"], vocab)
    save_ngram(model, args.out)
    print(json.dumps({"vocab_size": len(vocab), "sequences": len(seqs), "out": args.out}))
    return 0


def _load_scorer(path: str):
    scorer = load_ngram(path)
    if scorer.vocab is None:
        raise CliError("FileFormatError", f"{path}: scorer file carries no vocabulary")
    return scorer, scorer.vocab


def _load_retriever(args) -> Retriever:
    if not (args.retriever and args.index):
        raise CliError("MissingArgument", "--retriever and --index are required for this mode")
    return Retriever.load(args.retriever, EntityIndex.load(args.index))


def _make_linker(mode: str, args, cfg, scorer, vocab, kb):
    if mode == "guided":
        if not args.dicts:
            raise CliError("MissingArgument", "--dicts is required for guided mode")
        _, e2m = load_dicts(args.dicts)
        retr = _load_retriever(args)
        return GuidedLinker(retr.retrieve, e2m, scorer, vocab, GuidedConfig(cfg["offset"], cfg["k"]))
    if mode == "vanilla":
        md = load_dicts(args.dicts)[0] if args.dicts else None
        return VanillaLinker(kb, vocab, scorer, md, cfg["beam_size"])
    raise CliError("BadMode", f"unknown mode {mode!r}")


def _link_all(linker, docs, jobs: int):
    if jobs <= 1:
        return [linker.link(d) for d in docs]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(linker.link, docs))


def cmd_link(args, cfg) -> int:
    kb = load_kb(args.kb)
    if args.mode == "icl-prompt":
        return _icl(args, cfg, kb)
    if not args.scorer:
        raise CliError("MissingArgument", "--scorer is required for this mode")
    scorer, vocab = _load_scorer(args.scorer)
    docs = [d for d, _ in read_dataset(args.input, vocab)]
    linker = _make_linker(args.mode, args, cfg, scorer, vocab, kb)
    results = _link_all(linker, docs, cfg["jobs"])
    recs = []
    for doc, res in zip(docs, results):
        rec = dataset_record(doc, res.annotations)
        rec["lm_forwards"] = res.lm_forwards
        rec["sequence"] = res.sequence
        if args.timing:
            rec["wall_time_ms"] = round(res.wall_time * 1000, 3)
        recs.append(rec)
    _dump_jsonl(args.out, recs)
    print(json.dumps({"documents": len(recs), "lm_forwards": sum(r["lm_forwards"] for r in recs), "out": args.out}))
    return 0


def _icl(args, cfg, kb) -> int:
    retr = _load_retriever(args)
    docs = [d for d, _ in read_dataset(args.input)]
    completer = ReplayCompleter.load(args.responses) if args.responses else None
    recs = []
    for doc in docs:
        entities = retr.retrieve(doc, cfg["k"])
        prompt = build_icl_prompt(doc, entities, window=cfg["window"])
        if completer is None:
            recs.append({"doc_id": doc.doc_id, "prompt": prompt, "prompt_sha256": ReplayCompleter.key(prompt),
                         "template": TEMPLATE_VERSION, "generation_params": GENERATION_PARAMS})
            continue
        anns, diag = parse_icl_response(completer(prompt), doc, kb, cfg["window"])
        rec = dataset_record(doc, anns)
        rec["dropped"] = {"malformed": diag.malformed, "unknown_entity": diag.unknown_entity,
                          "unlocated": diag.unlocated, "overlapping": diag.overlapping}
        recs.append(rec)
    _dump_jsonl(args.out, recs)
    print(json.dumps({"documents": len(recs), "out": args.out}))
    return 0


def cmd_bench(args, cfg) -> int:
    kb = load_kb(args.kb)
    scorer, vocab = _load_scorer(args.scorer)
    data = read_dataset(args.input, vocab)
    rows = []
    for mode in args.modes.split(","):
        linker = _make_linker(mode.strip(), args, cfg, scorer, vocab, kb)
        rows.append(benchmark(linker, data, repeats=cfg["repeats"], seed=cfg["seed"], kb=kb))
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text(rows_to_json(rows) + "\n", encoding="utf-8")
    return 0


def _load_predictions(path: str) -> dict[str, list[Annotation]]:
    return {d.doc_id: a for d, a in read_dataset(path)}


def cmd_eval(args, cfg) -> int:
    kb = load_kb(args.kb) if args.kb else None
    pred = _load_predictions(args.pred)
    gold = _load_predictions(args.gold)
    rep = micro_f1_inkb(pred, gold, kb)
    summary = {"precision": rep.precision, "recall": rep.recall, "f1": rep.f1, "tp": rep.tp, "fp": rep.fp, "fn": rep.fn}
    print(f"P={rep.precision:.4f} R={rep.recall:.4f} F1={rep.f1:.4f} (tp={rep.tp} fp={rep.fp} fn={rep.fn})")
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if rep.f1 < cfg["min_f1"]:
        print(json.dumps({"error": "BelowThreshold", "message": f"f1 {rep.f1:.6f} < min_f1 {cfg['min_f1']}"}),
              file=sys.stderr)
        return 1
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genel", description="Retrieval-guided generative entity linking.")
    p.add_argument("--version", action="version", version=f"genel {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [genel] section")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-kb", parents=[common], help="validate entity records and write a KB file")
    s.add_argument("--entities", required=True, help="JSON Lines of {title, description, aliases}")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_kb)

    s = sub.add_parser("build-dicts", parents=[common], help="mention dictionary and entity-to-mention map")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True, help="annotated dataset (JSON Lines)")
    s.add_argument("--stopwords", help="one stop word per line; default is the built-in English list")
    s.add_argument("--coref", action="store_true", help="add string-match co-reference links before counting")
    s.add_argument("--strict", action="store_true", help="fail on gold entities missing from the KB")
    s.add_argument("--casefold", type=_parse_bool)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dicts)

    s = sub.add_parser("train-retriever", parents=[common], help="train the dual encoder and write model + index")
    s.add_argument("--kb", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--model", required=True, help="output encoder weights (.npz)")
    s.add_argument("--index", required=True, help="output entity index (binary)")
    for flag, typ in (("--epochs", int), ("--lr", float), ("--negatives", int), ("--batch-size", int),
                      ("--dim", int), ("--buckets", int), ("--chunk-len", int)):
        s.add_argument(flag, type=typ)
    s.set_defaults(func=cmd_train_retriever)

    s = sub.add_parser("train-scorer", parents=[common], help="fit the n-gram token scorer on target sequences")
    s.add_argument("--train", required=True)
    s.add_argument("--kb", help="add every title's tokens to the vocabulary")
    s.add_argument("--order", type=int)
    s.add_argument("--smoothing", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_scorer)

    decode = argparse.ArgumentParser(add_help=False)
    decode.add_argument("--kb", required=True)
    decode.add_argument("--input", required=True, help="dataset to link (annotations are ignored)")
    decode.add_argument("--scorer")
    decode.add_argument("--dicts")
    decode.add_argument("--retriever", help="encoder weights from train-retriever")
    decode.add_argument("--index")
    decode.add_argument("--k", type=int, help="retrieved entities per chunk (default 100)")
    decode.add_argument("--offset", type=float, help="mention-start log-probability offset (default 0)")
    decode.add_argument("--beam-size", type=int, help="vanilla beam width (default 2)")
    decode.add_argument("--jobs", type=int, help="documents decoded in parallel (default 1)")

    s = sub.add_parser("link", parents=[common, decode], help="link a dataset")
    s.add_argument("--mode", choices=["guided", "vanilla", "icl-prompt"], default="guided")
    s.add_argument("--responses", help="icl-prompt: replay file of recorded completions; parse instead of emitting prompts")
    s.add_argument("--window", type=int)
    s.add_argument("--timing", action="store_true", help="include per-document wall time (output no longer reproducible)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_link)

    s = sub.add_parser("bench", parents=[common, decode], help="forward counts, runtime and F1 over repeats")
    s.add_argument("--modes", default="guided,vanilla")
    s.add_argument("--repeats", type=int)
    s.add_argument("--out", help="write the rows as JSON")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", parents=[common], help="InKB micro-F1 of predictions against gold")
    s.add_argument("--pred", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--kb", help="drop gold links whose entity is not in this KB")
    s.add_argument("--min-f1", type=float)
    s.add_argument("--out", help="write the full report as JSON")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, resolve(args))
    except CliError as e:
        kind, msg = e.kind, str(e)
    except GenELError as e:
        kind, msg = type(e).__name__, str(e)
    except FileNotFoundError as e:
        kind, msg = "FileNotFound", f"{e.filename}: {e.strerror}"
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        kind, msg = type(e).__name__, str(e)
    print(json.dumps({"error": kind, "message": " ".join(msg.split())}), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
