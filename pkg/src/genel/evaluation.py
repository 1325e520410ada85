"""InKB micro-F1 and the forward-count / runtime benchmark."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from genel.kb import KnowledgeBase
from genel.markup import Annotation, Document


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_doc: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def micro_f1_inkb(pred: Mapping[str, Iterable[Annotation]], gold: Mapping[str, Iterable[Annotation]],
                  kb: KnowledgeBase | None = None) -> EvalReport:
    """Exact (start, end, entity) matching, micro-averaged over documents.

    Gold mentions whose entity is not in ``kb`` are dropped before scoring.
    Precision with no predictions is 0.
    """
    tp = fp = fn = 0
    per_doc = {}
    for doc_id in sorted(set(pred) | set(gold)):
        g = {(a.m_s, a.m_e, a.ent) for a in gold.get(doc_id, ()) if kb is None or a.ent in kb}
        p = {(a.m_s, a.m_e, a.ent) for a in pred.get(doc_id, ())}
        d_tp = len(p & g)
        d = {"tp": d_tp, "fp": len(p) - d_tp, "fn": len(g) - d_tp}
        per_doc[doc_id] = d
        tp += d["tp"]
        fp += d["fp"]
        fn += d["fn"]
    return EvalReport(*_prf(tp, fp, fn), tp, fp, fn, per_doc)


@dataclass
class BenchRow:
    mode: str
    repeats: int
    lm_forwards: float  # total over the dataset, mean across repeats
    lm_forwards_std: float
    runtime: float  # seconds, total over the dataset
    runtime_std: float
    f1: float
    f1_std: float


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(xs), statistics.pstdev(xs) if len(xs) > 1 else 0.0


def benchmark(linker, dataset: Sequence[tuple[Document, Sequence[Annotation]]], repeats: int = 10, seed: int = 0,
              kb: KnowledgeBase | None = None, make_linker: Callable[[int], object] | None = None) -> BenchRow:
    """Run ``linker.link`` over ``dataset`` ``repeats`` times.

    ``make_linker(seed)`` rebuilds the linker per repeat when the run
    depends on a seed (repeat r uses ``seed + r``); otherwise the same
    linker is reused.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    forwards, runtimes, f1s = [], [], []
    gold = {doc.doc_id: anns for doc, anns in dataset}
    for r in range(repeats):
        lk = make_linker(seed + r) if make_linker is not None else linker
        pred = {}
        calls = 0
        t0 = time.perf_counter()
        for doc, _ in dataset:
            res = lk.link(doc)
            pred[doc.doc_id] = res.annotations
            calls += res.lm_forwards
        runtimes.append(time.perf_counter() - t0)
        forwards.append(calls)
        f1s.append(micro_f1_inkb(pred, gold, kb).f1)
    mode = getattr(linker if linker is not None else lk, "mode", "linker")
    return BenchRow(mode, repeats, *_mean_std(forwards), *_mean_std(runtimes), *_mean_std(f1s))


def format_table(rows: Iterable[BenchRow]) -> str:
    lines = [f"{'mode':<10} {'# forwards':>12} {'runtime (s)':>18} {'F1':>14}"]
    for r in rows:
        lines.append(
            f"{r.mode:<10} {r.lm_forwards:>12.1f} {r.runtime:>10.3f} ± {r.runtime_std:<5.3f} "
            f"{r.f1 * 100:>7.2f} ± {r.f1_std * 100:.2f}"
        )
    return "\n".join(lines)


def rows_to_json(rows: Iterable[BenchRow]) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2)
