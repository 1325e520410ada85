import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genel.errors import EmptyTargetError, FileFormatError
from genel.markup import BOS_ID, Vocabulary
from genel.scorer import (
    NGramScorer,
    OracleScorer,
    RandomScorer,
    TokenScorer,
    TrainingExample,
    clm_loss,
    load_ngram,
    oracle_scorer,
    save_ngram,
    train_ngram_scorer,
    uniform_scorer,
)


class TableScorer(TokenScorer):
    """Arbitrary fixed distribution per prefix length; used to perturb positions."""

    def __init__(self, rows):
        super().__init__(rows.shape[1])
        self.rows = rows

    def _logprobs(self, prefix):
        return self.rows[len(prefix) - 1]


def _random_rows(rng, n, V):
    logits = rng.normal(size=(n, V))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _reference_loss(rows, y, n):
    # position by position cross-entropy over the target, prefix length i predicts y[i]
    return -sum(rows[i - 1][y[i]] for i in range(n, len(y)))


@pytest.mark.parametrize("V", [1, 4, 37])
def test_uniform_values(V):
    lp = uniform_scorer(V).next_logprobs([BOS_ID])
    assert np.allclose(lp, -math.log(V))
    assert abs(np.exp(lp).sum() - 1) < 1e-6


def test_uniform_loss_is_T_ln_V():
    V = 11
    y = (BOS_ID, 7, 8, 9, 10, 6, 7)
    for n in range(1, len(y)):
        T = len(y) - n
        assert abs(clm_loss(uniform_scorer(V), TrainingExample(y, n)) - T * math.log(V)) < 1e-9


def test_certain_scorer_has_zero_loss():
    y = (BOS_ID, 6, 7, 8)
    rows = np.full((len(y), 9), -np.inf)
    for i in range(1, len(y)):
        rows[i - 1][y[i]] = 0.0
    assert clm_loss(TableScorer(rows), TrainingExample(y, 1)) == 0.0


def test_prompt_positions_do_not_count():
    rng = np.random.default_rng(0)
    y = (BOS_ID, 6, 7, 8, 9, 10, 6)
    n = 4
    rows = _random_rows(rng, len(y), 12)
    base = clm_loss(TableScorer(rows), TrainingExample(y, n))
    assert abs(base - _reference_loss(rows, y, n)) < 1e-12
    for _ in range(20):
        pert = rows.copy()
        pert[:n - 1] = _random_rows(rng, n - 1, 12)  # rows that predict prompt tokens
        assert clm_loss(TableScorer(pert), TrainingExample(y, n)) == base


def test_empty_target_rejected():
    with pytest.raises(EmptyTargetError):
        clm_loss(uniform_scorer(5), TrainingExample((BOS_ID, 6), 2))
    with pytest.raises(ValueError):
        TrainingExample((BOS_ID,), 0)


def test_forward_count_exact():
    s = uniform_scorer(5)
    for k in range(7):
        s.next_logprobs([BOS_ID] * (k + 1))
    assert s.forward_count == 7


def test_forward_count_is_atomic_under_threads():
    s = RandomScorer(16, seed=1)

    def work():
        for _ in range(500):
            s.next_logprobs([BOS_ID, 6])

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert s.forward_count == 2000


def test_oracle_scorer_on_and_off_gold():
    gold = [6, 7, 8]
    s = oracle_scorer(gold, 10)
    lp = s.next_logprobs([BOS_ID, 6])
    assert lp.argmax() == 7
    assert abs(math.exp(lp[7]) - (1 - 1e-6)) < 1e-15
    assert abs(np.exp(lp).sum() - 1) < 1e-9
    off = s.next_logprobs([BOS_ID, 9])
    assert np.allclose(off, -math.log(10))


@settings(max_examples=50)
@given(st.integers(6, 50), st.integers(0, 10 ** 6))
def test_every_scorer_normalizes(V, seed):
    rng = np.random.default_rng(seed)
    prefix = [BOS_ID] + list(rng.integers(0, V, size=3))
    seqs = [[BOS_ID] + list(rng.integers(0, V, size=6)) for _ in range(3)]
    scorers = [
        uniform_scorer(V),
        OracleScorer([BOS_ID] + list(rng.integers(0, V, size=4)), V),
        RandomScorer(V, seed=seed),
        train_ngram_scorer(seqs, V, order=2),
    ]
    for s in scorers:
        assert abs(np.exp(s.next_logprobs(prefix)).sum() - 1) < 1e-6


def test_unigram_hand_computed():
    # 10 target tokens over V = 10: counts 6->4, 7->3, 8->2, 9->1
    seq = [BOS_ID, 6, 6, 7, 6, 8, 7, 9, 6, 7, 8]
    m = train_ngram_scorer([seq], 10, order=1, smoothing=0.5)
    lp = m.next_logprobs([BOS_ID, 6, 7])
    denom = 10 + 0.5 * 10
    for tok, c in {6: 4, 7: 3, 8: 2, 9: 1, 0: 0, BOS_ID: 0}.items():
        assert abs(lp[tok] - math.log((c + 0.5) / denom)) < 1e-12


def test_greedy_regeneration_of_memorised_sequence():
    seq = [BOS_ID, 6, 7, 8, 9, 10]
    m = train_ngram_scorer([seq] * 5, 11, order=3)
    out = [BOS_ID]
    for _ in range(5):
        out.append(int(np.argmax(m.next_logprobs(out))))
    assert out == seq


def test_trained_beats_uniform_on_training_corpus():
    rng = np.random.default_rng(3)
    V = 20
    seqs = [[BOS_ID] + list(rng.integers(6, 12, size=15)) for _ in range(30)]
    m = train_ngram_scorer(seqs, V, order=2)
    u = uniform_scorer(V)
    trained = sum(clm_loss(m, TrainingExample(tuple(s), 1)) for s in seqs)
    uniform = sum(clm_loss(u, TrainingExample(tuple(s), 1)) for s in seqs)
    assert trained < uniform


def test_training_needs_data():
    with pytest.raises(ValueError):
        train_ngram_scorer([], 10)


def test_ngram_file_round_trip(tmp_path):
    v = Vocabulary([" a", " b", "c(d)"], frozen=True)
    seqs = [[BOS_ID, 6, 7, 8, 6], [BOS_ID, 7, 7, 0, 1]]
    m = train_ngram_scorer(seqs, len(v), order=3, smoothing=0.25, vocab=v)
    p = tmp_path / "s.bin"
    save_ngram(m, p)
    back = load_ngram(p)
    assert (back.vocab_size, back.order, back.smoothing) == (9, 3, 0.25)
    assert back.vocab.ordinary_surfaces() == v.ordinary_surfaces()
    for prefix in ([BOS_ID], [BOS_ID, 6], [BOS_ID, 6, 7], [BOS_ID, 8, 8]):
        assert np.array_equal(back.next_logprobs(prefix), m.next_logprobs(prefix))
    raw = p.read_bytes()
    magic, version, V, order, smoothing = struct.unpack_from("<8sHIHd", raw, 0)
    assert (magic, version, V, order, smoothing) == (b"GELNGRAM", 1, 9, 3, 0.25)


def test_ngram_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a scorer")
    with pytest.raises(FileFormatError):
        load_ngram(p)


def test_ngram_context_padding():
    m = NGramScorer(10, order=3)
    assert m.context([BOS_ID]) == (-1, BOS_ID)
    assert m.context([BOS_ID, 6, 7]) == (6, 7)
