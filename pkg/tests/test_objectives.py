import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from uniadapt import tensor as T
from uniadapt.backbone import BOS, EOS
from uniadapt.objectives import (CSV_FIELDS, MetricsRecord, contrastive_loss, hardest_negatives, itm_loss,
                                 lm_loss, metrics_csv_text, retrieval_metrics, teacher_forcing, vqa_accuracy,
                                 write_metrics_csv)
from uniadapt.tensor import Tensor
from uniadapt.train import AdamW


def sort_oracle(scores):
    """Rank by stable descending sort; ties keep the lower gallery index first."""
    ranks = []
    for q, row in enumerate(scores):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        ranks.append(order.index(q) + 1)
    ranks = np.array(ranks)
    rec = {k: 100.0 * np.mean(ranks <= k) for k in (1, 5, 10)}
    return rec, float(np.median(ranks))


# -- retrieval metrics ------------------------------------------------------

def test_identity_matrix():
    m = retrieval_metrics(np.eye(12))
    assert (m.r1, m.r5, m.r10, m.mdr) == (100.0, 100.0, 100.0, 1.0)


def test_reversed_single_query():
    scores = np.arange(10, dtype=float)[None, ::-1].copy()
    m = retrieval_metrics(scores, truth=[9])
    assert (m.r5, m.r10, m.mdr) == (0.0, 100.0, 10.0)


def test_k_larger_than_gallery():
    with pytest.raises(ValueError):
        retrieval_metrics(np.eye(5))


def test_ties_go_to_lower_index():
    scores = np.ones((3, 12))
    m = retrieval_metrics(scores)
    assert m.r1 == pytest.approx(100 / 3)


@pytest.mark.parametrize("seed", range(100))
def test_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 30))
    scores = rng.normal(size=(n, n))
    if seed % 3 == 0:
        scores = np.round(scores, 1)  # force ties
    rec, mdr = sort_oracle(scores)
    m = retrieval_metrics(scores)
    assert (m.r1, m.r5, m.r10, m.mdr) == (rec[1], rec[5], rec[10], mdr)
    assert m.r1 <= m.r5 <= m.r10
    assert m.rmean == pytest.approx((m.r1 + m.r5 + m.r10) / 3)


@settings(max_examples=50)
@given(hnp.arrays(np.int64, (12, 12), elements=st.integers(-50, 50)))
def test_monotone_transform_invariance(grid):
    scores = grid / 10.0  # coarse grid keeps ties and stays exact under exp
    a = retrieval_metrics(scores)
    b = retrieval_metrics(np.exp(scores) * 3 + 1)
    assert (a.r1, a.r5, a.r10, a.mdr) == (b.r1, b.r5, b.r10, b.mdr)


# -- losses -----------------------------------------------------------------

def test_contrastive_uniform_is_log_b():
    e = Tensor(np.ones((5, 4)))
    assert float(contrastive_loss(e, e).data) == pytest.approx(math.log(5), abs=1e-6)


def test_contrastive_aligned_limit():
    e = Tensor(np.eye(2))
    assert float(contrastive_loss(e, e, temp=1e-3).data) < 1e-6


def test_contrastive_brute_force(rng):
    with T.default_dtype(np.float64):
        v, t = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        got = float(contrastive_loss(Tensor(v), Tensor(t), temp=0.07).data)
    vn = v / np.linalg.norm(v, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = tn @ vn.T / 0.07
    total = 0.0
    for i in range(4):
        total -= s[i, i] - math.log(sum(math.exp(s[i, j]) for j in range(4)))
        total -= s[i, i] - math.log(sum(math.exp(s[j, i]) for j in range(4)))
    assert got == pytest.approx(total / 8, abs=1e-6)


def test_contrastive_needs_batch():
    with pytest.raises(ValueError):
        contrastive_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


@settings(max_examples=30)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-3, 3)), hnp.arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_contrastive_nonnegative(v, t):
    assert float(contrastive_loss(Tensor(v), Tensor(t)).data) >= -1e-9


def test_hardest_negatives_lowest_index_on_ties():
    sim = np.array([[5.0, 1.0, 1.0], [2.0, 9.0, 2.0], [0.0, 3.0, 1.0]])
    np.testing.assert_array_equal(hardest_negatives(sim), [1, 0, 1])


def test_itm_zero_head_is_ln2():
    assert float(itm_loss(Tensor(np.zeros(4)), [1, 0, 1, 0]).data) == pytest.approx(math.log(2), abs=1e-6)
    with pytest.raises(ValueError):
        itm_loss(Tensor(np.zeros(3)), [1, 1, 1])


def test_itm_head_overfits_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 4))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x[:, 0] += np.where(y == 1, 1.0, -1.0)  # margin
    w, b = Tensor(np.zeros((4, 1)), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    opt = AdamW([("w", w), ("b", b)], lr=0.1, weight_decay=0.0)
    for _ in range(600):
        opt.zero_grad()
        loss = itm_loss((Tensor(x) @ w + b).reshape(-1), y)
        T.backward(loss)
        opt.step()
    assert float(loss.data) < 0.01


def test_teacher_forcing_markers():
    prompts, targets = teacher_forcing([[7, 8]])
    assert prompts == [[BOS, 7, 8]] and targets == [[7, 8, EOS]]
    with pytest.raises(ValueError):
        teacher_forcing([[]])


def test_lm_uniform_is_log_vocab():
    assert float(lm_loss(Tensor(np.zeros((1, 2, 8))), [[3]]).data) == pytest.approx(math.log(8), abs=1e-6)


def test_lm_one_hot_correct_is_near_zero():
    logits = np.full((1, 3, 8), -50.0)
    for pos, tok in enumerate([4, 5, EOS]):
        logits[0, pos, tok] = 50.0
    assert float(lm_loss(Tensor(logits), [[4, 5]]).data) < 1e-12


def test_lm_hand_oracle(rng):
    logits = rng.normal(size=(1, 3, 8))

    def ce(row, k):
        return -(row[k] - math.log(np.exp(row).sum()))
    want = (ce(logits[0, 0], 4) + ce(logits[0, 1], 5) + ce(logits[0, 2], EOS)) / 3
    with T.default_dtype(np.float64):
        assert float(lm_loss(Tensor(logits), [[4, 5]]).data) == pytest.approx(want, abs=1e-9)


def test_lm_ignores_padding_positions(rng):
    logits = rng.normal(size=(2, 3, 8))
    with T.default_dtype(np.float64):
        both = float(lm_loss(Tensor(logits), [[4, 5], [6]]).data)
        noisy = logits.copy()
        noisy[1, 2] = 99.0
        assert float(lm_loss(Tensor(noisy), [[4, 5], [6]]).data) == pytest.approx(both, abs=1e-12)


# -- accuracy and csv -------------------------------------------------------

def test_vqa_accuracy():
    assert vqa_accuracy([[1], [2]], [[1], [2]]) == 100.0
    assert vqa_accuracy([[1], [2]], [[3], [4]]) == 0.0
    assert vqa_accuracy([[1], [2], [3], [4]], [[1], [2], [3], [5]]) == 75.0
    with pytest.raises(ValueError):
        vqa_accuracy([[1]], [])


def test_csv_schema_and_append(tmp_path):
    path = tmp_path / "m.csv"
    rec = retrieval_metrics(np.eye(10), split="test", step=3)
    write_metrics_csv(path, [rec])
    write_metrics_csv(path, [MetricsRecord(acc=50.0, split="test", task="vqa")])
    rows = list(csv.DictReader(open(path)))
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 2
    assert rows[0]["r1"] == "100" and rows[0]["acc"] == "" and rows[1]["acc"] == "50"
    text = metrics_csv_text([rec])
    assert next(csv.reader(io.StringIO(text))) == list(CSV_FIELDS)
