import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from calgan.corpus import END, END_ID, PAD_ID, START, START_ID
from calgan.metrics import (DiversityReport, EncoderMismatch, bleu4, caption_tokens, category_diversity_report,
                            check_same_encoder, distinct_n, diversity_sigma, kmeans_cluster, random_scores,
                            retrieval_recall, sample_covariance, word_frequency_table, write_diversity_csv,
                            write_wordfreq_csv)
from calgan.numeric import SeededRng
from conftest import make_models
from policies import TablePolicy


# ------------------------------------------------------------- diversity

def test_hand_example():
    r = diversity_sigma([[1.0, 0.0], [0.0, 1.0]])
    assert r.sigma_hat == pytest.approx(1.0, abs=1e-12)
    assert (r.m, r.n) == (2, 2)


def test_identical_rows_give_zero():
    r = diversity_sigma(np.tile([0.3, -1.2, 4.0], (7, 1)))
    assert r.sigma_hat == 0.0
    np.testing.assert_array_equal(r.spectrum, 0.0)


@settings(max_examples=200, deadline=None)
@given(a=st.integers(2, 50).flatmap(lambda m: st.integers(1, 32).flatmap(
    lambda n: arrays(np.float64, (m, n), elements=st.floats(-10, 10)))))
def test_sigma_is_trace_of_sample_covariance(a):
    r = diversity_sigma(a)
    np.testing.assert_allclose(r.sigma_hat, np.trace(np.cov(a, rowvar=False, ddof=1).reshape(a.shape[1], -1)),
                               rtol=1e-9, atol=1e-9)


def test_sigma_row_permutation_and_mean_row():
    a = np.random.default_rng(2).normal(size=(15, 4))
    base = diversity_sigma(a).sigma_hat
    np.testing.assert_allclose(diversity_sigma(a[::-1]).sigma_hat, base, rtol=1e-12)
    # the mean row adds nothing to the scatter, only to the 1/(m-1) factor
    grown = np.vstack([a, a.mean(axis=0)])
    np.testing.assert_allclose(diversity_sigma(grown).sigma_hat, base * 14 / 15, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=st.integers(2, 20).flatmap(lambda m: arrays(np.float64, (m, 3), elements=st.floats(-5, 5))),
       j=st.integers(0, 100))
def test_duplicate_row_scatter_update(a, j):
    # scatter after duplicating row j grows by m/(m+1) * |x_j - mean|^2
    m = len(a)
    j %= m
    scatter = diversity_sigma(a).sigma_hat * (m - 1)
    dup = diversity_sigma(np.vstack([a, a[j]])).sigma_hat * m
    gain = m / (m + 1) * np.sum((a[j] - a.mean(axis=0)) ** 2)
    assert dup >= scatter - 1e-9
    np.testing.assert_allclose(dup, scatter + gain, rtol=1e-9, atol=1e-9)


def test_sample_covariance_matches_numpy():
    a = np.random.default_rng(0).normal(size=(12, 5))
    np.testing.assert_allclose(sample_covariance(a), np.cov(a, rowvar=False), atol=1e-14)


def test_sigma_rejects_bad_input():
    with pytest.raises(ValueError):
        diversity_sigma(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        diversity_sigma([[0.0, np.nan], [1.0, 2.0]])


def test_sigma_is_translation_invariant_and_scales_quadratically():
    a = np.random.default_rng(1).normal(size=(20, 6))
    base = diversity_sigma(a).sigma_hat
    np.testing.assert_allclose(diversity_sigma(a + 5.0).sigma_hat, base, rtol=1e-10)
    np.testing.assert_allclose(diversity_sigma(3.0 * a).sigma_hat, 9.0 * base, rtol=1e-10)


def test_encoder_mismatch():
    a = DiversityReport(1.0, np.ones(2), 3, 2, "aaa")
    b = DiversityReport(2.0, np.ones(2), 3, 2, "bbb")
    check_same_encoder([a, DiversityReport(3.0, np.ones(2), 3, 2, "aaa")])
    with pytest.raises(EncoderMismatch):
        check_same_encoder([a, b])


# --------------------------------------------------------------- n-grams

def test_caption_tokens_forms():
    assert caption_tokens([START_ID, 5, 6, END_ID, PAD_ID]) == [5, 6]
    assert caption_tokens([START, "a", "cat", END]) == ["a", "cat"]
    assert caption_tokens("a cat") == ["a", "cat"]


def test_distinct_n():
    caps = ["a cat", "a dog", "a cat"]
    assert distinct_n(caps, 1) == pytest.approx(3 / 6)
    assert distinct_n(caps, 2) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        distinct_n(["a"], 2)
    with pytest.raises(ValueError):
        distinct_n(caps, 0)


def test_bleu_identity_and_disjoint():
    ref = "a small red cat sitting in the park"
    assert bleu4(ref, [ref]) == pytest.approx(1.0)
    assert bleu4("zebra zebra zebra zebra", [ref]) == 0.0
    assert bleu4("", [ref]) == 0.0
    with pytest.raises(ValueError):
        bleu4(ref, [])


def test_bleu_hand_computed():
    # a 4-token prefix of a 6-token reference: every n-gram hits, only
    # the brevity penalty remains
    cand = "a cat in the"
    ref = "a cat in the big park"
    p = [4 / 4, 3 / 3, 2 / 2, 1 / 1]
    bp = math.exp(1 - 6 / 4)
    assert bleu4(cand, [ref]) == pytest.approx(bp * math.exp(sum(math.log(x) for x in p) / 4))
    cand = "a cat by the"
    p = [3 / 4, 1 / 3, 1 / 3, 1 / 2]  # no trigram or 4-gram hits: add-one smoothed
    assert bleu4(cand, [ref]) == pytest.approx(bp * math.exp(sum(math.log(x) for x in p) / 4))


def test_bleu_is_not_symmetric():
    short, long = "a cat", "a cat sitting in the park"
    assert bleu4(short, [long]) < bleu4(long, [short])


def test_bleu_uses_closest_reference_length():
    refs = ["a cat", "a cat sitting in the park"]
    long = bleu4("a cat sitting in the park", refs)
    assert long == pytest.approx(1.0)


# ------------------------------------------------------------- retrieval

def test_recall_perfect_and_worst():
    ids = [f"img{i}" for i in range(5)]
    s = np.eye(5)
    assert retrieval_recall(ids, s, ks=(1, 5)) == {1: 1.0, 5: 1.0}
    assert retrieval_recall(ids, -np.eye(5), ks=(1, 4, 5)) == {1: 0.0, 4: 0.0, 5: 1.0}


def test_recall_ties_rank_smaller_id_first():
    ids = ["b", "a", "c"]
    s = np.ones((3, 3))
    # caption 0 ("b") ties with "a", which ranks ahead of it
    r = retrieval_recall(ids, s, ks=(1, 2))
    assert r[1] == pytest.approx(1 / 3)  # only "a" is first among its ties
    assert r[2] == pytest.approx(2 / 3)


def test_recall_is_monotone_in_k():
    rng = np.random.default_rng(0)
    r = retrieval_recall([str(i) for i in range(30)], rng.normal(size=(30, 30)), ks=(1, 3, 5, 10, 30))
    vals = [r[k] for k in (1, 3, 5, 10, 30)]
    assert vals == sorted(vals) and vals[-1] == 1.0


def test_random_scorer_near_chance():
    rs = [retrieval_recall([str(i) for i in range(100)], random_scores(100, 100, SeededRng(s)), ks=(1,))[1]
          for s in range(20)]
    # per-draw standard deviation of a 100-trial proportion at p = 0.01
    assert abs(np.mean(rs) - 0.01) < 3 * math.sqrt(0.01 * 0.99 / 100) / math.sqrt(20)


# ------------------------------------------------------------------ k-means

def test_kmeans_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    centres = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
    x = np.concatenate([c + rng.normal(0, 0.3, (20, 2)) for c in centres])
    labels, cent = kmeans_cluster(x, 3, seed=1)
    for g in range(3):
        assert len(set(labels[g * 20:(g + 1) * 20])) == 1
    assert len(set(labels)) == 3


def test_kmeans_is_seeded():
    x = np.random.default_rng(3).normal(size=(40, 4))
    a, _ = kmeans_cluster(x, 4, seed=2)
    b, _ = kmeans_cluster(x, 4, seed=2)
    np.testing.assert_array_equal(a, b)


def test_kmeans_degenerate_inputs():
    x = np.zeros((6, 2))
    labels, cent = kmeans_cluster(x, 3, seed=0)
    assert labels.shape == (6,)
    with pytest.raises(ValueError):
        kmeans_cluster(x, 7)


def test_category_report_rows(small_world, tmp_path):
    _, disc = make_models(small_world)
    f = np.stack([r.features for r in small_world.train])
    from calgan.corpus import pad_captions
    caps = {"human": pad_captions([r.captions[0] for r in small_world.train], small_world.t_max)}
    rows = category_diversity_report(f, caps, disc, k=3, seed=0)
    assert rows[-1]["cluster"] == "All*" and rows[-1]["m"] == len(f)
    assert len({r["encoder_hash"] for r in rows}) == 1
    path = tmp_path / "d.csv"
    write_diversity_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "cluster,model,sigma_hat,m,n,encoder_hash"
    assert len(lines) == len(rows) + 1


def test_category_report_skips_tiny_clusters(small_world):
    _, disc = make_models(small_world)
    f = np.stack([r.features for r in small_world.train[:4]])
    from calgan.corpus import pad_captions
    caps = {"m": pad_captions([r.captions[0] for r in small_world.train[:4]], small_world.t_max)}
    with pytest.warns(RuntimeWarning, match="fewer than 2"):
        rows = category_diversity_report(f, caps, disc, k=2, labels=np.array([0, 1, 1, 1]))
    assert [r["cluster"] for r in rows] == ["1", "All*"]


# ------------------------------------------------------------ word frequency

def test_word_frequency_basic():
    caps = [[START, "a", "cat", END], [START, "a", "dog", END], [START, "the", END]]
    table = word_frequency_table(caps)
    assert table[0] == {START: 1.0}
    assert table[1] == {"a": pytest.approx(2 / 3), "the": pytest.approx(1 / 3)}
    for row in table.values():
        assert sum(row.values()) == pytest.approx(1.0, abs=1e-9)


def test_word_frequency_counting_example():
    table = word_frequency_table(["a cat", "a dog"], threshold=0.0)
    assert table[1] == {"a": 1.0}
    assert table[2] == {"cat": 0.5, "dog": 0.5}


def test_word_frequency_pools_rare_tokens():
    caps = [[START, "a", END]] * 999 + [[START, "b", END]]
    table = word_frequency_table(caps, threshold=0.005)
    assert table[1] == {"a": pytest.approx(0.999), "*": pytest.approx(0.001)}


def test_word_frequency_position_limit_and_ids():
    caps = np.array([[START_ID, 5, 6, END_ID, PAD_ID], [START_ID, 5, END_ID, PAD_ID, PAD_ID]])
    table = word_frequency_table(caps, position_limit=1)
    assert set(table) == {0, 1}
    assert table[1] == {5: 1.0}
    with pytest.raises(ValueError):
        word_frequency_table([])


def test_word_frequency_matches_one_step_policy(tmp_path):
    V = 8
    p = np.array([0.5, 0.3, 0.15, 0.05])
    table = np.full((V, V), -300.0)
    table[START_ID, 4:8] = np.log(p)
    table[4:8, END_ID] = 0.0
    g = TablePolicy(table, t_max=3)
    n = 4000
    caps = g.sample(np.zeros((n, 1)), SeededRng(4))
    freq = word_frequency_table(caps, threshold=0.0)
    assert freq[0] == {START_ID: 1.0}
    for tok, pt in zip(range(4, 8), p):
        assert abs(freq[1][tok] - pt) <= 3 * math.sqrt(pt * (1 - pt) / n)
    assert freq[2] == {END_ID: 1.0}
    path = tmp_path / "w.csv"
    write_wordfreq_csv(path, freq)
    assert path.read_text().splitlines()[0] == "position,token,frequency"
