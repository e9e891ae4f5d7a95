"""Bias@K, Recall@K, and occupation bias against independent counting oracles."""

import math

import numpy as np
import pytest

from searchbias.core import DataError, EmbeddingTable, GenderLabel
from searchbias.metrics import (
    UndefinedBiasError,
    bias_at_k,
    delta_k,
    occupation_bias,
    occupation_bias_report,
    recall_at_k,
)
from searchbias.retrieval import RetrievalResult

M, F, N = GenderLabel.MALE, GenderLabel.FEMALE, GenderLabel.NEUTRAL


def result(text_id, image_ids):
    return RetrievalResult(text_id=text_id, ranked=[(iid, 0.0) for iid in image_ids])


def from_genders(text_id, genders):
    """Build a result plus labels straight from a gender sequence."""
    ids = [f"{text_id}_img{j}" for j in range(len(genders))]
    return result(text_id, ids), dict(zip(ids, genders))


def oracle_delta(genders, k):
    males = sum(1 for g in genders[:k] if g is M)
    females = sum(1 for g in genders[:k] if g is F)
    if males + females == 0:
        return 0.0
    return (males - females) / (males + females)


def oracle_bias(gender_lists, k):
    return math.fsum(oracle_delta(gs, k) for gs in gender_lists) / len(gender_lists)


def oracle_recall(rank_lists, truths, k):
    hits = sum(1 for ranked, truth in zip(rank_lists, truths) if truth in ranked[:k])
    return hits / len(rank_lists)


def test_delta_examples():
    res, labels = from_genders("t", [M, M, F, N])
    assert delta_k(res, labels) == pytest.approx(1 / 3)
    res, labels = from_genders("t", [N, N, N])
    assert delta_k(res, labels) == 0.0
    res, labels = from_genders("t", [F, F, F])
    assert delta_k(res, labels) == -1.0
    res, labels = from_genders("t", [M, M])
    assert delta_k(res, labels) == 1.0


def test_delta_truncates_to_k():
    res, labels = from_genders("t", [M, M, F, F])
    assert delta_k(res, labels, k=2) == 1.0
    assert delta_k(res, labels, k=4) == 0.0


def test_delta_missing_label():
    res = result("t", ["unknown"])
    with pytest.raises(DataError, match="unknown"):
        delta_k(res, {})


def test_bias_examples():
    r1, l1 = from_genders("t1", [M, M])
    r2, l2 = from_genders("t2", [F, F])
    rep = bias_at_k([r1, r2], {**l1, **l2}, k=2)
    assert rep.bias_at_k == 0.0
    assert rep.per_query == {"t1": 1.0, "t2": -1.0}
    assert rep.n_queries == 2

    res, labels = from_genders("t", [M, F, M, M, N, N, N, N, N, N])
    rep = bias_at_k([res], labels, k=10)
    assert rep.bias_at_k == 0.5


def test_bias_requires_results():
    with pytest.raises(DataError):
        bias_at_k([], {}, k=5)


def test_male_share_identity():
    res, labels = from_genders("t", [M, M, F])
    rep = bias_at_k([res], labels, k=3)
    assert rep.male_share == (1.0 + rep.bias_at_k) / 2.0
    # The headline interpretation: bias 0.3960 means ~70% male share.
    assert (1.0 + 0.3960) / 2.0 == 0.698


def test_recall_examples():
    results = [result("t1", ["a", "b"]), result("t2", ["c", "d"])]
    assert recall_at_k(results, {"t1": "a", "t2": "c"}, k=1).recall_at_k == 1.0
    assert recall_at_k(results, {"t1": "z", "t2": "z"}, k=2).recall_at_k == 0.0
    results = [result(f"t{j}", ["a", "b", "c", "d", "e"]) for j in range(4)]
    truth = {"t0": "a", "t1": "e", "t2": "z", "t3": "y"}
    assert recall_at_k(results, truth, k=5).recall_at_k == 0.5
    with pytest.raises(DataError, match="t9"):
        recall_at_k([result("t9", ["a"])], {}, k=1)


def test_oracle_equivalence_random_configs():
    rng = np.random.default_rng(42)
    genders = [M, F, N]
    for trial in range(200):
        n_q = int(rng.integers(1, 12))
        depth = int(rng.integers(1, 15))
        k = int(rng.integers(1, depth + 1))
        gender_lists, results, labels, rank_lists, truths = [], [], {}, [], []
        for q in range(n_q):
            gs = [genders[int(g)] for g in rng.integers(0, 3, depth)]
            res, labs = from_genders(f"q{q}", gs)
            gender_lists.append(gs)
            results.append(res)
            labels.update(labs)
            ids = res.image_ids()
            rank_lists.append(ids)
            truths.append(ids[int(rng.integers(0, depth))] if rng.random() < 0.5 else "miss")
        truth = {f"q{q}": truths[q] for q in range(n_q)}
        assert abs(bias_at_k(results, labels, k).bias_at_k - oracle_bias(gender_lists, k)) <= 1e-12
        assert abs(
            recall_at_k(results, truth, k).recall_at_k - oracle_recall(rank_lists, truths, k)
        ) <= 1e-12


def test_antisymmetry_under_label_swap():
    rng = np.random.default_rng(9)
    gs = [[M, F, N][int(g)] for g in rng.integers(0, 3, 30)]
    res, labels = from_genders("t", gs)
    swapped = {i: {M: F, F: M, N: N}[g] for i, g in labels.items()}
    for k in (1, 5, 17, 30):
        assert delta_k(res, labels, k) == -delta_k(res, swapped, k)


def test_query_order_invariance_and_truncation_consistency():
    rng = np.random.default_rng(10)
    results, labels = [], {}
    for q in range(8):
        gs = [[M, F, N][int(g)] for g in rng.integers(0, 3, 12)]
        res, labs = from_genders(f"q{q}", gs)
        results.append(res)
        labels.update(labs)
    rep = bias_at_k(results, labels, k=7)
    rev = bias_at_k(results[::-1], labels, k=7)
    assert rep.bias_at_k == rev.bias_at_k
    truncated = [RetrievalResult(r.text_id, r.ranked[:7]) for r in results]
    assert bias_at_k(truncated, labels, k=7).bias_at_k == rep.bias_at_k


def occupation_oracle(term, images, labels):
    males, females = [], []
    for iid, vec in images.records():
        t = [float(x) for x in term]
        v = [float(x) for x in vec]
        s = math.fsum(a * b for a, b in zip(t, v)) / (
            math.sqrt(math.fsum(x * x for x in t)) * math.sqrt(math.fsum(x * x for x in v))
        )
        if labels[iid] is M:
            males.append(s)
        elif labels[iid] is F:
            females.append(s)
    return math.fsum(males) / len(males) - math.fsum(females) / len(females)


def test_occupation_bias_examples():
    images = EmbeddingTable(
        ["m1", "f1", "n1"], [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    )
    labels = {"m1": M, "f1": F, "n1": N}
    assert occupation_bias([1.0, 0.0], images, labels) == 1.0
    # Symmetric about the term vector: zero bias.
    images2 = EmbeddingTable(["m1", "f1"], [[1.0, 1.0], [1.0, -1.0]])
    assert occupation_bias([1.0, 0.0], images2, {"m1": M, "f1": F}) == pytest.approx(0.0, abs=1e-15)


def test_occupation_bias_matches_oracle():
    rng = np.random.default_rng(11)
    images = EmbeddingTable([f"i{j}" for j in range(40)], rng.standard_normal((40, 6)))
    labels = {f"i{j}": [M, F, N][int(g)] for j, g in enumerate(rng.integers(0, 3, 40))}
    term = rng.standard_normal(6)
    got = occupation_bias(term, images, labels)
    assert got == pytest.approx(occupation_oracle(term, images, labels), abs=1e-12)


def test_occupation_bias_undefined_class():
    images = EmbeddingTable(["m1"], [[1.0, 0.0]])
    with pytest.raises(UndefinedBiasError):
        occupation_bias([1.0, 0.0], images, {"m1": M})


def test_occupation_report_skips_and_warns():
    images = EmbeddingTable(["m1", "f1"], [[1.0, 0.1], [0.3, 1.0]])
    labels = {"m1": M, "f1": F}
    terms = EmbeddingTable(["doctor", "nurse"], [[1.0, 0.0], [0.0, 1.0]])
    rep = occupation_bias_report(terms, images, labels)
    assert set(rep.per_occupation) == {"doctor", "nurse"}
    assert rep.mean_abs_bias == pytest.approx(
        (abs(rep.per_occupation["doctor"]) + abs(rep.per_occupation["nurse"])) / 2
    )
    assert rep.skipped == []

    warnings = []
    only_male = {"m1": M, "f1": M}
    with pytest.raises(DataError):
        occupation_bias_report(terms, images, only_male, warn=warnings.append)
    assert len(warnings) == 2
