import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refdx.corpus import SyntheticSpec, generate_synthetic
from refdx.errors import DomainError, ShapeError
from refdx.evalharness import (
    HIST_BINS,
    METRIC_NAMES,
    compute_metrics,
    few_shot,
    format_table,
    make_context_task,
    retrieval_consistency,
    run_ablation,
    similarity_distribution,
    split_corpus,
    task_metrics,
)
from refdx.evidence import AblationMask, HeadConfig
from refdx.labels import Task

from conftest import make_case


def brute_force(preds, truths, n):
    """Per-class counts by explicit loops; absent classes score 0."""
    terms = []
    for c in range(n):
        tp = sum(1 for p, t in zip(preds, truths) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, truths) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, truths) if p != c and t == c)
        tn = sum(1 for p, t in zip(preds, truths) if p != c and t != c)
        if c not in preds and c not in truths:
            terms.append((0.0, 0.0, 0.0, 0.0))
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        terms.append((prec, rec, f1, spec))
    acc = sum(p == t for p, t in zip(preds, truths)) / len(preds)
    return (acc, *np.mean(terms, axis=0).tolist())


class TestComputeMetrics:
    def test_hand_oracle(self):
        m = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
        assert m.accuracy == 0.75
        assert m.macro_precision == pytest.approx(0.8333, abs=1e-4)
        assert m.macro_recall == pytest.approx(0.75)
        assert m.macro_f1 == pytest.approx(0.7333, abs=1e-4)
        assert m.macro_specificity == pytest.approx(0.75)

    def test_perfect(self):
        m = compute_metrics([0, 1, 2, 3], [0, 1, 2, 3], 4)
        assert m.as_array().tolist() == [1.0] * 5

    def test_f1_is_mean_of_f1(self):
        m = compute_metrics([0, 0, 0, 1], [0, 1, 1, 1], 2)
        f1s = [2 * 1 / 3 / (1 / 3 + 1) , 2 * 1 / 3 / (1 + 1 / 3)]
        assert m.macro_f1 == pytest.approx(np.mean(f1s))
        assert m.macro_f1 != pytest.approx(2 * m.macro_precision * m.macro_recall
                                           / (m.macro_precision + m.macro_recall))

    def test_absent_class_contributes_zero(self):
        m = compute_metrics([0, 1], [0, 1], 4)
        assert m.macro_f1 == 0.5 and m.accuracy == 1.0
        assert compute_metrics([0, 1], [0, 1], 4, labels=[0, 1]).macro_f1 == 1.0

    def test_binary_positive_class(self):
        # truths: 1 1 1 0 0; preds: 1 0 1 1 0 -> TP 2 FN 1 FP 1 TN 1
        m = task_metrics([1, 0, 1, 1, 0], [1, 1, 1, 0, 0], Task.BINARY)
        assert m.macro_precision == pytest.approx(2 / 3)
        assert m.macro_recall == pytest.approx(2 / 3)
        assert m.macro_f1 == pytest.approx(2 / 3)
        assert m.macro_specificity == pytest.approx(0.5)

    def test_errors(self):
        with pytest.raises(ShapeError):
            compute_metrics([0, 1], [0], 2)
        with pytest.raises(DomainError):
            compute_metrics([], [], 2)
        with pytest.raises(DomainError):
            compute_metrics([0, 2], [0, 1], 2)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 5).flatmap(lambda n: st.tuples(
        st.just(n), st.integers(1, 50).flatmap(lambda L: st.tuples(
            st.lists(st.integers(0, n - 1), min_size=L, max_size=L),
            st.lists(st.integers(0, n - 1), min_size=L, max_size=L))))))
    def test_brute_force_property(self, case):
        n, (preds, truths) = case
        m = compute_metrics(preds, truths, n)
        assert m.as_array().tolist() == pytest.approx(brute_force(preds, truths, n), abs=1e-12)
        assert all(0 <= v <= 1 for v in m.as_array())


def _synth(sep, n, seed, prefix, dim=16, classes=4):
    return generate_synthetic(SyntheticSpec(classes, n, dim, sep, 1.0, seed=seed, id_prefix=prefix))


class TestSplit:
    def test_stratified_disjoint(self):
        c = _synth(6.0, 20, 0, "x")
        parts = split_corpus(c, (0.6, 0.2, 0.2), seed=1)
        ids = [set(x.id for x in p) for p in parts]
        assert sum(map(len, ids)) == 80 and not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert np.bincount(parts[2].labels(Task.ABNORMALITY)).tolist() == [4, 4, 4, 4]


class TestConsistency:
    def test_tight_clusters(self):
        ref, q = _synth(50.0, 20, 1, "r"), _synth(50.0, 10, 2, "q")
        curve = retrieval_consistency(ref, q, 5)
        assert curve.f1("abnormality", 1) == 1.0 and curve.f1("type", 1) == 1.0
        assert len(curve.curves["abnormality"]) == 5

    def test_single_class(self):
        cases = [make_case(f"a{i}", np.random.default_rng(i).normal(size=4)) for i in range(8)]
        from refdx.corpus import Corpus
        c = Corpus(cases, 4)
        curve = retrieval_consistency(c, c, 4)
        for bs in curve.curves.values():
            assert all(b.macro_f1 == 1.0 and b.macro_precision == 1.0 for b in bs)

    def test_overlap_is_worse(self):
        near = retrieval_consistency(_synth(1.0, 30, 3, "r"), _synth(1.0, 20, 4, "q"), 10)
        far = retrieval_consistency(_synth(6.0, 30, 3, "r"), _synth(6.0, 20, 4, "q"), 10)
        for k in range(1, 11):
            assert near.f1("abnormality", k) < far.f1("abnormality", k)

    def test_empty_queries(self):
        c = _synth(6.0, 3, 0, "r")
        with pytest.raises(DomainError):
            retrieval_consistency(c, c.subset([]), 2)


class TestSimilarity:
    def test_perfect_clusters(self):
        ref, q = _synth(50.0, 20, 1, "r"), _synth(50.0, 10, 2, "q")
        d = similarity_distribution(ref, q, 1)
        assert d.mismatch.count == 0 and d.mismatch.mean is None
        assert sum(d.match.histogram) == d.match.count == 40

    def test_match_above_mismatch(self):
        d = similarity_distribution(_synth(6.0, 30, 3, "r"), _synth(6.0, 20, 4, "q"), 10)
        assert d.match.mean > d.mismatch.mean
        assert sum(d.match.histogram) == d.match.count
        assert sum(d.mismatch.histogram) == d.mismatch.count

    def test_csv(self):
        d = similarity_distribution(_synth(6.0, 5, 3, "r"), _synth(6.0, 5, 4, "q"), 3)
        rows = list(csv.reader(io.StringIO(d.to_csv())))
        assert rows[0] == ["bin_low", "bin_high", "count_match", "count_mismatch"]
        assert len(rows) == HIST_BINS + 1
        assert float(rows[1][0]) == -1.0 and float(rows[-1][1]) == 1.0
        json.dumps(d.to_dict())


FAST = HeadConfig(max_epochs=4, hidden=16, lr=1e-3)


class TestFewShot:
    def setup_method(self):
        self.pool = _synth(4.0, 20, 1, "p", dim=8)
        self.val = _synth(4.0, 5, 2, "v", dim=8)
        self.test = _synth(4.0, 5, 3, "t", dim=8)

    def test_single_run_zero_std_and_determinism(self):
        a = few_shot(self.pool, self.val, self.test, "abnormality", ks=(5,), runs=1, seed=4, config=FAST)
        b = few_shot(self.pool, self.val, self.test, "abnormality", ks=(5,), runs=1, seed=4, config=FAST)
        assert all(v == 0.0 for v in a.std[5].values())
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        assert "macro_f1" in a.to_table()

    def test_k_larger_than_class(self):
        rep = few_shot(self.pool, self.val, self.test, "abnormality", ks=(50,), runs=1, config=FAST)
        assert set(rep.mean[50]) == set(METRIC_NAMES)

    def test_missing_class_named(self):
        pool = self.pool.subset([i for i, c in enumerate(self.pool) if c.abnormality.value != "WMH"])
        with pytest.raises(DomainError, match="WMH"):
            few_shot(pool, self.val, self.test, "abnormality", ks=(5,), runs=1, config=FAST)

    def test_overlap_rejected(self):
        with pytest.raises(DomainError):
            few_shot(self.pool, self.val, self.pool, "abnormality", ks=(5,), runs=1, config=FAST)


class TestAblation:
    def test_identity_variant_and_smoke(self):
        tr = make_context_task(8, seed=1, id_prefix="tr")
        va = make_context_task(4, seed=2, id_prefix="va")
        te = make_context_task(4, seed=3, id_prefix="te")
        variants = {"same": AblationMask(), "no_attention": AblationMask.named("no_attention")}
        rep = run_ablation(tr, va, te, "abnormality", variants, seed=0, runs=2, config=FAST)
        assert all(v == 0.0 for v in rep.delta["same"].values())
        assert set(rep.mean["no_attention"]) == set(METRIC_NAMES)
        assert rep.variants[0] == "full"
        assert "delta_f1" in rep.to_table()
        json.dumps(rep.to_dict())

    def test_context_task_geometry(self):
        c = make_context_task(20, dim=8, seed=0)
        y = c.labels(Task.ABNORMALITY)
        theta = np.arctan2(c.images[:, 1], c.images[:, 0]) % (2 * np.pi)
        sector = np.floor(theta / (2 * np.pi / 16)).astype(int)
        assert np.array_equal(sector % 4, y)
        # text modalities carry the class code
        assert np.array_equal(np.argmax(c.texts[:, 0, 2:6], axis=1), y)

    def test_context_task_errors(self):
        with pytest.raises(DomainError):
            make_context_task(dim=4)
        with pytest.raises(DomainError):
            make_context_task(n_sectors=6)


def test_format_table_alignment():
    text = format_table(["a", "bbb"], [["xx", "y"], ["z", "wwww"]])
    lines = text.splitlines()
    assert lines[0].index("bbb") == lines[1].index("y") == lines[2].index("wwww")
