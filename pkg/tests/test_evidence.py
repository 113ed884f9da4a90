import numpy as np
import pytest

from refdx.corpus import SyntheticSpec, class_means, generate_synthetic
from refdx.errors import CaseLookupError, ConfigError, DomainError, ShapeError
from refdx.evalharness import compute_metrics
from refdx.evidence import (
    VARIANT_NAMES,
    AblationMask,
    EvidenceModel,
    HeadConfig,
    attend,
    build_evidence_matrix,
    build_evidence_vector,
    evaluate_loss,
    forward,
    loss_and_grads,
    predict,
    predict_examples,
    predict_query,
    prepare_examples,
    train_head,
)
from refdx.labels import Task
from refdx.numerics import check_gradients, make_rng, softmax
from refdx.retrieval import RetrievalHit

from conftest import make_case


def tiny_model(D=1, hidden=2, k=1, mask=None):
    m = EvidenceModel.init(D, 2, make_rng(0), k, hidden, mask)
    m.params["W1"][:] = 1.0
    m.params["W_proj"][:] = np.eye(D)
    return m


class TestEvidenceVector:
    def test_hand_value(self):
        case = make_case("a", [1.0])
        assert build_evidence_vector(case, 0.5, tiny_model()).tolist() == [6.0]

    def test_zero_similarity_zeroes_second_half(self):
        m = tiny_model()
        m.params["W1"][4:] = 100.0  # weights reading the weighted half must not matter
        assert build_evidence_vector(make_case("a", [1.0]), 0.0, m).tolist() == [4.0]

    def test_all_modalities_dropped(self):
        mask = AblationMask(drop_image=True, drop_abn=True, drop_dx=True, drop_desc=True)
        m = tiny_model(D=3, mask=mask)
        m.params["b1"][:] = [0.5, -1.0, 2.0]
        m.params["W_proj"][:] = make_rng(1).normal(size=(3, 3))
        out = build_evidence_vector(make_case("a", [1.0, 2.0, 3.0]), 0.7, m)
        np.testing.assert_allclose(out, np.maximum(m.params["b1"], 0) @ m.params["W_proj"])

    def test_similarity_weighting_disabled(self):
        case = make_case("a", [1.0])
        m = tiny_model(mask=AblationMask(disable_similarity_weighting=True))
        assert build_evidence_vector(case, 0.25, m).tolist() == [8.0]

    def test_errors(self):
        with pytest.raises(ShapeError):
            build_evidence_vector(make_case("a", [1.0, 2.0]), 0.5, tiny_model())
        with pytest.raises(DomainError):
            build_evidence_vector(make_case("a", [1.0]), np.nan, tiny_model())


class TestEvidenceMatrix:
    def setup_method(self):
        rng = make_rng(2)
        self.corpus = generate_synthetic(SyntheticSpec(4, 3, 4, 3.0, seed=2))
        self.model = EvidenceModel.init(4, 4, rng, 3, 8)
        self.hits = [RetrievalHit(c.id, i + 1, 0.9 - 0.1 * i, i) for i, c in enumerate(self.corpus.cases[:3])]

    def test_rows_match_vectors(self):
        E = build_evidence_matrix(self.hits, self.corpus, self.model)
        assert E.shape == (3, 4)
        for row, h in zip(E, self.hits):
            np.testing.assert_array_equal(row, build_evidence_vector(self.corpus.get(h.case_id), h.sim, self.model))

    def test_permutation(self):
        E = build_evidence_matrix(self.hits, self.corpus, self.model)
        P = build_evidence_matrix(self.hits[::-1], self.corpus, self.model)
        np.testing.assert_array_equal(P, E[::-1])

    def test_unknown_id(self):
        with pytest.raises(CaseLookupError):
            build_evidence_matrix([RetrievalHit("nope", 1, 0.5, 0)], self.corpus, self.model)


class TestAttention:
    def model(self, D=2):
        m = EvidenceModel.init(D, 3, make_rng(0), 2, 4)
        m.params["W_q"][:] = np.eye(D)
        return m

    def test_hand_values(self):
        alpha, e_bar = attend([1.0, 0.0], np.array([[2.0, 0.0], [0.0, 2.0]]), self.model())
        np.testing.assert_allclose(alpha, [0.880797, 0.119203], atol=1e-6)
        np.testing.assert_allclose(e_bar, [1.761594, 0.238406], atol=1e-6)

    def test_identical_rows_uniform(self):
        alpha, _ = attend([0.3, -0.2], np.ones((4, 2)), self.model())
        np.testing.assert_allclose(alpha, 0.25)

    def test_single_row(self):
        alpha, e_bar = attend([0.3, -0.2], [[5.0, 6.0]], self.model())
        assert alpha.tolist() == [1.0] and e_bar.tolist() == [5.0, 6.0]

    def test_empty(self):
        with pytest.raises(DomainError):
            attend([1.0, 0.0], np.zeros((0, 2)), self.model())

    def test_random_alpha_is_distribution(self):
        rng = make_rng(3)
        m = EvidenceModel.init(5, 3, rng, 3, 4)
        for _ in range(200):
            alpha, _ = attend(rng.normal(size=5), rng.normal(size=(3, 5)) * 3, m)
            assert abs(alpha.sum() - 1) < 1e-9 and np.all(alpha >= 0)


class TestPredict:
    def setup_method(self):
        self.rng = make_rng(4)

    def test_probs_and_permutation(self):
        m = EvidenceModel.init(5, 3, self.rng, 3, 8)
        q, E = self.rng.normal(size=5), self.rng.normal(size=(3, 5))
        logits, probs, alpha = predict(q, E, m)
        assert abs(probs.sum() - 1) < 1e-9
        perm = [2, 0, 1]
        l2, _, a2 = predict(q, E[perm], m)
        np.testing.assert_allclose(l2, logits, atol=1e-12)
        np.testing.assert_allclose(a2, alpha[perm], atol=1e-15)

    def test_drop_all_ignores_evidence(self):
        m = EvidenceModel.init(5, 3, self.rng, 3, 8, AblationMask.named("no_evidence"))
        q = self.rng.normal(size=5)
        a = predict(q, self.rng.normal(size=(3, 5)), m)[0]
        b = predict(q, self.rng.normal(size=(3, 5)) * 100, m)[0]
        np.testing.assert_array_equal(a, b)

    def test_concatenation_head(self):
        m = EvidenceModel.init(5, 3, self.rng, 3, 8, AblationMask.named("no_attention"))
        assert m.params["A1"].shape == (5 + 15, 8)
        _, probs, alpha = predict(self.rng.normal(size=5), self.rng.normal(size=(3, 5)), m)
        np.testing.assert_allclose(alpha, 1 / 3)
        with pytest.raises(ConfigError):
            predict(self.rng.normal(size=5), self.rng.normal(size=(2, 5)), m)

    def test_task_arity_checked(self):
        with pytest.raises(ConfigError):
            EvidenceModel.init(4, 3, self.rng, task="abnormality")


@pytest.mark.parametrize("variant", VARIANT_NAMES)
def test_joint_gradients(variant):
    rng = make_rng(5)
    D, k, C, B = 4, 2, 3, 3
    m = EvidenceModel.init(D, C, rng, k, 5, AblationMask.named(variant))
    for name in ("b1", "c1", "c2"):
        m.params[name][:] = rng.normal(size=m.params[name].shape) * 0.1
    Q, Z, S = rng.normal(size=(B, D)), rng.normal(size=(B, k, 4 * D)), rng.uniform(-1, 1, (B, k))
    y = rng.integers(0, C, B)
    _, grads = loss_and_grads(m, Q, Z, S, y)
    errs = check_gradients(lambda: loss_and_grads(m, Q, Z, S, y)[0], m.params, grads)
    assert max(errs.values()) < 1e-4, errs


def test_forward_alpha_sums_to_one():
    rng = make_rng(6)
    m = EvidenceModel.init(4, 3, rng, 3, 6)
    _, alpha, _ = forward(m, rng.normal(size=(50, 4)), rng.normal(size=(50, 3, 16)), rng.uniform(-1, 1, (50, 3)))
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = EvidenceModel.init(4, 4, make_rng(7), 3, 6, AblationMask.named("no_dx"), task="abnormality")
    m.save(tmp_path / "h.json")
    back = EvidenceModel.load(tmp_path / "h.json")
    assert back.mask == m.mask and back.task is Task.ABNORMALITY
    for k, v in m.params.items():
        np.testing.assert_array_equal(back.params[k], v)


def test_mask_presets():
    assert AblationMask.named("full") == AblationMask()
    assert AblationMask.from_dict(AblationMask.named("no_abn").to_dict()).drop_abn
    with pytest.raises(ConfigError):
        AblationMask.named("no_everything")
    with pytest.raises(ConfigError):
        AblationMask.from_dict({"drop_brain": True})


# --- training ---------------------------------------------------------------

def _splits(sep=4.0, n_train=200, n_val=100, n_test=100, dim=32):
    g = lambda n, s, p: generate_synthetic(SyntheticSpec(4, n, dim, sep, 1.0, seed=s, id_prefix=p))
    return g(n_train, 1, "tr"), g(n_val, 2, "va"), g(n_test, 3, "te")


@pytest.fixture(scope="module")
def small_sets():
    tr, va, te = _splits(n_train=30, n_val=10, n_test=10, dim=8)
    return (prepare_examples(tr, tr, "abnormality", 3, leave_one_out=True),
            prepare_examples(va, tr, "abnormality", 3), tr)


def test_lr_zero_keeps_init(small_sets):
    tr, va, _ = small_sets
    cfg = HeadConfig(lr=0.0, max_epochs=3, hidden=8)
    model, hist = train_head(tr, va, "abnormality", cfg)
    init = EvidenceModel.init(8, 4, make_rng(cfg.seed), 3, 8)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v, init.params[k])
    assert len(set(hist["val_loss"])) == 1 and hist["best_epoch"] == 0


def test_best_checkpoint_contract(small_sets):
    tr, va, _ = small_sets
    model, hist = train_head(tr, va, "abnormality", HeadConfig(max_epochs=15, hidden=16, lr=1e-3))
    final = evaluate_loss(model, va)
    assert final <= min(hist["val_loss"]) + 1e-12
    assert final == pytest.approx(hist["val_loss"][hist["best_epoch"]], abs=1e-12)


def test_deterministic(small_sets):
    tr, va, _ = small_sets
    cfg = HeadConfig(max_epochs=4, hidden=8, lr=1e-3, seed=3)
    a, ha = train_head(tr, va, "abnormality", cfg)
    b, hb = train_head(tr, va, "abnormality", cfg)
    assert ha == hb
    np.testing.assert_array_equal(a.params["A2"], b.params["A2"])


def test_single_class_warns(small_sets):
    tr, va, _ = small_sets
    only = tr.take(np.flatnonzero(tr.y == 0))
    with pytest.warns(UserWarning, match="single class"):
        train_head(only, va, "abnormality", HeadConfig(max_epochs=1, hidden=4))


def test_label_range_checked(small_sets):
    tr, va, _ = small_sets
    with pytest.raises(DomainError):
        train_head(tr, va, "binary", HeadConfig(max_epochs=1))


def test_predict_query_matches_batch(small_sets):
    tr, va, refs = small_sets
    model, _ = train_head(tr, va, "abnormality", HeadConfig(max_epochs=2, hidden=8))
    _, _, alpha_b = predict_examples(model, tr.take([0]))
    case = refs.cases[0]
    hits, logits, probs, alpha = predict_query(case.image, refs, model, exclude=(case.id,))
    np.testing.assert_allclose(alpha, alpha_b[0], atol=1e-12)
    assert [h.case_id for h in hits] == tr.hit_ids[0]


@pytest.fixture(scope="module")
def trained_k():
    tr, va, te = _splits()
    out = {}
    for k in (3, 5):
        X = prepare_examples(tr, tr, "abnormality", k, leave_one_out=True)
        V = prepare_examples(va, tr, "abnormality", k)
        T = prepare_examples(te, tr, "abnormality", k)
        model, _ = train_head(X, V, "abnormality", HeadConfig(k=k))
        out[k] = (model, T, te)
    return out


@pytest.mark.slow
def test_trained_head_vs_nearest_mean(trained_k):
    model, T, te = trained_k[3]
    pred, _, _ = predict_examples(model, T)
    means = class_means(SyntheticSpec(4, 1, 32, 4.0, 1.0))
    oracle = np.argmax(te.images @ means.T - 0.5 * (means * means).sum(axis=1), axis=1)
    assert np.mean(pred == oracle) >= 0.95
    assert compute_metrics(pred, T.y, 4).macro_f1 >= 0.95


@pytest.mark.slow
def test_more_references_do_not_hurt(trained_k):
    acc = {}
    for k, (model, T, _) in trained_k.items():
        pred, _, _ = predict_examples(model, T)
        acc[k] = np.mean(pred == T.y)
    assert acc[5] >= acc[3] - 0.02
