import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal

from axvector import backend as B
from axvector import data as D
from axvector import model as M


def random_spd(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T / dim + 0.5 * np.eye(dim))


@pytest.fixture(scope="module")
def tiny_model():
    cfg = M.ArchConfig(input_dim=4, frame_dims=(6, 6, 6, 6, 8), kernel_sizes=(2, 1, 1, 1, 1),
                       dilations=(1, 1, 1, 1, 1), utterance_dims=(5, 4), num_speakers=3,
                       attention_hidden=3, pool_size=2, variant="baseline")
    model = M.build(cfg, seed=9)
    rng = np.random.default_rng(0)
    model.forward(rng.normal(size=(4, 10, 4)), mode="train")   # initialize running stats
    return model


@pytest.fixture(scope="module")
def tiny_corpus():
    spec = D.CorpusSpec(num_speakers=3, utts_per_speaker=3, feature_dim=4, frames_min=16,
                        frames_max=20, conditions=("clean",), seed=4)
    return D.generate_corpus(spec)


class TestExtraction:
    def test_dimension_and_determinism(self, tiny_model, tiny_corpus):
        table = B.extract_embeddings(tiny_model, tiny_corpus)
        assert table.dim == 5
        again = B.extract_embeddings(tiny_model, tiny_corpus)
        assert np.array_equal(table.vectors, again.vectors)

    def test_corpus_order_permutes_rows_not_values(self, tiny_model, tiny_corpus):
        table = B.extract_embeddings(tiny_model, tiny_corpus)
        reversed_corpus = D.Corpus(list(reversed(tiny_corpus.utterances)),
                                   {u.utt_id: tiny_corpus.features(u.utt_id)
                                    for u in tiny_corpus.utterances})
        permuted = B.extract_embeddings(tiny_model, reversed_corpus)
        assert permuted.ids == list(reversed(table.ids))
        for utt_id in table.ids:
            assert np.array_equal(table.vector(utt_id), permuted.vector(utt_id))

    def test_short_utterance_names_id(self, tiny_model):
        utts = [D.Utterance("tooshort", "spk", "clean")]
        corpus = D.Corpus(utts, {"tooshort": np.zeros((1, 4))})
        with pytest.raises(ValueError, match="tooshort"):
            B.extract_embeddings(tiny_model, corpus)

    def test_save_load_round_trip(self, tiny_model, tiny_corpus, tmp_path):
        table = B.extract_embeddings(tiny_model, tiny_corpus)
        path = str(tmp_path / "emb.axvr")
        table.save(path)
        loaded = B.EmbeddingTable.load(path)
        assert loaded.ids == table.ids
        assert np.array_equal(loaded.vectors, table.vectors)


class TestPreprocess:
    def test_centering_and_unit_norm(self, rng):
        x = rng.normal(size=(60, 8)) + 5.0
        labels = np.repeat(np.arange(6), 10)
        transform = B.preprocess_fit(x, labels, lda_dim=4)
        centered_projection = (x - transform.mean) @ transform.projection
        np.testing.assert_allclose(centered_projection.mean(axis=0), 0.0, atol=1e-9)
        out = B.preprocess_apply(transform, x)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_axis_aligned_two_class_problem(self, rng):
        # classes separated only along coordinate 1 of 3
        n = 2000
        a = rng.normal(scale=0.1, size=(n, 3)) + np.array([0.0, -2.0, 0.0])
        b = rng.normal(scale=0.1, size=(n, 3)) + np.array([0.0, 2.0, 0.0])
        x = np.concatenate([a, b])
        labels = np.array([0] * n + [1] * n)
        transform = B.preprocess_fit(x, labels, lda_dim=1)
        direction = transform.projection[:, 0]
        cosine = abs(direction[1]) / np.linalg.norm(direction)
        assert cosine > 0.999

    def test_scaling_after_centering_is_irrelevant(self, rng):
        x = rng.normal(size=(40, 6))
        labels = np.repeat(np.arange(4), 10)
        transform = B.preprocess_fit(x, labels, lda_dim=3)
        v = rng.normal(size=6)
        base = B.preprocess_apply(transform, transform.mean + (v - transform.mean))
        scaled = B.preprocess_apply(transform, transform.mean + 7.5 * (v - transform.mean))
        np.testing.assert_allclose(base, scaled, atol=1e-12)

    def test_lda_dim_too_large(self, rng):
        x = rng.normal(size=(30, 5))
        labels = np.repeat(np.arange(3), 10)
        with pytest.raises(ValueError, match="lda_dim"):
            B.preprocess_fit(x, labels, lda_dim=3)   # only 2 discriminant directions

    def test_singular_within_scatter_survives(self):
        # within scatter is exactly rank deficient; the ridge must absorb it
        x = np.zeros((20, 4))
        x[10:, 0] = 1.0
        labels = np.array([0] * 10 + [1] * 10)
        transform = B.preprocess_fit(x, labels, lda_dim=1)
        assert np.all(np.isfinite(transform.projection))


class TestPldaTraining:
    def test_recovery_and_monotone_loglik(self):
        # 1000 speakers x 5 sessions = 5000 vectors; the decaying speaker
        # spectrum keeps the speaker-sampling noise on the between matrix
        # well inside the 10% budget
        rng = np.random.default_rng(7)
        dim, speakers, per = 10, 1000, 5
        eigvals = np.array([4.0, 1.0, 0.6, 0.4, 0.3, 0.22, 0.16, 0.12, 0.09, 0.07])
        basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        between_true = (basis * eigvals) @ basis.T
        within_true = random_spd(rng, dim, 0.8)
        chol_b = np.linalg.cholesky(between_true)
        chol_w = np.linalg.cholesky(within_true)
        labels = np.repeat(np.arange(speakers), per)
        ys = rng.normal(size=(speakers, dim)) @ chol_b.T
        x = ys[labels] + rng.normal(size=(speakers * per, dim)) @ chol_w.T
        model = B.plda_train(x, labels, iterations=20)
        ll = np.array(model.em_loglik)
        assert np.all(np.diff(ll) >= -1e-6 * np.abs(ll[:-1]))
        rel_b = np.linalg.norm(model.between - between_true) / np.linalg.norm(between_true)
        rel_w = np.linalg.norm(model.within - within_true) / np.linalg.norm(within_true)
        assert rel_b < 0.10 and rel_w < 0.10

    def test_single_class_degenerates_gracefully(self, rng):
        x = rng.normal(size=(20, 4))
        with pytest.warns(UserWarning, match="single-class"):
            model = B.plda_train(x, np.zeros(20, dtype=int))
        assert not model.between.any()
        scorer = B.PldaScorer(model)
        assert scorer.score(x[0], x[1]) == 0.0


class TestPldaScoring:
    def _model(self, rng, dim=4):
        return B.PldaModel(mean=rng.normal(size=dim),
                           between=random_spd(rng, dim, 1.0),
                           within=random_spd(rng, dim, 0.7))

    def test_zero_between_gives_zero_llr(self, rng):
        model = B.PldaModel(mean=np.zeros(3), between=np.zeros((3, 3)),
                            within=random_spd(rng, 3))
        assert B.plda_score(model, rng.normal(size=3), rng.normal(size=3)) == 0.0

    def test_symmetry(self, rng):
        model = self._model(rng)
        for _ in range(5):
            a = rng.normal(size=4)
            b = rng.normal(size=4)
            assert B.plda_score(model, a, b) == pytest.approx(
                B.plda_score(model, b, a), abs=1e-10)

    def test_against_joint_gaussian_evaluation(self, rng):
        model = self._model(rng, dim=3)
        scorer = B.PldaScorer(model)
        total = model.between + model.within
        joint_same = np.block([[total, model.between], [model.between, total]])
        for _ in range(4):
            e = rng.normal(size=3)
            t = rng.normal(size=3)
            stacked = np.concatenate([e - model.mean, t - model.mean])
            expected = (multivariate_normal.logpdf(stacked, np.zeros(6), joint_same)
                        - multivariate_normal.logpdf(e - model.mean, np.zeros(3), total)
                        - multivariate_normal.logpdf(t - model.mean, np.zeros(3), total))
            assert scorer.score(e, t) == pytest.approx(expected, abs=1e-10)

    def test_dim_one_quadrature_oracle(self):
        b, w, mu = 1.3, 0.6, 0.4
        model = B.PldaModel(mean=np.array([mu]), between=np.array([[b]]),
                            within=np.array([[w]]))
        e, t = 1.1, 0.2

        def gauss(x, mean, var):
            return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)

        same, _ = integrate.quad(
            lambda y: gauss(e, mu + y, w) * gauss(t, mu + y, w) * gauss(y, 0.0, b),
            -12, 12, epsabs=1e-13, epsrel=1e-13)
        diff = (integrate.quad(lambda y: gauss(e, mu + y, w) * gauss(y, 0.0, b),
                               -12, 12, epsabs=1e-13, epsrel=1e-13)[0]
                * integrate.quad(lambda y: gauss(t, mu + y, w) * gauss(y, 0.0, b),
                                 -12, 12, epsabs=1e-13, epsrel=1e-13)[0])
        expected = np.log(same) - np.log(diff)
        assert B.plda_score(model, np.array([e]), np.array([t])) == pytest.approx(
            expected, abs=1e-8)

    def test_rotation_invariance(self, rng):
        model = self._model(rng, dim=4)
        e = rng.normal(size=4)
        t = rng.normal(size=4)
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        rotated = B.PldaModel(mean=q @ model.mean, between=q @ model.between @ q.T,
                              within=q @ model.within @ q.T)
        assert B.plda_score(model, e, t) == pytest.approx(
            B.plda_score(rotated, q @ e, q @ t), abs=1e-9)

    def test_dim_mismatch(self, rng):
        model = self._model(rng, dim=4)
        with pytest.raises(ValueError, match="dim"):
            B.plda_score(model, np.zeros(3), np.zeros(4))

    def test_score_pairs_matches_scalar_path(self, rng):
        model = self._model(rng, dim=5)
        scorer = B.PldaScorer(model)
        enroll = rng.normal(size=(7, 5))
        test = rng.normal(size=(7, 5))
        batch = scorer.score_pairs(enroll, test)
        for i in range(7):
            assert batch[i] == pytest.approx(scorer.score(enroll[i], test[i]), abs=1e-12)


class TestFusionAndScores:
    def test_self_fusion_identity(self):
        scores = [("a", "b", 1.5), ("a", "c", -0.5)]
        assert B.fuse_scores([scores, scores]) == scores

    def test_equal_weight_mean(self):
        one = [("a", "b", 1.0)]
        two = [("a", "b", 3.0)]
        assert B.fuse_scores([one, two]) == [("a", "b", 2.0)]

    def test_missing_trial_named(self):
        one = [("a", "b", 1.0), ("a", "c", 2.0)]
        two = [("a", "b", 1.0)]
        with pytest.raises(ValueError, match="a c"):
            B.fuse_scores([one, two])

    def test_order_preserved(self):
        one = [("x", "y", 1.0), ("a", "b", 2.0)]
        two = [("a", "b", 4.0), ("x", "y", 3.0)]
        fused = B.fuse_scores([one, two])
        assert [(e, t) for e, t, _ in fused] == [("x", "y"), ("a", "b")]

    def test_score_file_round_trip(self, tmp_path):
        scores = [("a", "b", 1.23456789), ("c", "d", -0.000001)]
        path = str(tmp_path / "scores.txt")
        B.write_scores(path, scores)
        text = open(path).read()
        assert "a b 1.234568\n" in text
        loaded = B.read_scores(path)
        assert loaded[0][2] == pytest.approx(1.234568, abs=1e-9)


def test_backend_save_load_round_trip(tmp_path, rng):
    transform = B.PreprocessTransform(mean=rng.normal(size=6),
                                      projection=rng.normal(size=(6, 3)))
    plda = B.PldaModel(mean=rng.normal(size=3), between=random_spd(rng, 3),
                       within=random_spd(rng, 3))
    path = str(tmp_path / "backend.axvr")
    B.save_backend(path, transform, plda)
    loaded_transform, loaded_plda = B.load_backend(path)
    assert np.array_equal(loaded_transform.mean, transform.mean)
    assert np.array_equal(loaded_transform.projection, transform.projection)
    assert np.array_equal(loaded_plda.between, plda.between)
    assert np.array_equal(loaded_plda.within, plda.within)
