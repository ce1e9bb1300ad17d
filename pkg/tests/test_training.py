import numpy as np
import pytest

from axvector import data as D
from axvector import model as M
from axvector import training as T

from gradcheck import check_grads


def tiny_arch(variant="baseline", num_speakers=3):
    return M.ArchConfig(input_dim=3, frame_dims=(4, 4, 4, 4, 6), kernel_sizes=(2, 1, 1, 1, 1),
                        dilations=(1, 1, 1, 1, 1), utterance_dims=(5, 4),
                        num_speakers=num_speakers, attention_hidden=3, pool_size=2,
                        variant=variant)


def micro_corpus(num_speakers=3, utts=6, seed=5):
    spec = D.CorpusSpec(num_speakers=num_speakers, utts_per_speaker=utts, feature_dim=3,
                        frames_min=16, frames_max=30, sigma_between=1.5, sigma_session=0.2,
                        ar_coefficient=0.3, conditions=("clean",), seed=seed)
    return D.generate_corpus(spec)


def micro_train_config(**overrides):
    base = dict(batch_size=6, crop_frames_min=10, crop_frames_max=16, total_steps=30,
                lr_start=1e-2, lr_end=1e-3, weight_decay=1e-4, seed=3)
    base.update(overrides)
    return T.TrainConfig(**base)


class TestAdam:
    def _param(self, value, decay=True):
        return M.Param("p", np.asarray(value, dtype=float), decay)

    def test_zero_gradients_no_decay(self):
        p = self._param([1.0, -2.0])
        state = T.init_adam([p])
        T.adam_step([p], state, lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_scalar_first_step_closed_form(self):
        p = self._param([2.0])
        p.grad[:] = 0.3
        state = T.init_adam([p])
        T.adam_step([p], state, lr=1e-3, weight_decay=0.0)
        expected = 2.0 - 1e-3 * 0.3 / (0.3 + 1e-8)
        np.testing.assert_allclose(p.value, [expected], rtol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        p = self._param([1.0])
        p.grad[:] = np.nan
        state = T.init_adam([p])
        with pytest.raises(ValueError, match="'p'"):
            T.adam_step([p], state, lr=1e-3, weight_decay=0.0)

    def test_decay_shrinks_norm_with_zero_data_gradient(self):
        p = self._param(np.array([1.0, -1.5, 2.0]))
        state = T.init_adam([p])
        norms = [np.linalg.norm(p.value)]
        for _ in range(5):
            p.zero_grad()
            T.adam_step([p], state, lr=1e-3, weight_decay=1e-2)
            norms.append(np.linalg.norm(p.value))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_no_decay_flag_respected(self):
        p = self._param([1.0], decay=False)
        state = T.init_adam([p])
        T.adam_step([p], state, lr=1e-3, weight_decay=1e-2)
        np.testing.assert_array_equal(p.value, [1.0])


class TestLearningRate:
    def test_endpoints_and_monotone(self):
        cfg = micro_train_config(total_steps=100, lr_start=1e-3, lr_end=1e-4)
        rates = [T.learning_rate(s, cfg) for s in range(100)]
        assert rates[0] == pytest.approx(1e-3, rel=1e-12)
        assert rates[-1] == pytest.approx(1e-4, rel=1e-12)
        assert all(b <= a for a, b in zip(rates, rates[1:]))


class TestBatches:
    def test_shared_crop_length_per_batch(self):
        corpus = micro_corpus()
        cfg = micro_train_config(batch_size=4)
        for batch, labels in T.make_batches(corpus, cfg, epoch_seed=0):
            assert batch.ndim == 3
            assert labels.shape == (batch.shape[0],)
            assert cfg.crop_frames_min <= batch.shape[1] <= cfg.crop_frames_max

    def test_wrap_padding_order(self):
        feats = np.arange(150, dtype=float)[:, None]
        out = T.crop_or_wrap(feats, 200, offset=0, max_wrap=4, utt_id="u")
        expected = np.concatenate([np.arange(150), np.arange(50)])[:, None]
        assert np.array_equal(out, expected)

    def test_wrap_limit_error(self):
        feats = np.arange(10, dtype=float)[:, None]
        with pytest.raises(ValueError, match="'u'"):
            T.crop_or_wrap(feats, 100, offset=0, max_wrap=4, utt_id="u")

    def test_deterministic_given_seed(self):
        corpus = micro_corpus()
        cfg = micro_train_config()
        a = T.make_batches(corpus, cfg, epoch_seed=[1, 2])
        b = T.make_batches(corpus, cfg, epoch_seed=[1, 2])
        assert len(a) == len(b)
        for (xa, la), (xb, lb) in zip(a, b):
            assert np.array_equal(xa, xb) and np.array_equal(la, lb)

    def test_every_utterance_once_per_epoch(self):
        corpus = micro_corpus()
        cfg = micro_train_config(batch_size=5)
        batches = T.make_batches(corpus, cfg, epoch_seed=7)
        assert sum(len(labels) for _, labels in batches) == len(corpus)


class TestLoss:
    def test_uniform_logits_give_log_classes(self):
        loss, _, _ = T.softmax_cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(7), rel=1e-12)

    def test_gradient(self, rng):
        logits = rng.normal(size=(3, 5))
        labels = np.array([1, 4, 0])

        def loss_fn():
            return T.softmax_cross_entropy(logits, labels)[0]

        _, d_logits, _ = T.softmax_cross_entropy(logits, labels)
        check_grads(loss_fn, [("logits", logits, d_logits)], tol=1e-6)


@pytest.mark.parametrize("variant", ["baseline", "acnn_abn"])
def test_full_model_gradients_match_finite_differences(variant, rng):
    model = M.build(tiny_arch(variant, num_speakers=2), seed=5)
    x = rng.normal(size=(3, 6, 3))
    labels = np.array([0, 1, 0])

    def loss_fn():
        return T.softmax_cross_entropy(model.forward(x, mode="train"), labels)[0]

    logits, caches = model.forward_train(x)
    _, d_logits, _ = T.softmax_cross_entropy(logits, labels)
    model.zero_grads()
    model.backward(caches, d_logits)
    checks = [(p.name, p.value, p.grad) for p in model.params()]
    check_grads(loss_fn, checks, tol=1e-4)


class TestTrainLoop:
    def test_progress_and_determinism(self, tmp_path):
        corpus = micro_corpus()
        cfg = micro_train_config(total_steps=24)

        model_a = M.build(tiny_arch(), seed=2)
        log_a = T.train(model_a, corpus, cfg, checkpoint_path=str(tmp_path / "a.ckpt"))
        model_b = M.build(tiny_arch(), seed=2)
        T.train(model_b, corpus, cfg, checkpoint_path=str(tmp_path / "b.ckpt"))

        # first-step cross entropy sits near log(num_classes)
        assert log_a[0].loss == pytest.approx(np.log(3), rel=0.2)
        # loss decreases from the first epoch to the last
        per_epoch = (len(corpus) + cfg.batch_size - 1) // cfg.batch_size
        first = np.mean([r.loss for r in log_a[:per_epoch]])
        last = np.mean([r.loss for r in log_a[-per_epoch:]])
        assert last < first
        assert all(np.isfinite(r.loss) for r in log_a)
        # identical seeds give bit-identical checkpoints
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_checkpoint_round_trip_logits(self, tmp_path, rng):
        corpus = micro_corpus()
        model = M.build(tiny_arch(), seed=2)
        T.train(model, corpus, micro_train_config(total_steps=6),
                checkpoint_path=str(tmp_path / "m.ckpt"))
        loaded = M.load_model(str(tmp_path / "m.ckpt"))
        x = rng.normal(size=(2, 12, 3))
        assert np.array_equal(model.forward(x), loaded.forward(x))

    def test_crop_below_receptive_field_rejected(self):
        corpus = micro_corpus()
        model = M.build(tiny_arch(), seed=0)
        with pytest.raises(ValueError, match="minimum"):
            T.train(model, corpus, micro_train_config(crop_frames_min=1, crop_frames_max=5))

    def test_log_line_format(self):
        record = T.StepRecord(3, 1e-3, 1.25, 0.5)
        fields = record.line().split("\t")
        assert fields[0] == "3" and len(fields) == 4
