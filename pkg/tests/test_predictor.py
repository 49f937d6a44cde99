import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimsel.embstore import EmbeddingMatrix, normalize
from dimsel.errors import DimensionMismatchError, PredictorFormatError, TrainingError
from dimsel.optim import AdamW, cosine_lr
from dimsel.oracle import ImportanceTarget, OracleConfig, build_targets, importance_distribution
from dimsel.predictor import (
    Predictor,
    TrainConfig,
    analytic_gradients,
    decode,
    encode,
    forward,
    gradient_check,
    kl_loss,
    load,
    log_softmax,
    save,
    split_validation,
    train,
)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def random_problem(rng, d):
    p = Predictor.init(d, seed=int(rng.integers(1 << 30)))
    x = rng.standard_normal(d)
    x /= np.linalg.norm(x)
    target = softmax(rng.standard_normal(d))
    return p, x, target


class TestForward:
    def test_zero_params_uniform(self):
        p = Predictor(np.zeros((5, 5)), np.zeros(5))
        np.testing.assert_allclose(forward(p, np.arange(5.0)), np.full(5, math.log(1 / 5)), rtol=1e-15)

    def test_identity_argmax(self):
        p = Predictor(np.eye(6), np.zeros(6))
        for i in range(6):
            assert np.argmax(forward(p, np.eye(6)[i])) == i

    def test_hand_case(self):
        p = Predictor(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2))
        e = math.e
        np.testing.assert_allclose(forward(p, [1.0, 0.0]), [math.log(e / (e + 1)), math.log(1 / (e + 1))], rtol=1e-15)

    def test_inference_is_deterministic(self, rng):
        p = Predictor.init(8, dropout_rate=0.5)
        x = rng.standard_normal(8)
        assert forward(p, x).tobytes() == forward(p, x).tobytes()

    def test_dropout_only_in_training(self, rng):
        p = Predictor.init(64, dropout_rate=0.5)
        x = rng.standard_normal(64)
        assert not np.array_equal(forward(p, x, training=True, rng=rng), forward(p, x))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            forward(Predictor.init(4), np.ones(3))


class TestKL:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal(7)
        assert abs(kl_loss(softmax(x), log_softmax(x))) <= 1e-12

    def test_ln2(self):
        assert kl_loss([1.0, 0.0], np.log([0.5, 0.5])) == pytest.approx(math.log(2), rel=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 16))
    def test_gibbs(self, seed, d):
        rng = np.random.default_rng(seed)
        t = softmax(3 * rng.standard_normal(d))
        assert kl_loss(t, log_softmax(3 * rng.standard_normal(d))) >= -1e-9


class TestGradients:
    @pytest.mark.parametrize("d", [2, 4, 8, 16])
    def test_finite_differences(self, d, rng):
        p, x, t = random_problem(rng, d)
        assert gradient_check(p, x, t, 1e-4) <= 1e-3

    def test_closed_form_logit_gradient(self, rng):
        p, x, t = random_problem(rng, 6)
        g = analytic_gradients(p, x, t)
        expected = softmax(p.logits(x)) - t
        np.testing.assert_allclose(g["bias"], expected, rtol=1e-12)
        np.testing.assert_allclose(g["weight"], np.outer(expected, x), rtol=1e-12)

    def test_zero_gradient_at_minimum(self, rng):
        p, x, _ = random_problem(rng, 8)
        t = np.exp(p.predict_log_probs(x))
        g = analytic_gradients(p, x, t)
        assert np.linalg.norm(g["weight"]) <= 1e-6 and np.linalg.norm(g["bias"]) <= 1e-6

    def test_zero_weight_hand_case(self):
        p = Predictor(np.zeros((2, 2)), np.zeros(2))
        x = np.array([0.6, 0.8])
        t = np.array([0.9, 0.1])
        g = analytic_gradients(p, x, t)
        np.testing.assert_allclose(g["weight"], np.outer([0.5 - 0.9, 0.5 - 0.1], x), rtol=1e-15)
        assert gradient_check(p, x, t) <= 1e-6


class TestOptimizer:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 1e-4) == 1e-4
        assert cosine_lr(99, 100, 1e-4) <= 1e-7
        assert cosine_lr(0, 1, 1e-4) == 1e-4

    def test_cosine_monotone(self):
        lrs = [cosine_lr(s, 50, 1.0) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_adamw_first_step(self):
        # first bias-corrected step is lr * sign(g) after decoupled decay
        w = np.array([1.0, -2.0])
        g = np.array([0.5, -3.0])
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.01)
        opt.step({"w": g})
        expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(w, expected, rtol=1e-14)


def single_query(d=16):
    rng = np.random.default_rng(0)
    q = normalize(EmbeddingMatrix(["q"], rng.standard_normal((1, d))))
    r = np.zeros(d)
    r[3] = 0.05
    return q, [ImportanceTarget("q", importance_distribution(r, 0.01))]


class TestTraining:
    def test_memorizes_single_query(self):
        q, t = single_query()
        assert t[0].probs.max() > 0.9
        # one step per epoch, so the fixed small learning rate cannot get there in 200 steps
        p = train(t, q, TrainConfig(epochs=200, lr=0.03), val_targets=t)
        assert p.metadata["best_val_kl"] < 0.01

    def test_single_query_needs_explicit_validation(self):
        q, t = single_query()
        with pytest.raises(TrainingError, match="validation split is empty"):
            train(t, q, TrainConfig(epochs=1))

    def test_empty_targets(self):
        q, _ = single_query()
        with pytest.raises(TrainingError):
            train([], q, TrainConfig())

    def test_checkpoint_is_history_minimum(self, synth, synth_split):
        tr, _ = synth_split
        targets, _ = build_targets(synth.corpus, tr, synth.qrels, OracleConfig())
        p = train(targets[:200], tr, TrainConfig(epochs=15, lr=3e-3))
        vals = [h["val_kl"] for h in p.metadata["history"]]
        assert p.metadata["best_val_kl"] == min(vals)
        assert vals[p.metadata["best_epoch"] - 1] == min(vals)
        x = tr.subset([t.query_id for t in targets[:200]]).data
        y = np.array([t.probs for t in targets[:200]])
        _, va = split_validation(200, 0.1, 0)
        assert float(kl_loss(y[va], p.predict_log_probs(x[va])).mean()) == p.metadata["best_val_kl"]

    def test_deterministic(self, synth, synth_split):
        tr, _ = synth_split
        targets, _ = build_targets(synth.corpus, tr, synth.qrels, OracleConfig())
        a = train(targets, tr, TrainConfig(epochs=5, seed=7))
        b = train(targets, tr, TrainConfig(epochs=5, seed=7))
        assert a.metadata["best_val_kl"] == b.metadata["best_val_kl"]
        assert encode(a) == encode(b)

    def test_split_is_disjoint_and_complete(self):
        tr, va = split_validation(101, 0.1, 3)
        assert va.size == 10 and np.union1d(tr, va).tolist() == list(range(101))

    def test_recovers_planted_dims(self, synth, synth_split):
        # tau=0.05 is the largest searched temperature; it does not change the oracle's dim ordering
        tr, te = synth_split
        cfg = OracleConfig(tau=0.05)
        targets, _ = build_targets(synth.corpus, tr, synth.qrels, cfg)
        held_out, _ = build_targets(synth.corpus, te, synth.qrels, cfg)
        p = train(targets, tr, TrainConfig(epochs=200))

        def planted_jaccard(qids, imp):
            out = []
            for qid, row in zip(qids, imp):
                top = set(np.argsort(-row, kind="stable")[:16].tolist())
                planted = set(synth.planted_for(qid))
                out.append(len(top & planted) / len(top | planted))
            return float(np.mean(out))

        qids = [t.query_id for t in held_out]
        oracle_j = planted_jaccard(qids, [t.probs for t in held_out])
        pred_j = planted_jaccard(qids, p.predict_log_probs(te.subset(qids).data))
        assert oracle_j - pred_j <= 0.1


class TestFile:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        p = Predictor.init(12, seed=3, dropout_rate=0.1)
        p.metadata = {"note": "x"}
        save(p, tmp_path / "p.dprd")
        back = load(tmp_path / "p.dprd")
        x = rng.standard_normal((4, 12))
        assert forward(back, x).tobytes() == forward(p, x).tobytes()
        assert back.dropout_rate == 0.1 and back.metadata == {"note": "x"}

    def test_dim_mismatch(self):
        buf = encode(Predictor.init(8))
        with pytest.raises(DimensionMismatchError):
            decode(buf, expected_dim=16)

    def test_truncated(self):
        buf = encode(Predictor.init(8))
        for cut in (20, len(buf) - 10, len(buf) - 1):
            with pytest.raises(PredictorFormatError, match="unexpected end of predictor file"):
                decode(buf[:cut])

    def test_bad_magic_and_version(self):
        buf = encode(Predictor.init(2))
        with pytest.raises(PredictorFormatError):
            decode(b"XXXX" + buf[4:])
        with pytest.raises(PredictorFormatError, match="version"):
            decode(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
