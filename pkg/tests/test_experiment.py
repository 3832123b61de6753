"""Training loop, voting, evaluation, adaptation, reports and the transfusion sweep."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allconv_emg.data import SyntheticConfig, iter_trials
from allconv_emg.data.splits import Fold
from allconv_emg.errors import ConfigurationError, ContractViolation, FormatError, NumericalError
from allconv_emg.experiment import (
    AdaptConfig,
    EarlyStopping,
    EvalReport,
    ExperimentSpec,
    FrameSet,
    ImageCache,
    SweepTable,
    TrainConfig,
    adapt,
    best_low_k,
    confusion_matrix,
    evaluate_predictions,
    evaluate_voted,
    improvement,
    majority_vote,
    prepare_adaptation,
    result_rows,
    train,
    transfusion_sweep,
)
from allconv_emg.experiment.evaluation import EvalResult
from allconv_emg.model import build_allconvnet, count_parameters
from allconv_emg.nn import RngStream
from oracles import majority_vote_reference

WIDTH = 0.125


@pytest.fixture(scope="module")
def cache():
    cfg = SyntheticConfig(gestures=2, subjects=[1], sessions=[1, 2], trials_per_gesture=4, frames_per_trial=120, seed=3)
    return ImageCache.from_trials(iter_trials(cfg))


def keys(session, trials, gestures=2):
    return [(1, session, g, t) for g in range(gestures) for t in trials]


def tiny_model(seed=0, **kw):
    return build_allconvnet(2, WIDTH, rng=RngStream(seed, "model"), **kw)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "bad",
        [
            dict(learning_rate=0.0),
            dict(batch_size=0),
            dict(max_epochs=3, patience=5),
            dict(dropout_p=1.0),
            dict(beta1=1.0),
            dict(train_stride=0),
        ],
    )
    def test_rejects(self, bad):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.max_epochs, c.patience) == (1e-3, 256, 100, 5)
        assert (c.beta1, c.beta2, c.epsilon, c.dropout_p) == (0.9, 0.999, 1e-8, 0.25)


class TestEarlyStopping:
    def test_patience(self):
        s = EarlyStopping(2)
        assert s.update(1, 1.0) and not s.should_stop
        assert not s.update(2, 1.5)
        assert s.update(3, 0.9) and s.bad_epochs == 0
        s.update(4, 0.95)
        s.update(5, 0.9)  # equal is not an improvement
        assert s.should_stop and s.best_epoch == 3


class TestVoting:
    def test_sixty_percent_stream(self):
        # 60% correct with errors spread out: every 101-window is mostly correct
        preds = np.array([0 if i % 5 < 3 else 1 for i in range(101)])
        assert np.array_equal(majority_vote(preds, 101, 2), [0])

    def test_tie_goes_to_lowest(self):
        assert majority_vote([2, 1], 2, 3).tolist() == [1]

    def test_window_longer_than_stream(self):
        assert majority_vote([0, 1, 1], 5).size == 0

    def test_window_one_is_identity(self):
        p = np.array([3, 1, 2, 0])
        np.testing.assert_array_equal(majority_vote(p, 1, 4), p)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            majority_vote([0, 1], 0)
        with pytest.raises(ConfigurationError):
            majority_vote([0, -1], 1)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=1, max_size=80), st.integers(1, 30))
    def test_matches_counting_oracle(self, preds, window):
        expected = majority_vote_reference(preds, window, 4) if window <= len(preds) else np.zeros(0)
        np.testing.assert_array_equal(majority_vote(preds, window, 4), expected)


def frameset(labels_per_trial):
    labels = np.concatenate([np.full(n, g) for g, n in labels_per_trial])
    index = np.concatenate([np.full(n, i) for i, (_, n) in enumerate(labels_per_trial)]).astype(np.int32)
    keys_ = [(1, 1, g, i + 1) for i, (g, _) in enumerate(labels_per_trial)]
    return FrameSet(np.zeros((labels.size, 1, 16, 16), np.float32), labels.astype(np.int64), index, keys_)


class TestEvaluation:
    def test_confusion(self):
        cm = confusion_matrix(np.array([0, 0, 1, 2]), np.array([0, 1, 1, 1]), 3)
        assert cm.sum() == 4 and np.trace(cm) == 2
        assert cm[0, 1] == 1 and cm[2, 1] == 1

    def test_votes_stay_within_trials(self):
        fs = frameset([(0, 4), (1, 4)])
        preds = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        res = evaluate_predictions(preds, fs, 2, windows=[3, 5])
        assert res.per_frame_accuracy == 1.0
        assert res.voted_accuracy[3] == 1.0 and res.voted_frames[3] == 4
        assert np.isnan(res.voted_accuracy[5]) and res.voted_frames[5] == 0

    def test_voted_counts(self):
        fs = frameset([(1, 5)])
        res = evaluate_predictions(np.array([1, 0, 1, 0, 0]), fs, 2, windows=[3])
        assert res.per_frame_accuracy == pytest.approx(0.4)
        assert res.voted_accuracy[3] == pytest.approx(1 / 3)
        assert res.n_frames == 5

    def test_model_route(self, cache):
        fs = cache.frames(keys(1, [1]))
        res = evaluate_voted(tiny_model(), fs, [1, 30])
        assert res.confusion.shape == (2, 2) and res.n_frames == 240
        assert res.voted_accuracy[1] == pytest.approx(res.per_frame_accuracy)


class TestFrames:
    def test_segments_and_subsample(self, cache):
        fs = cache.frames(keys(1, [1, 2]))
        assert fs.segments() == [(0, 120), (120, 240), (240, 360), (360, 480)]
        sub = fs.subsample(7)
        assert len(sub) == 4 * 18
        assert np.array_equal(sub.images[0], fs.images[0]) and np.array_equal(sub.images[18], fs.images[120])

    def test_concat(self, cache):
        a, b = cache.frames(keys(1, [1])), cache.frames(keys(2, [1]))
        c = FrameSet.concat([a, b])
        assert len(c) == len(a) + len(b) and c.keys == a.keys + b.keys
        assert len(c.segments()) == 4

    def test_images_are_normalized(self, cache):
        fs = cache.frames(keys(1, [1]))
        assert fs.images.dtype == np.float32 and fs.images.shape[1:] == (1, 16, 16)
        assert fs.images.min() >= 0 and fs.images.max() <= 1


class TestTraining:
    def test_learns_and_logs(self, cache):
        tr = cache.frames(keys(1, [1, 2, 3]), stride=2)
        val = cache.frames(keys(1, [4]), stride=4)
        model = tiny_model(dropout_p=0.0)
        cfg = TrainConfig(max_epochs=4, patience=2, batch_size=32, learning_rate=3e-3)
        ckpt, log = train(model, tr, val, cfg)
        assert 1 <= log.epochs <= 4 and len(log.val_loss) == log.epochs
        assert log.train_loss[-1] < log.train_loss[0]
        assert ckpt.epoch == log.best_epoch
        assert log.val_loss[log.best_epoch - 1] == min(log.val_loss)

    def test_deterministic(self, cache):
        tr = cache.frames(keys(1, [1, 2]), stride=6)
        cfg = TrainConfig(max_epochs=2, patience=1, batch_size=16)
        a = train(tiny_model(), tr, None, cfg)[0]
        b = train(tiny_model(), tr, None, cfg)[0]
        for name, v in a.tensors.items():
            assert np.array_equal(v, b.tensors[name]), name

    def test_leakage_is_refused(self, cache):
        tr = cache.frames(keys(1, [1, 2]), stride=6)
        with pytest.raises(ContractViolation, match="held-out"):
            train(tiny_model(), tr, None, TrainConfig(max_epochs=1, patience=1), forbidden_keys=frozenset({(1, 1, 0, 2)}))

    def test_non_finite_is_reported(self, cache):
        tr = cache.frames(keys(1, [1]), stride=6)
        model = tiny_model()
        model.blocks[0].conv.weight.value[...] = np.nan
        with pytest.raises(NumericalError, match="conv1"):
            train(model, tr, None, TrainConfig(max_epochs=1, patience=1), tag="t")

    def test_too_few_frames(self, cache):
        fs = cache.frames(keys(1, [1])).take(np.array([0]))
        with pytest.raises(ConfigurationError):
            train(tiny_model(), fs, None, TrainConfig(max_epochs=1, patience=1))


class TestAdaptation:
    def test_config(self):
        with pytest.raises(ConfigurationError):
            AdaptConfig(mode="warp")
        with pytest.raises(ConfigurationError):
            AdaptConfig(mode="transfusion")
        with pytest.raises(ConfigurationError):
            AdaptConfig(budget="T9")
        assert AdaptConfig(mode="transfusion", k=3).label == "transfusion3"

    @pytest.mark.parametrize(
        "mode,k,frozen_blocks",
        [("finetune_top", None, 3), ("feature_extract_full", None, 6), ("transfusion", 2, 2), ("transfusion", 8, 0)],
    )
    def test_frozen_blocks_unchanged(self, cache, mode, k, frozen_blocks):
        source = tiny_model(seed=4)
        fs = cache.frames(keys(2, [1]), stride=10)
        model, ckpt, log = adapt(source, fs, AdaptConfig(mode=mode, k=k, epochs=2, batch_size=8))
        assert log.epochs == 2
        for i in range(1, 9):
            same = all(
                np.array_equal(p.value, q.value) for p, q in zip(model.block_parameters(i), source.block_parameters(i))
            )
            assert same == (i <= frozen_blocks), i

    def test_slim(self, cache):
        source = build_allconvnet(2, rng=RngStream(0, "m"))
        model = prepare_adaptation(source, AdaptConfig(mode="slim"))
        assert count_parameters(model) < count_parameters(source)

    def test_scratch_ignores_source(self):
        source = tiny_model(seed=1)
        model = prepare_adaptation(source, AdaptConfig(mode="scratch"))
        assert all(p.trainable for p in model.parameters())

    def test_empty_adaptation_set(self, cache):
        empty = cache.frames(keys(2, [1])).take(np.arange(0))
        with pytest.raises(ConfigurationError):
            adapt(tiny_model(), empty, AdaptConfig())


def make_report(mode, acc, budget="T1"):
    fold = Fold("inter_session", 1, 1, budget=budget)
    res = EvalResult(acc, np.eye(2, dtype=np.int64), {1: acc, 150: acc + 0.05})
    return EvalReport(result_rows(res, "inter_session", "synthetic", fold, mode, [1, 150]))


class TestReports:
    def test_csv_round_trip(self):
        r = make_report("finetune_top", 0.7)
        back = EvalReport.from_csv(r.to_csv())
        assert back.rows == r.rows
        assert back.summary() == r.summary()

    def test_schema_error(self):
        with pytest.raises(FormatError, match="schema"):
            EvalReport.from_csv("a,b\n1,2\n")

    def test_merge_and_improvement(self):
        base, other = make_report("none", 0.5), make_report("finetune_top", 0.8)
        merged = EvalReport.merge([base, other])
        assert len(merged.rows) == 4
        gain = improvement(base.summary(), other.summary())
        assert gain["inter_session|synthetic|T1|150"] == pytest.approx(30.0)
        with pytest.raises(ConfigurationError):
            improvement(merged.summary(), other.summary())
        assert improvement(merged.summary(), other.summary(), base_mode="none") == gain

    def test_summary_std(self):
        rows = make_report("m", 0.5).rows + make_report("m", 0.7).rows
        s = EvalReport(rows).summary()["inter_session|synthetic|T1|m|1"]
        assert s["n_folds"] == 2 and s["per_frame_mean"] == pytest.approx(0.6)
        assert s["per_frame_std"] == pytest.approx(np.std([0.5, 0.7], ddof=1))

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            ExperimentSpec("cross_galaxy")
        with pytest.raises(ConfigurationError):
            ExperimentSpec("intra_session", windows=(0,))
        assert ExperimentSpec("inter_session").adapt is not None


class TestSweep:
    def test_table(self, cache):
        source = tiny_model(seed=2)
        table = transfusion_sweep(
            source,
            cache.frames(keys(2, [1]), stride=10),
            cache.frames(keys(2, [2])),
            k_values=(0, 2, 8),
            epochs=(1, 2),
            window=30,
            base=AdaptConfig(mode="transfusion", k=0, batch_size=8),
        )
        assert isinstance(table, SweepTable)
        assert set(table.voted) == {(k, e) for k in (0, 2, 8) for e in (1, 2)}
        assert all(0 <= v <= 1 for v in table.voted.values())
        rows = table.rows()
        assert [r["label"] for r in rows] == ["scratch", "conv1-2", "full_transfer"]
        assert best_low_k(table, 2, ks=(2,)) == table.voted[(2, 2)]
        assert table.epochs_to_fraction(8, 0.0) == 1
