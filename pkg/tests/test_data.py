"""Trial files, manifests, split plans and the synthetic generator."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allconv_emg.data import (
    DatasetManifest,
    SyntheticConfig,
    TrialEntry,
    budget_trials,
    decode_trial,
    encode_trial,
    generate_synthetic,
    iter_trials,
    load_manifest,
    make_inter_session_split,
    make_inter_subject_splits,
    make_intra_session_splits,
    read_trial,
    subject_templates,
    write_trial,
)
from allconv_emg.data.splits import Fold, SplitPlan
from allconv_emg.data.synthetic import apply_session_shift, session_transform, synthesize_trial
from allconv_emg.errors import ConfigurationError, FormatError
from allconv_emg.signal import RawTrial, frame_to_image, mirror, trial_to_images
from oracles import nearest_template_accuracy


def random_trial(frames=7, seed=0, **meta):
    rng = np.random.default_rng(seed)
    key = dict(subject=3, session=2, gesture=5, trial=9) | meta
    return RawTrial(**key, frames=rng.normal(size=(frames, 16, 8)).astype(np.float32))


def manifest_for(subjects=(1,), sessions=(1, 2), gestures=3, trials=10, drop=()):
    entries = [
        TrialEntry(f"{s}-{ss}-{g}-{t}", s, ss, g, t)
        for s in subjects
        for ss in sessions
        for g in range(gestures)
        for t in range(1, trials + 1)
        if (s, ss, g, t) not in drop
    ]
    return DatasetManifest("test", gestures, list(subjects), list(sessions), trials, entries)


class TestTrialIO:
    def test_round_trip(self, tmp_path):
        trial = random_trial()
        write_trial(tmp_path / "a" / "t.semg", trial)
        back = read_trial(tmp_path / "a" / "t.semg")
        assert back.key == trial.key and back.sample_rate == 1000
        assert back.frames.tobytes() == trial.frames.tobytes()

    def test_header_layout(self):
        data = encode_trial(random_trial(frames=2))
        magic, version, subject, session, gesture, trial, rows, cols, rate, n = struct.unpack_from("<4sHHBHBBBIQ", data)
        assert (magic, version, subject, session, gesture, trial) == (b"SEMG", 1, 3, 2, 5, 9)
        assert (rows, cols, rate, n) == (16, 8, 1000, 2)
        assert len(data) == struct.calcsize("<4sHHBHBBBIQ") + 2 * 128 * 4

    def test_truncated_payload(self):
        data = encode_trial(random_trial(frames=3))
        with pytest.raises(FormatError, match="expected") as err:
            decode_trial(data[:-10])
        assert "byte" in str(err.value)

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            decode_trial(b"SEMG\x01")

    def test_bad_magic(self):
        data = bytearray(encode_trial(random_trial()))
        data[:4] = b"EMGS"
        with pytest.raises(FormatError, match="magic"):
            decode_trial(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_trial(random_trial()))
        data[4] = 7
        with pytest.raises(FormatError):
            decode_trial(bytes(data))

    def test_wrong_channel_count(self):
        data = bytearray(encode_trial(random_trial()))
        # 13 rows x 10 cols = 130 channels
        data[12], data[13] = 13, 10
        with pytest.raises(FormatError, match="130"):
            decode_trial(bytes(data))

    @settings(max_examples=20, deadline=None)
    @given(
        st.integers(1, 500),
        st.integers(1, 255),
        st.integers(0, 400),
        st.integers(1, 255),
        st.integers(1, 30),
    )
    def test_round_trip_property(self, subject, session, gesture, trial, frames):
        t = random_trial(frames=frames, subject=subject, session=session, gesture=gesture, trial=trial)
        back = decode_trial(encode_trial(t))
        assert back.key == t.key
        assert back.frames.tobytes() == t.frames.tobytes()


class TestManifest:
    def test_duplicates_rejected(self):
        e = TrialEntry("a", 1, 1, 0, 1)
        with pytest.raises(FormatError, match="duplicate"):
            DatasetManifest("x", 2, [1], [1], 1, [e, TrialEntry("b", 1, 1, 0, 1)])

    def test_select_and_entry(self):
        m = manifest_for()
        assert len(m.select(session=2, gesture=1)) == 10
        assert m.entry((1, 2, 1, 4)).path == "1-2-1-4"
        with pytest.raises(KeyError):
            m.entry((9, 9, 9, 9))

    def test_save_load_validate(self, tmp_path):
        entries = []
        for t in (1, 2):
            trial = random_trial(frames=4, subject=1, session=1, gesture=0, trial=t)
            write_trial(tmp_path / f"t{t}.semg", trial)
            entries.append(TrialEntry(f"t{t}.semg", 1, 1, 0, t, num_frames=4))
        m = DatasetManifest("x", 2, [1], [1], 2, entries, root=tmp_path)
        path = m.save(tmp_path / "manifest.json")
        back = load_manifest(path, validate=True)
        assert [e.key for e in back.entries] == [e.key for e in entries]

    def test_validate_detects_mismatch(self, tmp_path):
        write_trial(tmp_path / "t.semg", random_trial(frames=4, subject=1, session=1, gesture=0, trial=2))
        m = DatasetManifest("x", 2, [1], [1], 1, [TrialEntry("t.semg", 1, 1, 0, 1)], root=tmp_path)
        m.save(tmp_path / "manifest.json")
        with pytest.raises(FormatError, match="does not match"):
            load_manifest(tmp_path / "manifest.json", validate=True)

    def test_malformed(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"dataset_tag": "x"}))
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "m.json")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "missing.json")


class TestSplits:
    def test_budgets(self):
        assert [budget_trials(f"T{i}") for i in range(1, 6)] == [1, 2, 3, 4, 5]
        with pytest.raises(ConfigurationError):
            budget_trials("T6")

    def test_intra_session(self):
        m = manifest_for(sessions=(1,))
        plan = make_intra_session_splits(m)
        assert len(plan) == 10
        tests = set()
        for f in plan:
            trials = lambda keys: {k[3] for k in keys}  # noqa: E731
            assert len(trials(f.train)) == 8 and len(trials(f.validation)) == 1 and len(trials(f.test)) == 1
            assert trials(f.validation) == {f.index % 10 + 1}
            assert not f.train & f.test and not f.pretrain and not f.adaptation
            tests |= trials(f.test)
        assert tests == set(range(1, 11))

    def test_intra_missing_trials(self):
        m = manifest_for(sessions=(1,), drop={(1, 1, 2, 7)})
        with pytest.raises(ConfigurationError, match=r"gesture 2: trials \[7\]"):
            make_intra_session_splits(m)

    @pytest.mark.parametrize("budget,k", [("T1", 1), ("T3", 3), ("T5", 5)])
    def test_inter_session(self, budget, k):
        plan = make_inter_session_split(manifest_for(), budget)
        (fold,) = plan.folds
        assert {key[3] for key in fold.adaptation} == set([1, 3, 5, 7, 9][:k])
        assert {key[3] for key in fold.test} == {2, 4, 6, 8, 10}
        assert {key[1] for key in fold.pretrain} == {1}
        assert {key[1] for key in fold.adaptation | fold.test} == {2}
        assert not fold.adaptation & fold.test
        assert len(fold.pretrain) == 30

    def test_inter_session_needs_two_sessions(self):
        with pytest.raises(ConfigurationError):
            make_inter_session_split(manifest_for(sessions=(1,)))

    def test_inter_subject(self):
        m = manifest_for(subjects=tuple(range(1, 11)), sessions=(1,), gestures=2)
        plan = make_inter_subject_splits(m, "T1")
        assert len(plan) == 10
        for f in plan:
            assert all(k[0] != f.subject for k in f.pretrain)
            assert {k[3] for k in f.adaptation} == {1}
            assert len(f.adaptation) == 2  # first odd trial of each gesture
        seen = [k for f in plan for k in f.test]
        assert len(seen) == len(set(seen))

    def test_inter_subject_single_subject(self):
        with pytest.raises(ConfigurationError):
            make_inter_subject_splits(manifest_for())

    def test_overlapping_roles_rejected(self):
        k = frozenset({(1, 1, 0, 1)})
        with pytest.raises(ConfigurationError, match="share"):
            SplitPlan("x", [Fold("x", 1, 1, adaptation=k, test=k)])

    @settings(max_examples=15, deadline=None)
    @given(
        scenario=st.sampled_from(["intra", "session", "subject"]),
        n_subjects=st.integers(2, 4),
        budget=st.sampled_from(["T1", "T2", "T3", "T4", "T5"]),
    )
    def test_each_test_trial_in_one_fold(self, scenario, n_subjects, budget):
        m = manifest_for(subjects=tuple(range(1, n_subjects + 1)), gestures=2)
        if scenario == "intra":
            plan = make_intra_session_splits(m)
        elif scenario == "session":
            plan = make_inter_session_split(m, budget)
        else:
            plan = make_inter_subject_splits(m, budget)
        seen = [k for f in plan for k in f.test]
        assert len(seen) == len(set(seen))
        for f in plan:
            assert not f.test & f.training_keys


def tiny_config(**kw):
    base = dict(gestures=4, frames_per_trial=60, trials_per_gesture=2, sessions=[1, 2], seed=5)
    return SyntheticConfig(**(base | kw))


class TestSynthetic:
    def test_config_validation(self):
        for bad in [dict(gestures=1), dict(column_roll=8), dict(gain_drift=1.0), dict(noise_sigma=-1.0), dict(subjects=[])]:
            with pytest.raises(ConfigurationError):
                tiny_config(**bad)
        with pytest.raises(ConfigurationError, match="unknown"):
            SyntheticConfig.from_dict({"gesturez": 3})

    def test_config_round_trip(self):
        cfg = tiny_config()
        assert SyntheticConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_template_range(self):
        cfg = SyntheticConfig(subjects=[1, 2, 3])
        for s in cfg.subjects:
            t = subject_templates(cfg, s)
            assert t.shape == (8, 16, 8)
            assert np.all(np.abs(t) <= 2.5)

    def test_noiseless_frames_image_to_template(self):
        cfg = tiny_config(noise_sigma=0.0, interference_mv=0.0, column_roll=0, gain_drift=0.0, envelope_depth=0.0)
        templates = subject_templates(cfg, 1)
        for trial in iter_trials(cfg):
            expected = mirror(frame_to_image(templates[trial.gesture]))
            images = mirror(frame_to_image(trial.frames))
            np.testing.assert_allclose(images, np.broadcast_to(expected, images.shape), atol=1e-4)

    def test_deterministic(self, tmp_path):
        cfg = tiny_config()
        generate_synthetic(cfg, tmp_path / "a")
        generate_synthetic(cfg, tmp_path / "b")
        for p in sorted((tmp_path / "a").rglob("*")):
            if p.is_file():
                assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()

    def test_generated_manifest_validates(self, tmp_path):
        manifest, path = generate_synthetic(tiny_config(), tmp_path)
        back = load_manifest(path, validate=True)
        assert len(back.entries) == 4 * 2 * 2
        assert back.gestures == 4

    def test_nearest_template_separability(self):
        cfg = tiny_config(noise_sigma=0.0, interference_mv=0.0, sessions=[1])
        templates = subject_templates(cfg, 1)
        frames, labels = [], []
        for trial in iter_trials(cfg):
            frames.append(trial.frames)
            labels.append(np.full(trial.num_frames, trial.gesture))
        # the envelope only scales frames, so compare directions
        f = np.concatenate(frames)
        f = f / np.linalg.norm(f.reshape(len(f), -1), axis=1)[:, None, None]
        t = templates / np.linalg.norm(templates.reshape(len(templates), -1), axis=1)[:, None, None]
        assert nearest_template_accuracy(f, np.concatenate(labels), t) == 1.0

    def test_session_two_is_roll_and_gain(self):
        cfg = tiny_config(noise_sigma=0.0, interference_mv=0.0, column_roll=2, gain_drift=0.3)
        roll, gain = session_transform(cfg, 1, 2)
        assert roll == 2 and np.all(np.abs(gain - 1) <= 0.3)
        for g in range(cfg.gestures):
            s1 = synthesize_trial(cfg, 1, 1, g, 1)
            s2 = synthesize_trial(cfg, 1, 2, g, 1)
            np.testing.assert_allclose(s2.frames, apply_session_shift(s1.frames, roll, gain), rtol=1e-6, atol=1e-6)

    def test_interference_is_filtered_out(self):
        noisy = synthesize_trial(tiny_config(frames_per_trial=1000, noise_sigma=0.0), 1, 1, 0, 1)
        clean = synthesize_trial(tiny_config(frames_per_trial=1000, noise_sigma=0.0, interference_mv=0.0), 1, 1, 0, 1)
        a, b = trial_to_images(noisy).images, trial_to_images(clean).images
        assert np.max(np.abs(a - b)) <= 1.0

    def test_calibrated_difficulty(self):
        # frozen from the nearest-template oracle on raw session-1 frames
        cfg = SyntheticConfig(subjects=[1], sessions=[1])
        templates = subject_templates(cfg, 1)
        scores = [
            nearest_template_accuracy(t.frames, np.full(t.num_frames, t.gesture), templates) for t in iter_trials(cfg)
        ]
        assert np.mean(scores) == pytest.approx(0.900025, abs=1e-9)
