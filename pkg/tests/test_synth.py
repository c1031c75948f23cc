from __future__ import annotations

import json

import numpy as np
import pytest

from edf_io import SCORED_STAGES, SleepStage, iter_manifest, load_recording
from stats_lmm import ModelSpec, build_design
from synth import (
    PROFILES,
    generate_subject,
    make_hypnogram,
    simulate_mixed_table,
    subtype_feature_table,
    write_dataset,
)


def test_hypnogram_contains_every_scored_stage():
    stages = make_hypnogram(np.random.default_rng(1), 120)
    assert len(stages) == 120
    assert set(stages) == set(SCORED_STAGES)
    assert stages[0] is SleepStage.WAKE


def test_subjects_are_reproducible():
    a, truth_a = generate_subject(seed=5, index=1, hours=0.05)
    b, truth_b = generate_subject(seed=5, index=1, hours=0.05)
    c, _ = generate_subject(seed=6, index=1, hours=0.05)
    assert a.subject_id == "SYN002"
    assert truth_a == truth_b
    for x, y in zip(a.channels, b.channels):
        assert np.array_equal(x.samples, y.samples)
    assert not np.array_equal(a.channels[0].samples, c.channels[0].samples)


def test_truth_beats_lie_inside_the_recording(short_subject):
    recording, truth = short_subject
    beats = np.asarray(truth["beat_times_s"])
    assert truth["n_beats"] == beats.size
    assert np.all(np.diff(beats) > 0.3)
    assert 0.0 <= beats[0] and beats[-1] < recording.duration_s
    # 毎分 55〜80 拍程度
    assert 55 <= beats.size / (recording.duration_s / 60.0) <= 80


def test_mini_dataset_layout(mini_dataset):
    entries = list(iter_manifest(mini_dataset))
    assert [e.subject_id for e in entries] == ["SYN001", "SYN002", "SYN003"]
    assert all(e.excluded is None for e in entries)

    recording = load_recording(entries[0].subject_id, entries[0].edf_path, entries[0].hypnogram_path)
    assert recording.n_epochs == 120
    assert recording.labels == ["EEG C3-M2", "EEG C4-M1", "ECG"]

    truth = json.loads((mini_dataset.parent / "truth.json").read_text(encoding="utf-8"))
    assert truth["profile"] == "mini"
    assert set(truth["subjects"]) == {"SYN001", "SYN002", "SYN003"}


def test_deep_sleep_has_more_delta_than_wake(mini_dataset):
    truth = json.loads((mini_dataset.parent / "truth.json").read_text(encoding="utf-8"))
    for subject in truth["subjects"].values():
        stages = np.asarray(subject["stages"])
        delta = np.asarray(subject["band_fractions"]["C3"])[:, 0]
        assert delta[stages == int(SleepStage.N3)].mean() > delta[stages == int(SleepStage.WAKE)].mean()


def test_unknown_profile_is_rejected(tmp_path):
    assert set(PROFILES) == {"night", "mini"}
    with pytest.raises(ValueError, match="profile"):
        write_dataset(tmp_path, profile="week")


def test_mixed_table_uses_the_model_design():
    frame, beta = simulate_mixed_table(3, n_subjects=5, epochs_per_subject=50)
    again, _ = simulate_mixed_table(3, n_subjects=5, epochs_per_subject=50)
    design = build_design(frame, ModelSpec(electrodes=("C3",)))

    assert len(frame) == 250
    assert set(beta) == set(design.column_names)
    assert np.array_equal(frame["hf_yj"], again["hf_yj"])


def test_subtype_table_shape():
    frame, labels, propensity = subtype_feature_table(seed=2, n_subjects=4, epochs_per_subject=10, k=4)
    assert len(frame) == labels.size == 40
    assert set(labels.tolist()) <= {0, 1, 2, 3}
    assert all(p.sum() == pytest.approx(1.0) for p in propensity.values())
    with pytest.raises(ValueError):
        subtype_feature_table(seed=0, k=5)
