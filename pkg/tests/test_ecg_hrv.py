from __future__ import annotations

import numpy as np
import pytest

from ecg_hrv import (
    HRV_DEBUG_COLUMNS,
    REASON_INSUFFICIENT_BEATS,
    REASON_NO_ECG_SIGNAL,
    REASON_OK,
    REASON_RRI_OUT_OF_RANGE,
    REASON_ZERO_POWER,
    BeatSeries,
    InsufficientBeatsError,
    dedupe_beats,
    detect_beats,
    detect_recording_beats,
    epoch_hf_power,
    hrv_debug_frame,
    match_beats,
    process_ecg,
    rri_series,
)
from dsp_core import baseline_remove, moving_minmax_norm
from edf_io import ChannelSignal, Hypnogram, Recording, SleepStage
from pipeline_config import EcgConfig
from synth import constant_rate_ecg


def _ecg_recording(samples, fs: float = 256.0, epochs: int = 4) -> Recording:
    return Recording(
        subject_id="E01",
        channels=(ChannelSignal("ECG", samples, fs),),
        hypnogram=Hypnogram(30.0, (SleepStage.N2,) * epochs),
    )


def _modulated_beats(mod_hz: float, depth_ms: float, start: float = -3.0, stop: float = 33.0) -> np.ndarray:
    times, t = [], start
    while t < stop:
        times.append(t)
        t += (1000.0 + depth_ms * np.sin(2 * np.pi * mod_hz * t)) / 1000.0
    return np.asarray(times)


def _epoch_from_beats(beats: np.ndarray, config: EcgConfig | None = None):
    inside = BeatSeries(beats).between(0.0, 30.0)
    knots, rri = rri_series(inside)
    return epoch_hf_power(knots, rri, 0, 0.0, 30.0, config, n_beats=len(inside))


@pytest.mark.parametrize("bpm", [60, 75, 90])
@pytest.mark.parametrize("wander_mv", [0.0, 0.3])
def test_beat_detection_on_clean_ecg(bpm, wander_mv):
    ecg, truth = constant_rate_ecg(bpm, 120.0, seed=bpm, wander_mv=wander_mv)
    beats, no_signal = detect_recording_beats(_ecg_recording(ecg))

    sensitivity, ppv, errors = match_beats(beats, truth, tol_s=0.04)
    assert not no_signal.any()
    assert sensitivity >= 0.99
    assert ppv >= 0.99
    assert np.max(np.abs(errors)) <= 0.04


def test_beats_near_window_edges_are_not_doubled():
    ecg, truth = constant_rate_ecg(75, 120.0, seed=1)
    beats, _ = detect_recording_beats(_ecg_recording(ecg))
    assert np.all(np.diff(beats.beat_times_s) >= 0.2)
    assert abs(len(beats) - truth.size) <= 1


def test_synthetic_night_beats_match_truth(short_subject):
    recording, truth = short_subject
    beats, _ = detect_recording_beats(recording)
    sensitivity, ppv, _ = match_beats(beats, truth["beat_times_s"])
    assert sensitivity >= 0.99
    assert ppv >= 0.99


def _preprocessed(ecg: np.ndarray, fs: float = 256.0) -> np.ndarray:
    config = EcgConfig()
    return moving_minmax_norm(baseline_remove(ecg, fs, config.baseline_windows_s), config.norm_window_s, fs)


def test_single_window_at_60_bpm_finds_every_beat():
    ecg, truth = constant_rate_ecg(60, 30.0, seed=6)
    beats = detect_beats(_preprocessed(ecg), 256.0)

    assert len(beats) == 30
    sensitivity, ppv, errors = match_beats(beats, truth, tol_s=0.04)
    assert sensitivity == 1.0 and ppv == 1.0
    assert np.max(np.abs(errors)) <= 0.04


def test_single_window_at_75_bpm_counts_37_or_38_beats():
    ecg, _ = constant_rate_ecg(75, 30.0, seed=7)
    assert len(detect_beats(_preprocessed(ecg), 256.0)) in (37, 38)


def test_flat_window_has_no_beats():
    assert len(detect_beats(np.full(30 * 256, 0.5), 256.0)) == 0


def test_scaling_the_intervals_keeps_normalized_hf():
    inside = BeatSeries(_modulated_beats(0.3, 40.0)).between(0.0, 30.0)
    knots, rri = rri_series(inside)
    base = epoch_hf_power(knots, rri, 0, 0.0, 30.0, n_beats=len(inside))
    scaled = epoch_hf_power(knots, 1.3 * rri, 0, 0.0, 30.0, n_beats=len(inside))

    assert base.valid and scaled.valid
    assert scaled.hf_norm == pytest.approx(base.hf_norm, abs=1e-9)
    assert scaled.hf_abs == pytest.approx(1.3 ** 2 * base.hf_abs, rel=1e-9)


def test_hf_modulation_gives_high_normalized_power():
    epoch = _epoch_from_beats(_modulated_beats(0.3, 40.0))
    assert epoch.valid and epoch.reason == REASON_OK
    assert epoch.hf_norm >= 0.9
    assert 0.0 < epoch.hf_abs <= epoch.total_abs


def test_slow_modulation_gives_low_normalized_power():
    epoch = _epoch_from_beats(_modulated_beats(0.05, 60.0))
    assert epoch.valid
    assert epoch.hf_norm <= 0.1


def test_zero_phase_option_changes_nothing_structural():
    epoch = _epoch_from_beats(_modulated_beats(0.3, 40.0), EcgConfig(zero_phase=True))
    assert epoch.valid and epoch.hf_norm >= 0.9


def test_constant_rhythm_has_zero_power():
    epoch = _epoch_from_beats(np.arange(-2.0, 33.0, 1.0))
    assert not epoch.valid
    assert epoch.reason == REASON_ZERO_POWER
    assert np.isnan(epoch.hf_norm)


def test_too_few_beats_are_gated():
    epoch = _epoch_from_beats(np.arange(0.5, 30.0, 5.0))
    assert not epoch.valid
    assert epoch.reason == REASON_INSUFFICIENT_BEATS


def test_implausible_intervals_are_gated():
    beats = np.concatenate([np.arange(0.0, 15.0, 1.0), [15.25], np.arange(16.0, 31.0, 1.0)])
    epoch = _epoch_from_beats(beats)
    assert not epoch.valid
    assert epoch.reason == REASON_RRI_OUT_OF_RANGE


def test_rri_series_knots_sit_on_the_later_beat():
    knots, rri = rri_series(BeatSeries(np.array([0.0, 1.0, 2.5])))
    assert knots.tolist() == [1.0, 2.5]
    assert rri == pytest.approx([1000.0, 1500.0])
    with pytest.raises(InsufficientBeatsError):
        rri_series(BeatSeries(np.array([0.0, 1.0])))


def test_beat_series_must_increase():
    with pytest.raises(ValueError):
        BeatSeries(np.array([1.0, 0.5]))
    assert len(BeatSeries(np.array([0.0, 1.0, 2.0])).between(0.5, 2.0)) == 1


def test_dedupe_keeps_the_first_of_close_beats():
    assert dedupe_beats([1.5, 1.0, 1.1, 1.65], 0.2).beat_times_s.tolist() == [1.0, 1.5]


def test_match_beats_counts_misses_and_extras():
    sensitivity, ppv, errors = match_beats([1.01, 2.0, 2.5, 4.2], [1.0, 2.0, 3.0, 4.0])
    assert sensitivity == 0.5
    assert ppv == 0.5
    assert errors == pytest.approx([0.01, 0.0])


def test_flat_ecg_marks_every_epoch():
    epochs = process_ecg(_ecg_recording(np.zeros(int(120 * 256))))
    assert len(epochs) == 4
    assert {e.reason for e in epochs} == {REASON_NO_ECG_SIGNAL}
    assert not any(e.valid for e in epochs)


def test_low_sample_rate_is_rejected():
    with pytest.raises(ValueError, match="Hz"):
        process_ecg(_ecg_recording(np.zeros(int(120 * 50)), fs=50.0))


def test_process_ecg_returns_one_row_per_epoch(short_subject):
    recording, _ = short_subject
    epochs = process_ecg(recording)
    frame = hrv_debug_frame(recording.subject_id, epochs)

    assert [e.epoch_index for e in epochs] == list(range(recording.n_epochs))
    assert list(frame.columns) == HRV_DEBUG_COLUMNS
    valid = [e for e in epochs if e.valid]
    assert len(valid) >= recording.n_epochs - 1
    assert all(0.0 <= e.hf_norm <= 1.0 for e in valid)
