from __future__ import annotations

import logging

import numpy as np
import pytest

from edf_io import ChannelSignal, Hypnogram, Recording, SleepStage
from eeg_bands import BAND_NAMES, eeg_debug_frame, epoch_band_powers, process_eeg
from pipeline_config import EegConfig

FS = 256.0
N = int(30 * FS)


def test_alpha_sine_lands_in_alpha():
    t = np.arange(N) / FS
    epoch = epoch_band_powers(np.sin(2 * np.pi * 10.0 * t), FS)
    assert epoch.valid
    assert epoch.rel_power["Alpha"] >= 0.95


def test_white_noise_spreads_by_bandwidth(rng):
    config = EegConfig()
    fractions = np.array([
        [epoch_band_powers(rng.standard_normal(N), FS, config).rel_power[b.name] for b in config.bands]
        for _ in range(100)
    ]).mean(axis=0)
    expected = np.array([(b.hi_hz - b.lo_hz) / 79.0 for b in config.bands])
    assert np.max(np.abs(fractions - expected)) <= 0.01


def test_bands_tile_the_default_denominator(rng):
    epoch = epoch_band_powers(rng.standard_normal(N), FS)
    assert sum(epoch.rel_power.values()) == pytest.approx(1.0, abs=1e-9)


def test_wider_denominator_leaves_room_outside_the_bands(rng):
    epoch = epoch_band_powers(rng.standard_normal(N), FS, EegConfig(total_range_hz=(0.5, 100.0)))
    total = sum(epoch.rel_power.values())
    assert 0.5 < total < 0.99


@pytest.mark.parametrize(
    ("window", "reason"),
    [
        (np.zeros(N), "flat"),
        (np.full(N, np.nan), "non_finite"),
        (np.ones(200), "too_short"),
    ],
)
def test_unusable_windows_are_flagged(window, reason):
    epoch = epoch_band_powers(window, FS, epoch_index=4, electrode="C4")
    assert not epoch.valid
    assert epoch.reason == reason
    assert epoch.epoch_index == 4 and epoch.electrode == "C4"
    assert all(np.isnan(v) for v in epoch.rel_power.values())


def test_process_eeg_uses_the_referenced_channel(short_subject):
    recording, _ = short_subject
    epochs = process_eeg(recording, "C3")
    assert len(epochs) == recording.n_epochs
    assert all(e.valid and e.electrode == "C3" for e in epochs)
    frame = eeg_debug_frame(recording.subject_id, epochs)
    assert list(frame.columns) == ["subject", "epoch", "electrode", *(b.lower() for b in BAND_NAMES),
                                   "total_abs", "valid"]


def test_bands_above_nyquist_are_warned(caplog, rng):
    fs = 128.0
    recording = Recording(
        "L01",
        (ChannelSignal("C3", rng.standard_normal(int(60 * fs)), fs),),
        hypnogram=Hypnogram(30.0, (SleepStage.N2, SleepStage.N2)),
    )
    with caplog.at_level(logging.WARNING, logger="eeg_bands"):
        epochs = process_eeg(recording, "C3")
    assert "Nyquist" in caplog.text
    assert all(e.valid for e in epochs)


def test_missing_electrode_is_an_error(short_subject):
    recording, _ = short_subject
    with pytest.raises(ValueError):
        process_eeg(Recording(recording.subject_id, recording.channels[2:], recording.hypnogram), "C4")
