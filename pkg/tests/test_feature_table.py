from __future__ import annotations

import logging

import numpy as np
import pandas as pd
import pytest

from ecg_hrv import HrvEpoch
from edf_io import Hypnogram, SleepStage
from eeg_bands import BAND_NAMES, EegEpoch
from feature_table import (
    TABLE_COLUMNS,
    FeatureTable,
    SubjectFeatures,
    build_table,
    fit_lambda,
    inverse_yeo_johnson,
    read_table_csv,
    stage_epoch_counts,
    subject_stage_means,
    table_to_csv_text,
    write_table_csv,
    yeo_johnson,
)
from pipeline_config import EegConfig

STAGE_CYCLE = (SleepStage.WAKE, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM)


def _subject(sid: str, rng, n: int = 15, unscored=(), bad_hrv=(), bad_eeg=()) -> SubjectFeatures:
    stages = tuple(SleepStage.UNSCORED if i in unscored else STAGE_CYCLE[i % 5] for i in range(n))
    hrv, eeg = [], {"C3": [], "C4": []}
    for i in range(n):
        if i in bad_hrv:
            hrv.append(HrvEpoch.invalid(i, 3, "insufficient_beats"))
        else:
            norm = float(rng.uniform(0.05, 0.95))
            hrv.append(HrvEpoch(i, 100.0 * norm, 100.0, norm, 30, True))
        for name in eeg:
            if i in bad_eeg:
                eeg[name].append(EegEpoch.invalid(i, name, EegConfig().bands, "flat"))
            else:
                powers = rng.dirichlet(np.ones(6))[:5]
                eeg[name].append(EegEpoch(i, name, dict(zip(BAND_NAMES, powers)), 1.0))
    return SubjectFeatures(sid, Hypnogram(30.0, stages), hrv, eeg)


@pytest.mark.parametrize("x", [-3.0, -0.5, 0.0, 0.25, 4.0])
def test_yeo_johnson_branch_identities(x):
    assert yeo_johnson(x, 1.0) == pytest.approx(x, abs=1e-12)
    if x >= 0:
        assert yeo_johnson(x, 0.0) == pytest.approx(np.log1p(x), abs=1e-12)
        assert yeo_johnson(x, 2.0) == pytest.approx(((x + 1) ** 2 - 1) / 2, abs=1e-12)
    else:
        assert yeo_johnson(x, 0.0) == pytest.approx(-((1 - x) ** 2 - 1) / 2, abs=1e-12)
        assert yeo_johnson(x, 2.0) == pytest.approx(-np.log1p(-x), abs=1e-12)


@pytest.mark.parametrize("lmbda", [-1.5, 0.0, 0.5, 1.0, 2.0, 3.2])
def test_inverse_yeo_johnson_round_trip(lmbda):
    x = np.linspace(-4.0, 4.0, 81)
    assert np.max(np.abs(inverse_yeo_johnson(yeo_johnson(x, lmbda), lmbda) - x)) <= 1e-9


def test_lambda_of_normal_data_is_near_one(rng):
    assert 0.9 <= fit_lambda(rng.standard_normal(10_000)) <= 1.1


def test_lambda_of_skewed_data_pulls_towards_symmetry(rng):
    assert fit_lambda(rng.lognormal(0.0, 1.0, 2000)) < 0.5


def test_constant_values_fall_back_to_identity(caplog):
    with caplog.at_level(logging.WARNING, logger="feature_table"):
        assert fit_lambda(np.full(20, 0.4)) == 1.0
    assert "constant" in caplog.text


def test_lambda_needs_enough_values():
    with pytest.raises(ValueError):
        fit_lambda(np.arange(5.0))


def test_build_table_drops_invalid_and_unscored_epochs(rng):
    a = _subject("B", rng, unscored={0}, bad_hrv={1, 2}, bad_eeg={3})
    b = _subject("A", rng)
    c = _subject("C", rng)

    table = build_table([a, b, c], exclusions={"C"})

    assert list(table.frame.columns) == TABLE_COLUMNS
    assert table.subjects == ["A", "B"]
    assert len(table) == 15 + 11
    b_rows = table.frame[table.frame["subject"] == "B"]
    assert b_rows["epoch"].tolist() == list(range(4, 15))
    assert table.frame["stage"].isin([int(s) for s in STAGE_CYCLE]).all()
    assert np.allclose(table.frame["hf_yj"], yeo_johnson(table.frame["hf_norm"].to_numpy(), table.lambda_yj))
    assert table.electrodes == ("C3", "C4")


def test_rows_expose_typed_records(rng):
    table = build_table([_subject("A", rng)])
    row = next(table.rows())
    assert row.subject_id == "A"
    assert row.stage is SleepStage.WAKE
    assert set(row.eeg) == {c for c in TABLE_COLUMNS if c[:3] in ("c3_", "c4_")}


def test_empty_join_is_an_error(rng):
    with pytest.raises(ValueError, match="no analyzable rows"):
        build_table([_subject("A", rng, n=5, bad_hrv=set(range(5)))])


def test_csv_round_trip_is_byte_stable(tmp_path, rng):
    table = build_table([_subject("A", rng), _subject("B", rng)])
    path = tmp_path / "features.csv"
    write_table_csv(table, path)
    text = path.read_text(encoding="utf-8")
    again = read_table_csv(path)

    assert "\r" not in text
    assert text.splitlines()[0] == ",".join(TABLE_COLUMNS)
    assert table_to_csv_text(again) == text
    assert again.lambda_yj == pytest.approx(table.lambda_yj, abs=1e-4)
    assert np.allclose(again.frame["hf_norm"], table.frame["hf_norm"], rtol=1e-9)


def test_read_rejects_unknown_stage_codes(tmp_path, rng):
    table = build_table([_subject("A", rng)])
    frame = table.frame.copy()
    frame.loc[0, "stage"] = 9
    write_table_csv(FeatureTable(frame, table.lambda_yj), tmp_path / "bad.csv")
    with pytest.raises(ValueError, match="stage codes"):
        read_table_csv(tmp_path / "bad.csv")


def test_stage_epoch_counts_fill_missing_stages(feature_frame):
    frame = feature_frame[~((feature_frame["subject"] == "S00") & (feature_frame["stage"] == 3))]
    counts = stage_epoch_counts(FeatureTable(frame, 1.0), epoch_len_s=30.0)

    assert len(counts) == 6 * 5
    missing = counts[(counts["subject"] == "S00") & (counts["stage_name"] == "N3")]
    assert missing["n_epochs"].item() == 0
    full = counts[(counts["subject"] == "S01") & (counts["stage_name"] == "REM")]
    assert full["n_epochs"].item() == 8
    assert full["minutes"].item() == pytest.approx(4.0)


def test_subject_stage_means_match_groupby(feature_frame):
    means = subject_stage_means(FeatureTable(feature_frame, 1.0), "c3_delta")
    expected = feature_frame.groupby(["subject", "stage"])["c3_delta"].mean()
    assert len(means) == len(expected)
    row = means.iloc[0]
    assert row["mean"] == pytest.approx(expected.loc[(row["subject"], row["stage"])])
    with pytest.raises(KeyError):
        subject_stage_means(FeatureTable(pd.DataFrame(feature_frame), 1.0), "nope")
