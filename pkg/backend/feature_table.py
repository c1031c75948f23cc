"""HRV・EEG のエポック特徴量をステージと結合したロング形式テーブル。

行 = (被験者, エポック)。C3・C4・ECG の3つがすべて有効なスコア済みエポックだけを残し、
プールした hf_norm で Yeo-Johnson の λ を1回だけ推定して hf_yj 列を作る。
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize, stats

from ecg_hrv import HrvEpoch
from edf_io import SCORED_STAGES, Hypnogram, SleepStage
from eeg_bands import BAND_NAMES, EegEpoch
from shared import atomic_write_text

logger = logging.getLogger(__name__)

ELECTRODES = ("C3", "C4")
LAMBDA_BOUNDS = (-5.0, 5.0)
MIN_FIT_VALUES = 10
CSV_FLOAT_FORMAT = "%.10g"


def feature_column(electrode: str, band: str) -> str:
    return f"{electrode.lower()}_{band.lower()}"


def eeg_columns(electrodes=ELECTRODES, bands=BAND_NAMES) -> list[str]:
    return [feature_column(e, b) for e in electrodes for b in bands]


TABLE_COLUMNS = ["subject", "epoch", "stage", *eeg_columns(), "hf_abs", "hf_norm", "hf_yj"]


# ── Yeo-Johnson ───────────────────────────────────────────

def yeo_johnson(x, lmbda: float):
    """x ≥ 0 は ((x+1)^λ − 1)/λ、x < 0 は −((1−x)^(2−λ) − 1)/(2−λ)。λ=0, 2 は対数の枝。"""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("yeo_johnson needs finite input")
    out = stats.yeojohnson(arr, lmbda=float(lmbda))
    return float(out) if np.ndim(x) == 0 else out


def inverse_yeo_johnson(y, lmbda: float):
    arr = np.asarray(y, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    lam = float(lmbda)
    with np.errstate(invalid="ignore", divide="ignore"):
        if abs(lam) < np.spacing(1.0):
            out[pos] = np.expm1(arr[pos])
        else:
            out[pos] = np.expm1(np.log1p(lam * arr[pos]) / lam)
        if abs(lam - 2.0) < np.spacing(1.0):
            out[~pos] = -np.expm1(-arr[~pos])
        else:
            out[~pos] = -np.expm1(np.log1p(-(2.0 - lam) * arr[~pos]) / (2.0 - lam))
    return float(out) if np.ndim(y) == 0 else out


def fit_lambda(values) -> float:
    """変換後の正規対数尤度（ヤコビアン込み）を最大にする λ を [−5, 5] で探す。"""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size < MIN_FIT_VALUES:
        raise ValueError(f"need at least {MIN_FIT_VALUES} values to fit lambda, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("lambda fit needs finite values")
    if np.ptp(x) == 0:
        logger.warning("constant response; using lambda = 1 (identity transform)")
        return 1.0
    result = optimize.minimize_scalar(
        lambda lam: -stats.yeojohnson_llf(lam, x),
        bounds=LAMBDA_BOUNDS,
        method="bounded",
        options={"xatol": 1e-6},
    )
    return float(result.x)


# ── テーブル ──────────────────────────────────────────────

@dataclass(frozen=True)
class SubjectFeatures:
    """1被験者ぶんのエポック特徴量（テーブル結合の入力）。"""

    subject_id: str
    hypnogram: Hypnogram
    hrv: list[HrvEpoch]
    eeg: dict[str, list[EegEpoch]]


@dataclass(frozen=True)
class FeatureRow:
    subject_id: str
    epoch_index: int
    stage: SleepStage
    eeg: dict[str, float]
    hf_abs: float
    hf_norm: float
    hf_transformed: float


@dataclass
class FeatureTable:
    frame: pd.DataFrame
    lambda_yj: float
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def subjects(self) -> list[str]:
        return list(dict.fromkeys(self.frame["subject"]))

    @property
    def electrodes(self) -> tuple[str, ...]:
        present = {c.split("_", 1)[0].upper() for c in self.frame.columns if "_" in c and not c.startswith("hf_")}
        return tuple(e for e in ELECTRODES if e in present)

    def rows(self):
        feature_cols = [c for c in self.frame.columns if c not in ("subject", "epoch", "stage", "hf_abs", "hf_norm", "hf_yj")]
        for rec in self.frame.itertuples(index=False):
            values = rec._asdict()
            yield FeatureRow(
                subject_id=values["subject"],
                epoch_index=int(values["epoch"]),
                stage=SleepStage(int(values["stage"])),
                eeg={c: float(values[c]) for c in feature_cols},
                hf_abs=float(values["hf_abs"]),
                hf_norm=float(values["hf_norm"]),
                hf_transformed=float(values["hf_yj"]),
            )


def _subject_rows(item: SubjectFeatures, electrodes, bands) -> tuple[list[dict], dict[str, int]]:
    dropped = {"unscored": 0, "invalid_hrv": 0, "invalid_eeg": 0}
    hrv = {e.epoch_index: e for e in item.hrv}
    eeg = {name: {e.epoch_index: e for e in item.eeg.get(name, [])} for name in electrodes}
    rows = []
    for index, stage in enumerate(item.hypnogram.stages):
        if stage not in SCORED_STAGES:
            dropped["unscored"] += 1
            continue
        h = hrv.get(index)
        if h is None or not h.valid:
            dropped["invalid_hrv"] += 1
            continue
        per_electrode = [eeg[name].get(index) for name in electrodes]
        if any(e is None or not e.valid for e in per_electrode):
            dropped["invalid_eeg"] += 1
            continue
        row = {"subject": item.subject_id, "epoch": index, "stage": int(stage)}
        for name, epoch in zip(electrodes, per_electrode):
            for band in bands:
                row[feature_column(name, band)] = epoch.rel_power[band]
        row.update({"hf_abs": h.hf_abs, "hf_norm": h.hf_norm})
        rows.append(row)
    return rows, dropped


def build_table(subjects: list[SubjectFeatures], exclusions=(), electrodes=ELECTRODES,
                bands=BAND_NAMES, provenance: dict | None = None) -> FeatureTable:
    """内部結合して無効・未スコアのエポックを落とし、λ を推定して hf_yj を埋める。"""
    excluded = set(exclusions)
    rows: list[dict] = []
    for item in sorted(subjects, key=lambda s: s.subject_id):
        if item.subject_id in excluded:
            logger.info("%s excluded from the feature table", item.subject_id)
            continue
        subject_rows, dropped = _subject_rows(item, electrodes, bands)
        logger.info("%s: %d rows (dropped %s)", item.subject_id, len(subject_rows),
                    ", ".join(f"{k}={v}" for k, v in dropped.items()))
        rows.extend(subject_rows)
    if not rows:
        raise ValueError("no analyzable rows")

    columns = ["subject", "epoch", "stage", *eeg_columns(electrodes, bands), "hf_abs", "hf_norm"]
    frame = pd.DataFrame(rows, columns=columns)
    frame = frame.sort_values(["subject", "epoch"], kind="mergesort").reset_index(drop=True)
    lam = fit_lambda(frame["hf_norm"].to_numpy())
    frame["hf_yj"] = yeo_johnson(frame["hf_norm"].to_numpy(), lam)
    logger.info("feature table: %d rows, %d subjects, lambda=%.6f", len(frame), frame["subject"].nunique(), lam)
    return FeatureTable(frame=frame, lambda_yj=lam, provenance=dict(provenance or {}))


def table_to_csv_text(table: FeatureTable) -> str:
    frame = table.frame.copy()
    frame["stage"] = frame["stage"].astype(int)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return buffer.getvalue()


def write_table_csv(table: FeatureTable, path: Path) -> None:
    atomic_write_text(Path(path), table_to_csv_text(table))


def read_table_csv(path: Path, lambda_yj: float | None = None) -> FeatureTable:
    path = Path(path)
    frame = pd.read_csv(path, dtype={"subject": str})
    missing = {"subject", "epoch", "stage", "hf_abs", "hf_norm", "hf_yj"} - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: not a feature table (missing {sorted(missing)})")
    bad = ~frame["stage"].isin([int(s) for s in SCORED_STAGES])
    if bad.any():
        raise ValueError(f"{path}: stage codes outside 0-4 at rows {list(frame.index[bad][:5])}")
    lam = lambda_yj if lambda_yj is not None else fit_lambda(frame["hf_norm"].to_numpy())
    return FeatureTable(frame=frame, lambda_yj=float(lam), provenance={"source": str(path)})


def stage_epoch_counts(table: FeatureTable, epoch_len_s: float = 30.0) -> pd.DataFrame:
    """被験者 × ステージのエポック数と経過時間（分）。欠けたセルは 0。"""
    counts = table.frame.groupby(["subject", "stage"]).size().unstack(fill_value=0)
    counts = counts.reindex(columns=[int(s) for s in SCORED_STAGES], fill_value=0)
    long = counts.stack().rename("n_epochs").reset_index()
    long["stage_name"] = [SleepStage(int(s)).label for s in long["stage"]]
    long["minutes"] = long["n_epochs"] * epoch_len_s / 60.0
    return long[["subject", "stage", "stage_name", "n_epochs", "minutes"]]


def subject_stage_means(table: FeatureTable, column: str) -> pd.DataFrame:
    if column not in table.frame.columns:
        raise KeyError(column)
    means = table.frame.groupby(["subject", "stage"], sort=True)[column].mean().rename("mean").reset_index()
    means["stage_name"] = [SleepStage(int(s)).label for s in means["stage"]]
    return means[["subject", "stage", "stage_name", "mean"]]
