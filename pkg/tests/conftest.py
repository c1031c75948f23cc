"""共通フィクスチャ。backend/ を import パスに載せる（backend のスクリプトと同じやり方）。"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

BACKEND_DIR = Path(__file__).resolve().parent.parent / "backend"
sys.path.insert(0, str(BACKEND_DIR))

import synth  # noqa: E402
from edf_io import SleepStage  # noqa: E402
from feature_table import eeg_columns  # noqa: E402

FIXTURES_DIR = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def short_subject():
    """6 エポック（3 分）の合成記録と正解。"""
    return synth.generate_subject(seed=3, index=0, hours=0.05)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory) -> Path:
    """mini プロファイル（1 h × 3 人）の EDF 一式。manifest.csv のパスを返す。"""
    out = tmp_path_factory.mktemp("synth_mini")
    return synth.write_dataset(out, seed=0, profile="mini")


def random_feature_frame(rng: np.random.Generator, n_subjects: int = 6, epochs: int = 40) -> pd.DataFrame:
    """全ステージを含む、モデル・クラスタ・図の入力に使える乱数テーブル。"""
    rows = []
    stages = [int(s) for s in (SleepStage.WAKE, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM)]
    for s in range(n_subjects):
        for e in range(epochs):
            powers = rng.dirichlet([4.0, 2.0, 2.0, 3.0, 1.0, 2.0], size=2)[:, :5].ravel()
            row = {"subject": f"S{s:02d}", "epoch": e, "stage": stages[e % len(stages)]}
            row.update(dict(zip(eeg_columns(), powers)))
            hf_norm = float(rng.uniform(0.1, 0.9))
            row.update({"hf_abs": float(rng.lognormal(10, 0.5)), "hf_norm": hf_norm, "hf_yj": hf_norm})
            rows.append(row)
    return pd.DataFrame(rows)


@pytest.fixture
def feature_frame(rng) -> pd.DataFrame:
    return random_feature_frame(rng)


def write_config(path: Path, manifest: Path | None = None, **sections: dict) -> Path:
    """テスト用の最小 TOML。relative power の分母は 5 帯域より広く取る。"""
    lines = []
    if manifest is not None:
        lines += ["[dataset]", f'manifest = "{manifest.as_posix()}"', ""]
    eeg = {"total_range_hz": [0.5, 100.0], **sections.pop("eeg", {})}
    sections = {"eeg": eeg, **sections}
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for key, value in values.items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = f'"{value}"'
            else:
                text = repr(list(value)) if isinstance(value, (list, tuple)) else repr(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
