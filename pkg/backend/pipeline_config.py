"""パイプライン設定（TOML → pydantic）と実行マニフェスト。

解析の数値パラメータはすべて既定値としてここに置き、`data/bhc.example.toml` にも
同じ値を明記する（既定からのずれが設定ファイル上で見えるように）。
"""
from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from shared import config_hash

TOOL_VERSION = "0.3.0"
STAGE_NAMES = ("Wake", "N1", "N2", "N3", "REM")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BandDef(_Section):
    name: str
    lo_hz: float
    hi_hz: float

    @model_validator(mode="after")
    def _check(self):
        if not 0 <= self.lo_hz < self.hi_hz:
            raise ValueError(f"band {self.name}: need 0 <= lo < hi")
        return self


DEFAULT_BANDS = (
    BandDef(name="Delta", lo_hz=1.0, hi_hz=4.0),
    BandDef(name="Theta", lo_hz=4.0, hi_hz=8.0),
    BandDef(name="Alpha", lo_hz=8.0, hi_hz=12.0),
    BandDef(name="Beta", lo_hz=12.0, hi_hz=30.0),
    BandDef(name="Gamma", lo_hz=30.0, hi_hz=80.0),
)


class DatasetConfig(_Section):
    manifest: Path | None = None
    epoch_len_s: float = Field(30.0, gt=0)
    electrodes: tuple[str, ...] = ("C3", "C4")
    ecg_channel: str = "ECG"


class EcgConfig(_Section):
    baseline_windows_s: tuple[float, float] = (0.8, 1.25)
    norm_window_s: float = Field(2.0, gt=0)
    edge_pad_s: float = Field(1.0, ge=0)
    dedupe_gap_s: float = Field(0.2, ge=0)
    qrs_low_hz: float = 5.0
    qrs_high_hz: float = 15.0
    integration_window_s: float = 0.15
    refractory_s: float = 0.2
    searchback_factor: float = 1.66
    t_wave_window_s: float = 0.36
    interp_rate_hz: float = Field(4.0, gt=0)
    filter_order: int = Field(4, ge=1)
    band_low_hz: float = 0.04
    band_high_hz: float = 0.4
    zero_phase: bool = False
    hf_low_hz: float = 0.15
    hf_high_hz: float = 0.4
    modwpt_level: int = Field(4, ge=1, le=8)
    wavelet: Literal["db2"] = "db2"
    min_beats: int = Field(10, ge=3)
    rri_min_ms: float = 300.0
    rri_max_ms: float = 2000.0

    @model_validator(mode="after")
    def _check(self):
        nyquist = self.interp_rate_hz / 2
        if not 0 < self.band_low_hz < self.band_high_hz < nyquist:
            raise ValueError("ecg band must satisfy 0 < low < high < interp_rate/2")
        if not self.band_low_hz <= self.hf_low_hz < self.hf_high_hz <= self.band_high_hz:
            raise ValueError("HF band must lie inside the normalization band")
        if not 0 < self.qrs_low_hz < self.qrs_high_hz:
            raise ValueError("QRS band must satisfy 0 < low < high")
        if not 0 < self.rri_min_ms < self.rri_max_ms:
            raise ValueError("RRI gate must satisfy 0 < min < max")
        return self


class EegConfig(_Section):
    bands: tuple[BandDef, ...] = DEFAULT_BANDS
    seg_len_s: float = Field(4.0, gt=0)
    overlap_frac: float = Field(0.5, ge=0, lt=1)
    window: Literal["hann"] = "hann"
    average: Literal["median", "mean"] = "median"
    total_range_hz: tuple[float, float] = (1.0, 80.0)

    @field_validator("bands")
    @classmethod
    def _ordered(cls, bands):
        for prev, cur in zip(bands, bands[1:]):
            if cur.lo_hz < prev.hi_hz:
                raise ValueError(f"bands {prev.name} and {cur.name} overlap or are out of order")
        return bands

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.total_range_hz
        if not 0 <= lo < hi:
            raise ValueError("total_range_hz must satisfy 0 <= lo < hi")
        return self


class ModelConfig(_Section):
    per_electrode: bool = True
    reference_stage: Literal["Wake"] = "Wake"
    max_iter: int = Field(4000, ge=10)
    xtol: float = Field(1e-10, gt=0)
    alpha: float = Field(0.05, gt=0, lt=1)


class ClusterConfig(_Section):
    stages: tuple[str, ...] = ("N2", "REM")
    k: dict[str, int] = Field(default_factory=lambda: {"N2": 3, "REM": 4})
    linkage: Literal["ward", "average", "complete"] = "ward"
    k_max: int = Field(10, ge=2)
    cap_per_subject: int | None = Field(None, ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    top_n: int = Field(5, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        for stage in (*self.stages, *self.k):
            if stage not in STAGE_NAMES:
                raise ValueError(f"unknown stage {stage!r}; expected one of {STAGE_NAMES}")
        for stage in self.stages:
            if self.k.get(stage, 2) < 1:
                raise ValueError(f"k for {stage} must be positive")
        return self


class RunConfig(_Section):
    output_dir: Path | None = None
    jobs: int = Field(1, ge=1, le=256)
    seed: int = 0


class PipelineConfig(_Section):
    dataset: DatasetConfig = DatasetConfig()
    ecg: EcgConfig = EcgConfig()
    eeg: EegConfig = EegConfig()
    model: ModelConfig = ModelConfig()
    cluster: ClusterConfig = ClusterConfig()
    run: RunConfig = RunConfig()

    def hash(self) -> str:
        """計算結果に効く設定だけのハッシュ。run（並列度・出力先）と manifest の場所は含めない。"""
        payload = self.model_dump(mode="json", exclude={"run": True, "dataset": {"manifest"}})
        return config_hash(payload)

    def with_overrides(self, *, output_dir: Path | None = None, jobs: int | None = None,
                       seed: int | None = None) -> "PipelineConfig":
        run = self.run.model_copy(update={
            key: value for key, value in
            (("output_dir", output_dir), ("jobs", jobs), ("seed", seed)) if value is not None
        })
        return self.model_copy(update={"run": RunConfig.model_validate(run.model_dump())})


def _resolve_paths(raw: dict, base: Path) -> dict:
    dataset = raw.get("dataset") or {}
    if dataset.get("manifest"):
        manifest = Path(dataset["manifest"]).expanduser()
        dataset["manifest"] = str(manifest if manifest.is_absolute() else (base / manifest).resolve())
    run = raw.get("run") or {}
    if run.get("output_dir"):
        out = Path(run["output_dir"]).expanduser()
        run["output_dir"] = str(out if out.is_absolute() else (base / out).resolve())
    return raw


def load_config(path: Path | None) -> PipelineConfig:
    """TOML を読んで検証する。path が None なら全て既定値。相対パスは設定ファイル基準。"""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as handle:
        raw = tomllib.load(handle)
    return PipelineConfig.model_validate(_resolve_paths(raw, path.parent.resolve()))


class RunManifest(BaseModel):
    """コマンドごとに追記・上書きされる実行記録。末尾でアトミックに書く。"""

    model_config = ConfigDict(extra="forbid")

    config_hash: str
    tool_version: str = TOOL_VERSION
    commands: list[str] = Field(default_factory=list)
    row_counts: dict[str, int] = Field(default_factory=dict)
    timings_s: dict[str, float] = Field(default_factory=dict)
    warnings: list[str] = Field(default_factory=list)
    errors: dict[str, str] = Field(default_factory=dict)
    outputs: dict[str, str] = Field(default_factory=dict)
    resources: dict[str, float] = Field(default_factory=dict)
