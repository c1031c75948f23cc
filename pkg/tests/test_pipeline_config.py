from __future__ import annotations

import pytest
from pydantic import ValidationError

from conftest import write_config
from paths import EXAMPLE_CONFIG_FILE
from pipeline_config import (
    DEFAULT_BANDS,
    ClusterConfig,
    EcgConfig,
    EegConfig,
    ModelConfig,
    PipelineConfig,
    RunManifest,
    load_config,
)


def test_defaults_carry_the_analysis_parameters():
    config = PipelineConfig()
    assert config.ecg.modwpt_level == 4
    assert config.ecg.wavelet == "db2"
    assert (config.ecg.hf_low_hz, config.ecg.hf_high_hz) == (0.15, 0.4)
    assert [b.name for b in config.eeg.bands] == ["Delta", "Theta", "Alpha", "Beta", "Gamma"]
    assert config.eeg.seg_len_s == 4.0 and config.eeg.overlap_frac == 0.5
    assert dict(config.cluster.k) == {"N2": 3, "REM": 4}
    assert config.run.jobs == 1


def test_example_config_only_widens_the_denominator():
    config = load_config(EXAMPLE_CONFIG_FILE)
    assert config.eeg.total_range_hz == (0.5, 100.0)
    assert config.eeg.bands == DEFAULT_BANDS
    assert config.ecg == EcgConfig()
    assert config.model == ModelConfig()
    assert config.cluster == ClusterConfig()
    assert config.dataset.manifest.name == "manifest.csv"
    assert config.dataset.manifest.is_absolute()


def test_missing_file_and_no_file():
    assert load_config(None) == PipelineConfig()
    with pytest.raises(FileNotFoundError):
        load_config(EXAMPLE_CONFIG_FILE.with_name("nope.toml"))


@pytest.mark.parametrize(
    "sections",
    [
        {"ecg": {"hf_low_hz": 0.01}},
        {"ecg": {"band_high_hz": 2.5}},
        {"ecg": {"rri_min_ms": 2500.0}},
        {"ecg": {"wavelet": "sym4"}},
        {"eeg": {"total_range_hz": [40.0, 1.0]}},
        {"cluster": {"stages": ["N4"]}},
        {"run": {"jobs": 0}},
        {"model": {"unknown_key": 1}},
    ],
)
def test_invalid_settings_are_rejected(tmp_path, sections):
    with pytest.raises(ValidationError):
        load_config(write_config(tmp_path / "bhc.toml", **sections))


def test_overlapping_bands_are_rejected():
    with pytest.raises(ValidationError, match="overlap"):
        EegConfig(bands=[{"name": "A", "lo_hz": 1, "hi_hz": 5}, {"name": "B", "lo_hz": 4, "hi_hz": 8}])


def test_relative_paths_follow_the_config_file(tmp_path):
    (tmp_path / "cfg").mkdir()
    path = tmp_path / "cfg" / "bhc.toml"
    path.write_text('[dataset]\nmanifest = "../data/manifest.csv"\n[run]\noutput_dir = "out"\n',
                    encoding="utf-8")
    config = load_config(path)
    assert config.dataset.manifest == (tmp_path / "data" / "manifest.csv").resolve()
    assert config.run.output_dir == (tmp_path / "cfg" / "out").resolve()


def test_hash_ignores_where_and_how_fast_it_runs(tmp_path):
    base = PipelineConfig()
    moved = base.with_overrides(output_dir=tmp_path, jobs=4, seed=9)
    assert moved.run.jobs == 4 and moved.run.seed == 9
    assert moved.hash() == base.hash()

    other_manifest = load_config(write_config(tmp_path / "a.toml", manifest=tmp_path / "m.csv",
                                              eeg={"total_range_hz": [1.0, 80.0]}))
    assert other_manifest.hash() == base.hash()
    assert PipelineConfig(eeg=EegConfig(total_range_hz=(0.5, 100.0))).hash() != base.hash()


def test_overrides_are_validated():
    with pytest.raises(ValidationError):
        PipelineConfig().with_overrides(jobs=0)


def test_sections_are_frozen():
    with pytest.raises(ValidationError):
        PipelineConfig().run.jobs = 3


def test_run_manifest_rejects_unknown_fields():
    manifest = RunManifest(config_hash="abc")
    assert manifest.tool_version
    with pytest.raises(ValidationError):
        RunManifest(config_hash="abc", surprise=1)
