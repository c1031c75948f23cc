"""合成データ生成。

- 一晩ぶんの PSG（C3/C4 EEG + ECG、256 Hz）とヒプノグラム、正解 JSON
- 単純な一定心拍の ECG（検出器の確認用）
- 混合モデル・クラスタリングを確かめるための特徴量テーブル

乱数はすべて numpy.random.default_rng に (seed, 被験者番号) を渡して作るので、
同じ seed なら同じバイト列になる。
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from edf_io import ChannelSignal, Hypnogram, Recording, SleepStage, format_hypnogram, write_edf
from feature_table import eeg_columns
from pipeline_config import DEFAULT_BANDS
from shared import atomic_write_bytes, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 256.0
EPOCH_LEN_S = 30.0
HF_MOD_HZ = 0.3
LF_MOD_HZ = 0.05


@dataclass(frozen=True)
class SynthProfile:
    name: str
    hours: float
    subjects: int


PROFILES = {
    "night": SynthProfile("night", hours=8.0, subjects=3),
    "mini": SynthProfile("mini", hours=1.0, subjects=3),
}

# ステージごとの基本 RR [ms]、HF / LF の変調振幅 [ms]
_BASE_RR_MS = {SleepStage.WAKE: 800.0, SleepStage.N1: 900.0, SleepStage.N2: 1000.0,
               SleepStage.N3: 1050.0, SleepStage.REM: 850.0}
_HF_DEPTH_MS = {SleepStage.WAKE: 15.0, SleepStage.N1: 25.0, SleepStage.N2: 40.0,
                SleepStage.N3: 55.0, SleepStage.REM: 20.0}
_LF_DEPTH_MS = {SleepStage.WAKE: 40.0, SleepStage.N1: 30.0, SleepStage.N2: 20.0,
                SleepStage.N3: 10.0, SleepStage.REM: 35.0}

# 1/f スペクトルに掛ける帯域ゲイン（パワー）
_STAGE_GAINS = {
    SleepStage.WAKE: {"Alpha": 4.0, "Beta": 2.0},
    SleepStage.N1: {"Theta": 2.0},
    SleepStage.N2: {"Delta": 2.0, "Beta": 1.5},
    SleepStage.N3: {"Delta": 8.0},
    SleepStage.REM: {"Theta": 2.5, "Beta": 1.5},
}
_STAGE_RMS_UV = {SleepStage.WAKE: 20.0, SleepStage.N1: 25.0, SleepStage.N2: 30.0,
                 SleepStage.N3: 60.0, SleepStage.REM: 22.0}

# サブタイプ（N2 は 3 つ、REM は 4 つ）: 帯域ゲインと HF 振幅の倍率
_SUBTYPES = {
    SleepStage.N2: [({"Delta": 3.0}, 1.0), ({"Beta": 3.0}, 0.5), ({"Alpha": 3.0}, 1.6)],
    SleepStage.REM: [({"Theta": 3.0}, 1.0), ({"Gamma": 4.0}, 0.6), ({"Delta": 3.0}, 1.4), ({"Alpha": 3.0}, 0.8)],
}

_CYCLE = [(SleepStage.N1, 5.0), (SleepStage.N2, 25.0), (SleepStage.N3, 20.0),
          (SleepStage.N2, 10.0), (SleepStage.REM, 12.0), (SleepStage.WAKE, 3.0)]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, stream)])


# ── ヒプノグラム ──────────────────────────────────────────

def make_hypnogram(rng: np.random.Generator, n_epochs: int) -> tuple[SleepStage, ...]:
    """入眠前の覚醒 + 約 90 分周期。N3 は前半、REM は後半ほど長い。全ステージが必ず出る。"""
    n_cycles = max(1, int(round(n_epochs * EPOCH_LEN_S / 5400.0)))
    segments = [(SleepStage.WAKE, 10.0)]
    for c in range(n_cycles):
        late = c / max(1, n_cycles - 1) if n_cycles > 1 else 0.5
        for stage, minutes in _CYCLE:
            if stage is SleepStage.N3:
                minutes *= 1.5 - late
            elif stage is SleepStage.REM:
                minutes *= 0.6 + late
            segments.append((stage, minutes * rng.uniform(0.7, 1.3)))
    total = sum(m for _, m in segments)
    lengths = [max(2, int(round(m / total * n_epochs))) for _, m in segments]
    stages: list[SleepStage] = []
    for (stage, _), length in zip(segments, lengths):
        stages.extend([stage] * length)
    stages = stages[:n_epochs]
    stages.extend([SleepStage.WAKE] * (n_epochs - len(stages)))
    return tuple(stages)


# ── ECG ───────────────────────────────────────────────────

def ecg_template(fs: float) -> tuple[np.ndarray, int]:
    """PQRST のガウス和 [mV]。戻り値の2つ目は R 頂点のインデックス。"""
    t = np.arange(-0.35, 0.45, 1.0 / fs)
    waves = [(0.12, -0.20, 0.025), (-0.12, -0.03, 0.008), (1.1, 0.0, 0.010),
             (-0.25, 0.03, 0.009), (0.30, 0.25, 0.040)]
    template = sum(a * np.exp(-0.5 * ((t - mu) / sd) ** 2) for a, mu, sd in waves)
    return template, int(np.argmin(np.abs(t)))


def ecg_from_beats(beat_times_s, n_samples: int, fs: float, rng: np.random.Generator,
                   noise_mv: float = 0.01, wander_mv: float = 0.0, wander_hz: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """拍時刻にテンプレートを置いた ECG と、サンプル格子に丸めた正解拍時刻。"""
    template, r_index = ecg_template(fs)
    idx = np.round(np.asarray(beat_times_s) * fs).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_samples)]
    impulses = np.zeros(n_samples)
    impulses[idx] = 1.0
    ecg = signal.fftconvolve(impulses, template)[r_index:r_index + n_samples]
    t = np.arange(n_samples) / fs
    ecg = ecg + noise_mv * rng.standard_normal(n_samples)
    if wander_mv:
        ecg = ecg + wander_mv * np.sin(2 * np.pi * wander_hz * t + rng.uniform(0, 2 * np.pi))
    return ecg, idx / fs


def constant_rate_ecg(bpm: float, seconds: float, fs: float = SAMPLE_RATE_HZ, seed: int = 0,
                      wander_mv: float = 0.0, first_beat_s: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(seed, int(bpm * 100))
    period = 60.0 / bpm
    beats = np.arange(first_beat_s, seconds, period)
    return ecg_from_beats(beats, int(round(seconds * fs)), fs, rng, wander_mv=wander_mv)


def beat_train(rng: np.random.Generator, stages, hf_depth_ms, lf_depth_ms, duration_s: float) -> np.ndarray:
    base = np.array([_BASE_RR_MS.get(s, 900.0) for s in stages])
    lf_phase = rng.uniform(0, 2 * np.pi)
    times = []
    t = float(rng.uniform(0.2, 0.6))
    last = len(stages) - 1
    while t < duration_s - 0.3:
        times.append(t)
        e = min(int(t // EPOCH_LEN_S), last)
        rr = (base[e] + hf_depth_ms[e] * np.sin(2 * np.pi * HF_MOD_HZ * t)
              + lf_depth_ms[e] * np.sin(2 * np.pi * LF_MOD_HZ * t + lf_phase))
        t += rr / 1000.0
    return np.asarray(times)


# ── EEG ───────────────────────────────────────────────────

def _gain_curve(freqs: np.ndarray, gains: dict[str, float]) -> np.ndarray:
    curve = np.ones_like(freqs)
    for band in DEFAULT_BANDS:
        g = gains.get(band.name)
        if g:
            curve[(freqs >= band.lo_hz) & (freqs < band.hi_hz)] *= g
    return curve


def _band_fractions(freqs: np.ndarray, power: np.ndarray) -> list[float]:
    inside = (freqs >= 1.0) & (freqs < 80.0)
    total = float(power[inside].sum())
    return [float(power[(freqs >= b.lo_hz) & (freqs < b.hi_hz)].sum() / total) for b in DEFAULT_BANDS]


def eeg_epoch(rng: np.random.Generator, n: int, fs: float, gains: dict[str, float],
              rms_uv: float, slow_gain: float = 1.0) -> tuple[np.ndarray, list[float]]:
    """1/f ノイズに帯域ゲインを掛けた1エポックと、設計上の帯域比。"""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    power = _gain_curve(freqs, gains) / np.maximum(freqs, 0.5)
    power[freqs < 1.0] *= slow_gain
    power[0] = 0.0
    spectrum = np.fft.rfft(rng.standard_normal(n)) * np.sqrt(power)
    x = np.fft.irfft(spectrum, n)
    x *= rms_uv / max(float(np.std(x)), 1e-12)
    return x, _band_fractions(freqs, power)


# ── 被験者1人ぶん ─────────────────────────────────────────

def generate_subject(seed: int, index: int, hours: float, fs: float = SAMPLE_RATE_HZ,
                     wander_mv: float = 0.1) -> tuple[Recording, dict]:
    rng = _rng(seed, index)
    subject_id = f"SYN{index + 1:03d}"
    n_epochs = int(round(hours * 3600.0 / EPOCH_LEN_S))
    stages = make_hypnogram(rng, n_epochs)
    n_per_epoch = int(round(EPOCH_LEN_S * fs))
    n_samples = n_epochs * n_per_epoch

    # 被験者ごとのサブタイプ傾向
    propensity = {stage: rng.dirichlet(2.0 * np.ones(len(kinds))) for stage, kinds in _SUBTYPES.items()}
    subtypes = np.full(n_epochs, -1, dtype=np.int64)
    hf_depth = np.empty(n_epochs)
    lf_depth = np.empty(n_epochs)
    gains_per_epoch = []
    beta_z = rng.standard_normal(n_epochs)
    for e, stage in enumerate(stages):
        gains = dict(_STAGE_GAINS.get(stage, {}))
        depth = _HF_DEPTH_MS.get(stage, 20.0)
        if stage in _SUBTYPES:
            kind = int(rng.choice(len(_SUBTYPES[stage]), p=propensity[stage]))
            subtypes[e] = kind
            extra, depth_scale = _SUBTYPES[stage][kind]
            for band, g in extra.items():
                gains[band] = gains.get(band, 1.0) * g
            depth *= depth_scale
        # β が強いエポックほど HF 変調が弱い
        gains["Beta"] = gains.get("Beta", 1.0) * float(np.exp(0.3 * beta_z[e]))
        for band in ("Delta", "Theta", "Alpha", "Gamma"):
            gains[band] = gains.get(band, 1.0) * float(np.exp(0.2 * rng.standard_normal()))
        hf_depth[e] = depth * float(np.exp(-0.25 * beta_z[e]))
        lf_depth[e] = _LF_DEPTH_MS.get(stage, 25.0)
        gains_per_epoch.append(gains)

    beats = beat_train(rng, stages, hf_depth, lf_depth, n_samples / fs)
    ecg, beat_times = ecg_from_beats(beats, n_samples, fs, rng, wander_mv=wander_mv)

    eeg = {"C3": np.empty(n_samples), "C4": np.empty(n_samples)}
    fractions = {"C3": [], "C4": []}
    for e, stage in enumerate(stages):
        slow = float(np.exp(0.4 * rng.standard_normal()))
        for name in ("C3", "C4"):
            x, frac = eeg_epoch(rng, n_per_epoch, fs, gains_per_epoch[e], _STAGE_RMS_UV[stage], slow)
            eeg[name][e * n_per_epoch:(e + 1) * n_per_epoch] = x
            fractions[name].append([round(f, 6) for f in frac])

    channels = (
        ChannelSignal("EEG C3-M2", eeg["C3"], fs, physical_dimension="uV", transducer="AgAgCl electrode"),
        ChannelSignal("EEG C4-M1", eeg["C4"], fs, physical_dimension="uV", transducer="AgAgCl electrode"),
        ChannelSignal("ECG", ecg, fs, physical_dimension="mV", transducer="AgAgCl electrode"),
    )
    recording = Recording(
        subject_id=subject_id, channels=channels,
        hypnogram=Hypnogram(EPOCH_LEN_S, stages),
        patient_id=f"{subject_id} X X X", recording_id=f"Startdate 01-JAN-2018 synthetic seed={seed}",
        n_records=int(n_samples / fs),
    )
    truth = {
        "subject_id": subject_id,
        "n_beats": int(beat_times.size),
        "beat_times_s": [round(float(t), 6) for t in beat_times],
        "stages": [int(s) for s in stages],
        "subtypes": subtypes.tolist(),
        "subtype_propensity": {s.label: [round(float(p), 6) for p in v] for s, v in propensity.items()},
        "band_fractions": fractions,
    }
    return recording, truth


def write_dataset(out_dir: Path, seed: int = 0, subjects: int | None = None, hours: float | None = None,
                  profile: str = "night") -> Path:
    """EDF・ヒプノグラム CSV・manifest.csv・truth.json を書き、manifest のパスを返す。"""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    chosen = PROFILES[profile]
    n_subjects = int(subjects if subjects is not None else chosen.subjects)
    n_hours = float(hours if hours is not None else chosen.hours)
    if n_subjects < 1 or n_hours <= 0:
        raise ValueError("need at least one subject and a positive duration")
    out_dir = Path(out_dir)

    manifest_rows = []
    truth = {"seed": seed, "profile": profile, "hours": n_hours, "subjects": {}}
    for i in range(n_subjects):
        recording, subject_truth = generate_subject(seed, i, n_hours)
        sid = recording.subject_id
        edf_rel = f"edf/{sid}.edf"
        hyp_rel = f"hypnograms/{sid}.csv"
        atomic_write_bytes(out_dir / edf_rel, write_edf(recording, record_duration_s=1.0))
        atomic_write_text(out_dir / hyp_rel, format_hypnogram(recording.hypnogram))
        manifest_rows.append({"subject_id": sid, "edf_path": edf_rel, "hypnogram_path": hyp_rel,
                              "exclude": "", "reason": ""})
        truth["subjects"][sid] = subject_truth
        logger.info("%s: %d epochs, %d beats", sid, recording.n_epochs, subject_truth["n_beats"])

    manifest = out_dir / "manifest.csv"
    atomic_write_text(manifest, pd.DataFrame(manifest_rows).to_csv(index=False, lineterminator="\n"))
    atomic_write_json(out_dir / "truth.json", truth)
    return manifest


# ── 特徴量レベルの生成 ────────────────────────────────────

def simulate_mixed_table(seed: int, n_subjects: int = 30, epochs_per_subject: int = 200,
                         electrode: str = "C3", beta: dict[str, float] | None = None,
                         sigma_subject: float = 0.5, sigma_cell: float = 0.3,
                         sigma_resid: float = 1.0) -> tuple[pd.DataFrame, dict[str, float]]:
    """入れ子ランダム切片つきの既知 β から応答 hf_yj を作る。"""
    from stats_lmm import ModelSpec, build_design

    rng = _rng(seed, 7)
    stage_p = np.array([0.15, 0.10, 0.40, 0.15, 0.20])
    rows = []
    for s in range(n_subjects):
        codes = rng.choice(5, size=epochs_per_subject, p=stage_p)
        # 6番目の成分は帯域外の残り。5帯域の和が一定にならない
        powers = rng.dirichlet([4.0, 2.0, 2.0, 3.0, 1.0, 2.0], size=epochs_per_subject)[:, :5]
        for e in range(epochs_per_subject):
            row = {"subject": f"S{s:03d}", "epoch": e, "stage": int(codes[e])}
            row.update(dict(zip(eeg_columns((electrode,)), powers[e])))
            rows.append(row)
    frame = pd.DataFrame(rows)
    frame["hf_yj"] = 0.0
    spec = ModelSpec(electrodes=(electrode,))
    design = build_design(frame, spec)
    if beta is None:
        values = np.linspace(-2.0, 2.0, len(design.column_names))
        beta = dict(zip(design.column_names, rng.permutation(values)))
    coef = np.array([beta[name] for name in design.column_names])
    subject_effect = sigma_subject * rng.standard_normal(design.blocks[0].size)
    cell_effect = sigma_cell * rng.standard_normal(design.blocks[1].size)
    y = (design.X @ coef + subject_effect[design.blocks[0].codes]
         + cell_effect[design.blocks[1].codes] + sigma_resid * rng.standard_normal(len(frame)))
    frame["hf_yj"] = y
    return frame, dict(beta)


_SUBTYPE_CENTROIDS = [
    ([0.60, 0.15, 0.08, 0.10, 0.02], 3.0e5),
    ([0.30, 0.15, 0.10, 0.35, 0.05], 8.0e5),
    ([0.35, 0.15, 0.30, 0.12, 0.03], 1.5e5),
    ([0.25, 0.40, 0.10, 0.15, 0.05], 5.0e5),
]


def subtype_feature_table(seed: int, n_subjects: int = 10, epochs_per_subject: int = 60,
                          stage: SleepStage = SleepStage.N2, k: int = 3,
                          spread: float = 0.08) -> tuple[pd.DataFrame, np.ndarray, dict[str, np.ndarray]]:
    """k 個のサブタイプ重心のまわりにエポック特徴量を散らした、1ステージぶんのテーブル。"""
    if not 1 <= k <= len(_SUBTYPE_CENTROIDS):
        raise ValueError(f"k must be in [1, {len(_SUBTYPE_CENTROIDS)}]")
    rng = _rng(seed, 11)
    rows, labels, propensity = [], [], {}
    for s in range(n_subjects):
        sid = f"S{s:03d}"
        p = rng.dirichlet(2.0 * np.ones(k))
        propensity[sid] = p
        for e in range(epochs_per_subject):
            kind = int(rng.choice(k, p=p))
            bands, hf = _SUBTYPE_CENTROIDS[kind]
            c3 = np.asarray(bands) * np.exp(spread * rng.standard_normal(5))
            c4 = np.asarray(bands) * np.exp(spread * rng.standard_normal(5))
            hf_abs = hf * float(np.exp(2 * spread * rng.standard_normal()))
            row = {"subject": sid, "epoch": e, "stage": int(stage)}
            row.update(dict(zip(eeg_columns(), np.concatenate([c3, c4]))))
            row.update({"hf_abs": hf_abs, "hf_norm": 0.5, "hf_yj": 0.0})
            rows.append(row)
            labels.append(kind)
    return pd.DataFrame(rows), np.asarray(labels), propensity
