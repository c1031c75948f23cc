"""ECG → エポックごとの HF-HRV パワー。

流れ（30 s エポック単位）:
  基線除去 → 移動 min-max 正規化 → Pan-Tompkins で R 波検出 → RRI
  → 4 Hz 線形補間 → 平均除去 → Butterworth 0.04–0.4 Hz → MODWPT(db2, J=4)
  → ノード帯域の重なり割合で重み付けしたエネルギー和（HF / 全体）

検出はエポックの前後に edge_pad_s だけ余白を付けた窓で行い、窓端付近で二重に
拾った拍は dedupe_beats で記録全体としてまとめる。品質判定は例外ではなく
HrvEpoch.valid / reason で持ち回る。
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import ndimage, signal

from dsp_core import (
    BiquadCascade,
    FilterSpec,
    baseline_remove,
    design_bandpass,
    filter_apply,
    fractional_node_weights,
    linear_interp,
    modwpt,
    moving_minmax_norm,
)
from edf_io import Recording, select_channel
from pipeline_config import EcgConfig

logger = logging.getLogger(__name__)

REASON_OK = "ok"
REASON_INSUFFICIENT_BEATS = "insufficient_beats"
REASON_RRI_OUT_OF_RANGE = "rri_out_of_range"
REASON_NO_ECG_SIGNAL = "no_ecg_signal"
REASON_ZERO_POWER = "zero_power"

MIN_DETECTION_RATE_HZ = 100.0
HRV_DEBUG_COLUMNS = ["subject", "epoch", "n_beats", "hf_abs", "total_abs", "hf_norm", "valid", "reason"]


class InsufficientBeatsError(ValueError):
    pass


@dataclass(frozen=True)
class BeatSeries:
    beat_times_s: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.beat_times_s, dtype=np.float64).reshape(-1)
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("beat times must be strictly increasing")
        times = times.copy()
        times.setflags(write=False)
        object.__setattr__(self, "beat_times_s", times)

    def __len__(self) -> int:
        return int(self.beat_times_s.size)

    def shifted(self, offset_s: float) -> "BeatSeries":
        return BeatSeries(self.beat_times_s + offset_s)

    def between(self, t0: float, t1: float) -> "BeatSeries":
        """[t0, t1) に入る拍。"""
        times = self.beat_times_s
        return BeatSeries(times[(times >= t0) & (times < t1)])


@dataclass(frozen=True)
class HrvEpoch:
    epoch_index: int
    hf_abs: float
    total_abs: float
    hf_norm: float  # 無効エポックでは NaN
    n_beats: int
    valid: bool
    reason: str = REASON_OK

    @classmethod
    def invalid(cls, epoch_index: int, n_beats: int, reason: str) -> "HrvEpoch":
        return cls(epoch_index, float("nan"), float("nan"), float("nan"), n_beats, False, reason)


# ── Pan-Tompkins ──────────────────────────────────────────

@lru_cache(maxsize=32)
def _bandpass(order: int, low_hz: float, high_hz: float, fs: float) -> BiquadCascade:
    return design_bandpass(FilterSpec(order=order, low_hz=low_hz, high_hz=high_hz, sample_rate_hz=fs))


def _five_point_derivative(x: np.ndarray, fs: float) -> np.ndarray:
    # y[n] = (2x[n+1] + x[n+2] - x[n-2] - 2x[n-1]) · fs/8
    return np.convolve(x, [1.0, 2.0, 0.0, -2.0, -1.0], mode="same") * fs / 8.0


def _samples(seconds: float, fs: float) -> int:
    return max(1, int(round(seconds * fs)))


def detect_beats(ecg_window, fs: float, config: EcgConfig | None = None) -> BeatSeries:
    """前処理済み窓から R 波時刻（窓先頭からの秒）を返す。"""
    cfg = config or EcgConfig()
    if fs < MIN_DETECTION_RATE_HZ:
        raise ValueError(f"beat detection needs fs >= {MIN_DETECTION_RATE_HZ:.0f} Hz (got {fs})")
    x = np.asarray(ecg_window, dtype=np.float64)
    if x.size < _samples(1.0, fs) or not np.all(np.isfinite(x)) or np.ptp(x) == 0:
        return BeatSeries(np.empty(0))

    high = min(cfg.qrs_high_hz, 0.45 * fs)
    filtered = filter_apply(_bandpass(2, cfg.qrs_low_hz, high, fs), x, zero_phase=True)
    derivative = _five_point_derivative(filtered, fs)
    width = _samples(cfg.integration_window_s, fs)
    integrated = np.convolve(derivative ** 2, np.ones(width) / width, mode="same")
    if not np.any(integrated > 0):
        return BeatSeries(np.empty(0))

    refractory = _samples(cfg.refractory_s, fs)
    t_wave_window = _samples(cfg.t_wave_window_s, fs)
    slope = ndimage.maximum_filter1d(np.abs(derivative), size=_samples(0.15, fs), mode="nearest")

    # 学習期間: 先頭 2 s
    learn = integrated[:_samples(2.0, fs)]
    spki = 0.25 * float(np.max(learn))
    npki = 0.5 * float(np.mean(learn))

    candidates, _ = signal.find_peaks(integrated, distance=refractory)
    qrs: list[int] = []
    skipped: list[int] = []
    rr_recent: deque[int] = deque(maxlen=8)

    def accept(index: int, searchback: bool) -> None:
        nonlocal spki
        value = float(integrated[index])
        if qrs:
            rr_recent.append(index - qrs[-1])
        qrs.append(index)
        spki = (0.25 * value + 0.75 * spki) if searchback else (0.125 * value + 0.875 * spki)

    def search_back(until: int) -> None:
        nonlocal skipped
        if not qrs or not rr_recent:
            return
        if until - qrs[-1] <= cfg.searchback_factor * float(np.mean(rr_recent)):
            return
        threshold2 = 0.5 * (npki + 0.25 * (spki - npki))
        pool = [p for p in skipped if p - qrs[-1] >= refractory and integrated[p] > threshold2]
        if pool:
            best = max(pool, key=lambda p: (integrated[p], -p))
            accept(best, searchback=True)
            skipped = [p for p in skipped if p > best]

    for index in candidates:
        search_back(index)
        value = float(integrated[index])
        threshold1 = npki + 0.25 * (spki - npki)
        if value > threshold1 and (not qrs or index - qrs[-1] >= refractory):
            is_t_wave = bool(qrs) and index - qrs[-1] < t_wave_window and slope[index] < 0.5 * slope[qrs[-1]]
            if not is_t_wave:
                accept(index, searchback=False)
                skipped = []
                continue
        npki = 0.125 * value + 0.875 * npki
        skipped.append(index)
    search_back(x.size)

    # 積分波形のピーク → 元波形の R 頂点（±75 ms）
    reach = _samples(0.075, fs)
    centre = float(np.median(x))
    refined: list[int] = []
    for index in sorted(qrs):
        lo, hi = max(0, index - reach), min(x.size, index + reach + 1)
        peak = lo + int(np.argmax(np.abs(x[lo:hi] - centre)))
        if not refined or peak - refined[-1] >= refractory:
            refined.append(peak)
    return BeatSeries(np.asarray(refined, dtype=np.float64) / fs)


def dedupe_beats(beat_times_s, min_gap_s: float = 0.2) -> BeatSeries:
    """時刻順に並べ、直前に採用した拍から min_gap_s 未満の拍を捨てる。"""
    times = np.sort(np.asarray(beat_times_s, dtype=np.float64).reshape(-1))
    kept: list[float] = []
    for t in times:
        if not kept or t - kept[-1] >= min_gap_s:
            kept.append(float(t))
    return BeatSeries(np.asarray(kept))


def match_beats(detected, truth, tol_s: float = 0.04) -> tuple[float, float, np.ndarray]:
    """真値の各拍に tol_s 以内で最も近い未使用の検出拍を対応付ける。

    戻り値は (感度, 陽性的中率, 対応付いた拍の時刻誤差 [s])。
    """
    det = np.sort(np.asarray(getattr(detected, "beat_times_s", detected), dtype=np.float64))
    ref = np.sort(np.asarray(getattr(truth, "beat_times_s", truth), dtype=np.float64))
    used = np.zeros(det.size, dtype=bool)
    errors: list[float] = []
    for t in ref:
        if det.size == 0:
            break
        pos = int(np.searchsorted(det, t))
        best, best_err = None, tol_s
        for j in (pos - 1, pos):
            if 0 <= j < det.size and not used[j] and abs(det[j] - t) <= best_err:
                best, best_err = j, abs(det[j] - t)
        if best is not None:
            used[best] = True
            errors.append(float(det[best] - t))
    matched = len(errors)
    sensitivity = matched / ref.size if ref.size else 1.0
    ppv = matched / det.size if det.size else (1.0 if ref.size == 0 else 0.0)
    return sensitivity, ppv, np.asarray(errors)


# ── RRI → HF ──────────────────────────────────────────────

def rri_series(beats: BeatSeries) -> tuple[np.ndarray, np.ndarray]:
    """ノット i は拍 i+1 の時刻、値は (t[i+1] − t[i])·1000 ms。"""
    times = np.asarray(getattr(beats, "beat_times_s", beats), dtype=np.float64)
    if times.size < 3:
        raise InsufficientBeatsError(f"need at least 3 beats for an RRI series, got {times.size}")
    return times[1:].copy(), np.diff(times) * 1000.0


@lru_cache(maxsize=8)
def _node_weights(level: int, fs: float, lo: float, hi: float) -> np.ndarray:
    width = fs / 2 ** (level + 1)
    edges = np.arange(2 ** level + 1) * width
    return fractional_node_weights(np.column_stack([edges[:-1], edges[1:]]), lo, hi)


def epoch_hf_power(knot_times_s, rri_ms, epoch_index: int, epoch_start_s: float,
                   epoch_len_s: float = 30.0, config: EcgConfig | None = None,
                   n_beats: int | None = None) -> HrvEpoch:
    """エポック内の RRI ノットから HF / 全帯域のエネルギーと正規化 HF を求める。"""
    cfg = config or EcgConfig()
    times = np.asarray(knot_times_s, dtype=np.float64)
    values = np.asarray(rri_ms, dtype=np.float64)
    beats = int(n_beats if n_beats is not None else times.size + 1)

    if beats < cfg.min_beats or times.size < 2:
        return HrvEpoch.invalid(epoch_index, beats, REASON_INSUFFICIENT_BEATS)
    if np.any(values < cfg.rri_min_ms) or np.any(values > cfg.rri_max_ms):
        return HrvEpoch.invalid(epoch_index, beats, REASON_RRI_OUT_OF_RANGE)

    rate = cfg.interp_rate_hz
    t1 = epoch_start_s + epoch_len_s - 1.0 / rate
    series = linear_interp(times, values, rate, epoch_start_s, t1)
    series = series - series.mean()
    filtered = filter_apply(
        _bandpass(cfg.filter_order, cfg.band_low_hz, cfg.band_high_hz, rate), series, zero_phase=cfg.zero_phase
    )
    energies = modwpt(filtered, rate, level=cfg.modwpt_level, wavelet=cfg.wavelet).energies()
    hf_abs = float(_node_weights(cfg.modwpt_level, rate, cfg.hf_low_hz, cfg.hf_high_hz) @ energies)
    total_abs = float(_node_weights(cfg.modwpt_level, rate, cfg.band_low_hz, cfg.band_high_hz) @ energies)
    if not total_abs > 0:
        return HrvEpoch.invalid(epoch_index, beats, REASON_ZERO_POWER)
    hf_abs = min(hf_abs, total_abs)
    return HrvEpoch(epoch_index, hf_abs, total_abs, hf_abs / total_abs, beats, True, REASON_OK)


# ── 記録単位 ──────────────────────────────────────────────

def detect_recording_beats(recording: Recording, config: EcgConfig | None = None,
                           channel: str = "ECG") -> tuple[BeatSeries, np.ndarray]:
    """エポックごとに余白付きの窓で検出し、記録全体の拍列にまとめる。

    戻り値の2つ目はエポックごとの「信号なし（平坦・短すぎ）」フラグ。
    """
    cfg = config or EcgConfig()
    ecg = select_channel(recording, channel)
    fs = ecg.sample_rate_hz
    if fs < MIN_DETECTION_RATE_HZ:
        raise ValueError(f"{recording.subject_id}: ECG sampled at {fs} Hz, need >= {MIN_DETECTION_RATE_HZ:.0f} Hz")
    samples = ecg.samples
    epoch_len = recording.hypnogram.epoch_len_s if recording.hypnogram else 30.0
    n_epochs = recording.n_epochs
    pad = _samples(cfg.edge_pad_s, fs) if cfg.edge_pad_s > 0 else 0
    min_len = 2 * (_samples(max(cfg.baseline_windows_s), fs) + 1)

    found: list[np.ndarray] = []
    no_signal = np.zeros(n_epochs, dtype=bool)
    for index in range(n_epochs):
        start, stop = recording.epoch_bounds(index, fs)
        stop = min(stop, samples.size)
        core = samples[start:stop]
        if core.size < min_len or np.ptp(core) == 0:
            no_signal[index] = True
            continue
        lo, hi = max(0, start - pad), min(samples.size, stop + pad)
        window = moving_minmax_norm(baseline_remove(samples[lo:hi], fs, cfg.baseline_windows_s),
                                    cfg.norm_window_s, fs)
        local = detect_beats(window, fs, cfg).beat_times_s + lo / fs
        t0, t1 = index * epoch_len, index * epoch_len + epoch_len
        margin = cfg.dedupe_gap_s
        found.append(local[(local >= t0 - margin) & (local < t1 + margin)])

    merged = np.concatenate(found) if found else np.empty(0)
    return dedupe_beats(merged, cfg.dedupe_gap_s), no_signal


def process_ecg(recording: Recording, config: EcgConfig | None = None, channel: str = "ECG") -> list[HrvEpoch]:
    """ヒプノグラムの各エポックに HrvEpoch を1つずつ返す（無効エポックも捨てない）。"""
    cfg = config or EcgConfig()
    if recording.hypnogram is None:
        raise ValueError(f"{recording.subject_id}: recording has no hypnogram")
    beats, no_signal = detect_recording_beats(recording, cfg, channel)
    epoch_len = recording.hypnogram.epoch_len_s

    epochs: list[HrvEpoch] = []
    for index in range(recording.n_epochs):
        t0 = index * epoch_len
        inside = beats.between(t0, t0 + epoch_len)
        if no_signal[index]:
            epochs.append(HrvEpoch.invalid(index, len(inside), REASON_NO_ECG_SIGNAL))
            continue
        try:
            knot_times, rri = rri_series(inside)
        except InsufficientBeatsError:
            epochs.append(HrvEpoch.invalid(index, len(inside), REASON_INSUFFICIENT_BEATS))
            continue
        epochs.append(epoch_hf_power(knot_times, rri, index, t0, epoch_len, cfg, n_beats=len(inside)))

    n_valid = sum(e.valid for e in epochs)
    logger.info("%s: %d beats, %d/%d valid HRV epochs", recording.subject_id, len(beats), n_valid, len(epochs))
    return epochs


def hrv_debug_frame(subject_id: str, epochs: list[HrvEpoch]) -> pd.DataFrame:
    rows = [
        {
            "subject": subject_id,
            "epoch": e.epoch_index,
            "n_beats": e.n_beats,
            "hf_abs": e.hf_abs,
            "total_abs": e.total_abs,
            "hf_norm": e.hf_norm,
            "valid": int(e.valid),
            "reason": e.reason,
        }
        for e in epochs
    ]
    return pd.DataFrame(rows, columns=HRV_DEBUG_COLUMNS)
