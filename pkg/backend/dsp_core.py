"""信号処理の共通部品。

- メディアンフィルタ / 2段メディアンによる基線除去
- 移動窓 min-max 正規化
- Butterworth 帯域通過（2次セクション直列）の設計と適用
- 一定レートへの線形補間
- メディアン平均の Welch PSD と帯域積分
- MODWPT（間引き無しのウェーブレットパケット変換、db2）

すべて入力だけに依存する純関数で、エポック・記録単位で並列に呼んでよい。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pywt
from scipy import integrate, ndimage, signal

logger = logging.getLogger(__name__)

BASELINE_WINDOWS_S = (0.8, 1.25)


@dataclass(frozen=True)
class FilterSpec:
    order: int
    low_hz: float
    high_hz: float
    sample_rate_hz: float
    kind: str = "butterworth_bandpass"

    def __post_init__(self):
        if self.kind != "butterworth_bandpass":
            raise ValueError(f"unsupported filter kind: {self.kind}")
        if int(self.order) < 1:
            raise ValueError("filter order must be a positive integer")
        nyquist = self.sample_rate_hz / 2
        if not (0 < self.low_hz < self.high_hz < nyquist):
            raise ValueError(
                f"band edges must satisfy 0 < {self.low_hz} < {self.high_hz} < {nyquist} (Nyquist)"
            )


@dataclass(frozen=True)
class BiquadCascade:
    sos: np.ndarray
    sample_rate_hz: float


@dataclass(frozen=True)
class Spectrum:
    freqs_hz: np.ndarray
    power: np.ndarray
    n_segments: int = 1


@dataclass(frozen=True)
class WaveletPacketDecomposition:
    level: int
    nodes: np.ndarray  # (2**level, n) 周波数順
    node_bands_hz: np.ndarray  # (2**level, 2) 各ノードの [lo, hi)
    wavelet: str = "db2"

    def energies(self) -> np.ndarray:
        return np.sum(self.nodes ** 2, axis=1)


def _as_signal(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if arr.size == 0:
        raise ValueError("signal is empty")
    return arr


def _odd_window(window_s: float, fs: float) -> int:
    width = int(round(window_s * fs))
    if width < 1:
        raise ValueError(f"window {window_s} s at {fs} Hz is shorter than one sample")
    return width if width % 2 else width + 1


# ── メディアンフィルタ ─────────────────────────────────────

def median_filter(x, window_s: float, fs: float) -> np.ndarray:
    """中心窓のメディアン。端では窓を左右対称に縮める。"""
    x = _as_signal(x)
    width = _odd_window(window_s, fs)
    half = width // 2
    n = x.size
    out = ndimage.median_filter(x, size=width, mode="nearest")
    edge = list(range(min(half, n))) + list(range(max(n - half, min(half, n)), n))
    for i in edge:
        reach = min(i, n - 1 - i, half)
        out[i] = np.median(x[i - reach:i + reach + 1])
    return out


def baseline_remove(x, fs: float, windows_s: tuple[float, float] = BASELINE_WINDOWS_S) -> np.ndarray:
    """2段メディアン（0.8 s → 1.25 s）で基線を推定して差し引く。"""
    x = _as_signal(x)
    longest = max(_odd_window(w, fs) for w in windows_s)
    if x.size < 2 * longest:
        raise ValueError(f"signal of {x.size} samples is shorter than twice the {longest}-sample window")
    baseline = x
    for window in windows_s:
        baseline = median_filter(baseline, window, fs)
    return x - baseline


def moving_minmax_norm(x, window_s: float, fs: float) -> np.ndarray:
    """中心窓の min-max で [0, 1] に正規化。窓内が一定なら 0.5。"""
    x = _as_signal(x)
    width = int(round(window_s * fs))
    if width < 2:
        raise ValueError(f"normalization window must span at least 2 samples (got {width})")
    low = ndimage.minimum_filter1d(x, size=width, mode="nearest")
    high = ndimage.maximum_filter1d(x, size=width, mode="nearest")
    span = high - low
    out = np.full_like(x, 0.5)
    mask = span > 0
    out[mask] = (x[mask] - low[mask]) / span[mask]
    return np.clip(out, 0.0, 1.0)


# ── IIR ───────────────────────────────────────────────────

def is_stable(coeffs: BiquadCascade) -> bool:
    _, poles, _ = signal.sos2zpk(coeffs.sos)
    return bool(np.all(np.abs(poles) < 1.0))


def design_bandpass(spec: FilterSpec) -> BiquadCascade:
    """Butterworth 帯域通過（アナログ原型 + 双一次変換、プリワーピングあり）を SOS で返す。"""
    sos = signal.butter(
        int(spec.order),
        [spec.low_hz, spec.high_hz],
        btype="bandpass",
        fs=spec.sample_rate_hz,
        output="sos",
    )
    coeffs = BiquadCascade(sos=np.asarray(sos), sample_rate_hz=spec.sample_rate_hz)
    if not is_stable(coeffs):
        raise ValueError(f"unstable band-pass design for {spec}")
    return coeffs


def frequency_response(coeffs: BiquadCascade, freqs_hz) -> np.ndarray:
    """|H(f)|。"""
    _, h = signal.sosfreqz(coeffs.sos, worN=np.asarray(freqs_hz, dtype=np.float64), fs=coeffs.sample_rate_hz)
    return np.abs(h)


def filter_apply(coeffs: BiquadCascade, x, zero_phase: bool = False) -> np.ndarray:
    """因果的な1パス適用（初期状態ゼロ）。zero_phase=True なら前後2パス。"""
    x = np.asarray(x, dtype=np.float64)
    if zero_phase:
        return signal.sosfiltfilt(coeffs.sos, x)
    return signal.sosfilt(coeffs.sos, x)


# ── 補間 ──────────────────────────────────────────────────

def linear_interp(times_s, values, out_rate_hz: float, t0: float, t1: float) -> np.ndarray:
    """t0 から 1/rate 刻みで t1 以下まで。ノット範囲外は端の値を保持する。"""
    times = np.asarray(times_s, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if times.size < 2 or times.size != vals.size:
        raise ValueError("linear interpolation needs at least two knots of matching length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    count = int(np.floor((t1 - t0) * out_rate_hz + 1e-9)) + 1
    grid = t0 + np.arange(count) / out_rate_hz
    return np.interp(grid, times, vals)


# ── スペクトル ────────────────────────────────────────────

def welch_median_psd(x, fs: float, seg_len_s: float = 4.0, overlap_frac: float = 0.5,
                     window: str = "hann", average: str = "median") -> Spectrum:
    """セグメントごとの Hann 窓ピリオドグラム（密度スケール）を周波数ビンごとにメディアンで束ねる。

    メディアンのバイアス補正はしない（scipy.signal.welch の average="median" とはそこが違う）。
    """
    x = _as_signal(x)
    nperseg = int(round(seg_len_s * fs))
    if nperseg < 8:
        raise ValueError("Welch segments must contain at least 8 samples")
    if not 0 <= overlap_frac < 1:
        raise ValueError("overlap fraction must be in [0, 1)")
    if x.size < nperseg:
        raise ValueError(f"signal of {x.size} samples is shorter than one {nperseg}-sample segment")
    if window != "hann":
        raise ValueError(f"unsupported window: {window}")
    noverlap = int(round(overlap_frac * nperseg))
    freqs, _, per_segment = signal.spectrogram(
        x, fs=fs, window="hann", nperseg=nperseg, noverlap=noverlap,
        detrend="constant", scaling="density", mode="psd",
    )
    if average == "median":
        power = np.median(per_segment, axis=-1)
    elif average == "mean":
        power = np.mean(per_segment, axis=-1)
    else:
        raise ValueError(f"unsupported average: {average}")
    return Spectrum(freqs_hz=freqs, power=power, n_segments=per_segment.shape[-1])


def band_power(spec: Spectrum, lo_hz: float, hi_hz: float) -> float:
    """[lo, hi] の台形積分。スペクトル範囲に切り詰め、端は線形補間した点を足す。"""
    if not lo_hz < hi_hz:
        raise ValueError("band lower edge must be below the upper edge")
    freqs, power = spec.freqs_hz, spec.power
    lo, hi = max(lo_hz, freqs[0]), min(hi_hz, freqs[-1])
    if lo >= hi:
        logger.warning("band %.2f-%.2f Hz lies outside the spectrum (%.2f-%.2f Hz)",
                       lo_hz, hi_hz, freqs[0], freqs[-1])
        return 0.0
    inside = (freqs > lo) & (freqs < hi)
    f = np.concatenate(([lo], freqs[inside], [hi]))
    p = np.concatenate(([np.interp(lo, freqs, power)], power[inside], [np.interp(hi, freqs, power)]))
    return float(integrate.trapezoid(p, f))


# ── MODWPT ────────────────────────────────────────────────

def _modwt_filters(wavelet: str) -> tuple[np.ndarray, np.ndarray]:
    """MODWT 規約（1/√2 倍）のスケーリング / ウェーブレットフィルタ。"""
    scaling = np.asarray(pywt.Wavelet(wavelet).rec_lo, dtype=np.float64) / np.sqrt(2.0)
    length = scaling.size
    # 交互反転: h_l = (-1)^l g_{L-1-l}
    detail = np.array([(-1) ** l * scaling[length - 1 - l] for l in range(length)])
    return scaling, detail


def _transfer(taps: np.ndarray, n: int, dilation: int) -> np.ndarray:
    """巡回畳み込み用の DFT 上の伝達関数 Σ_l u_l exp(-2πi k d l / n)。"""
    k = np.arange(n)[:, None]
    lags = dilation * np.arange(taps.size)[None, :]
    return np.exp(-2j * np.pi * k * lags / n) @ taps


def modwpt(x, fs: float, level: int = 4, wavelet: str = "db2") -> WaveletPacketDecomposition:
    """巡回境界の MODWPT。ノード k は [k, k+1)·fs/2^(J+1) Hz を受け持つ（sequency 順）。"""
    x = _as_signal(x)
    if level < 1:
        raise ValueError("decomposition level must be at least 1")
    scaling, detail = _modwt_filters(wavelet)
    support = (2 ** level - 1) * (scaling.size - 1) + 1
    if x.size < support:
        raise ValueError(f"level {level} needs at least {support} samples, got {x.size}")

    n = x.size
    spectra = [np.fft.fft(x)]
    for j in range(1, level + 1):
        dilation = 2 ** (j - 1)
        low = _transfer(scaling, n, dilation)
        high = _transfer(detail, n, dilation)
        children = []
        for node in range(2 ** j):
            parent = spectra[node // 2]
            # n mod 4 が 0,3 ならスケーリング、1,2 ならウェーブレット（周波数順を保つ）
            children.append(parent * (low if node % 4 in (0, 3) else high))
        spectra = children
    nodes = np.real(np.fft.ifft(np.vstack(spectra), axis=1))
    width = fs / 2 ** (level + 1)
    edges = np.arange(2 ** level + 1) * width
    bands = np.column_stack([edges[:-1], edges[1:]])
    return WaveletPacketDecomposition(level=level, nodes=nodes, node_bands_hz=bands, wavelet=wavelet)


def fractional_node_weights(node_bands_hz, lo_hz: float, hi_hz: float) -> np.ndarray:
    """各ノード帯域のうち [lo, hi) と重なる割合。"""
    bands = np.asarray(node_bands_hz, dtype=np.float64)
    overlap = np.clip(np.minimum(bands[:, 1], hi_hz) - np.maximum(bands[:, 0], lo_hz), 0.0, None)
    return overlap / (bands[:, 1] - bands[:, 0])
