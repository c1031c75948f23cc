"""C3 / C4 の 30 s エポックごとの相対帯域パワー（メディアン Welch）。"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from dsp_core import band_power, welch_median_psd
from edf_io import Recording, select_channel
from pipeline_config import BandDef, EegConfig

logger = logging.getLogger(__name__)

# 既定の5帯域。EegConfig.bands と同じ並び
BandDefinition = BandDef
BAND_NAMES = tuple(b.name for b in EegConfig().bands)


@dataclass(frozen=True)
class EegEpoch:
    epoch_index: int
    electrode: str
    rel_power: dict[str, float] = field(default_factory=dict)
    total_abs: float = 0.0
    valid: bool = True
    reason: str = "ok"

    @classmethod
    def invalid(cls, epoch_index: int, electrode: str, bands, reason: str) -> "EegEpoch":
        return cls(epoch_index, electrode, {b.name: float("nan") for b in bands}, float("nan"), False, reason)


def epoch_band_powers(eeg_window, fs: float, config: EegConfig | None = None,
                      epoch_index: int = 0, electrode: str = "C3") -> EegEpoch:
    cfg = config or EegConfig()
    x = np.asarray(eeg_window, dtype=np.float64)
    if x.size == 0 or not np.all(np.isfinite(x)):
        return EegEpoch.invalid(epoch_index, electrode, cfg.bands, "non_finite")
    if not np.any(x):
        return EegEpoch.invalid(epoch_index, electrode, cfg.bands, "flat")
    try:
        spectrum = welch_median_psd(x, fs, cfg.seg_len_s, cfg.overlap_frac, cfg.window, cfg.average)
    except ValueError as exc:
        logger.debug("%s epoch %d: %s", electrode, epoch_index, exc)
        return EegEpoch.invalid(epoch_index, electrode, cfg.bands, "too_short")

    absolute = {b.name: band_power(spectrum, b.lo_hz, b.hi_hz) for b in cfg.bands}
    total = band_power(spectrum, *cfg.total_range_hz)
    if not total > 0:
        return EegEpoch.invalid(epoch_index, electrode, cfg.bands, "flat")
    rel = {name: float(np.clip(value / total, 0.0, 1.0)) for name, value in absolute.items()}
    return EegEpoch(epoch_index, electrode, rel, float(total), True, "ok")


def process_eeg(recording: Recording, electrode: str, config: EegConfig | None = None) -> list[EegEpoch]:
    """ヒプノグラムの各エポックに EegEpoch を1つ。チャンネルが無ければ ValueError。"""
    cfg = config or EegConfig()
    if recording.hypnogram is None:
        raise ValueError(f"{recording.subject_id}: recording has no hypnogram")
    channel = select_channel(recording, electrode)
    fs = channel.sample_rate_hz
    top = max(b.hi_hz for b in cfg.bands)
    if top > fs / 2:
        logger.warning("%s %s: bands reach %.0f Hz but Nyquist is %.0f Hz; upper bands are clipped",
                       recording.subject_id, electrode, top, fs / 2)

    samples = channel.samples
    epochs = []
    for index in range(recording.n_epochs):
        start, stop = recording.epoch_bounds(index, fs)
        epochs.append(epoch_band_powers(samples[start:min(stop, samples.size)], fs, cfg, index, electrode))
    n_valid = sum(e.valid for e in epochs)
    logger.info("%s %s: %d/%d valid EEG epochs", recording.subject_id, electrode, n_valid, len(epochs))
    return epochs


def eeg_debug_frame(subject_id: str, epochs: list[EegEpoch]) -> pd.DataFrame:
    names = list(epochs[0].rel_power) if epochs else [n for n in BAND_NAMES]
    rows = []
    for e in epochs:
        row = {"subject": subject_id, "epoch": e.epoch_index, "electrode": e.electrode}
        row.update({name.lower(): e.rel_power.get(name, float("nan")) for name in names})
        row.update({"total_abs": e.total_abs, "valid": int(e.valid)})
        rows.append(row)
    columns = ["subject", "epoch", "electrode", *(n.lower() for n in names), "total_abs", "valid"]
    return pd.DataFrame(rows, columns=columns)
