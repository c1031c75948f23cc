"""PSG 記録（EDF 信号 + エポック単位のハイプノグラム）とデータセット manifest の読み込み。

EDF のレイアウト:
  固定ヘッダ 256 バイト + 信号ヘッダ 256×ns バイト（項目ごとに ns 個並ぶ列優先）
  → データレコード（各信号 samples_per_record 個の 16bit LE 2の補数）× n_records。
EDF+C（連続）は読めるが、EDF+D（不連続）は拒否する。
"""
from __future__ import annotations

import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ANNOTATION_LABEL = "EDF Annotations"
HEADER_BYTES = 256

# 固定ヘッダ: (項目名, 幅)
_MAIN_FIELDS = (
    ("version", 8),
    ("patient_id", 80),
    ("recording_id", 80),
    ("start_date", 8),
    ("start_time", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)
# 信号ヘッダ: (項目名, 幅)。各項目が ns 個連続して並ぶ
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)

# 論理チャンネル名 → ラベル候補（大文字小文字を無視した前方一致、先頭ほど優先）
CHANNEL_ALIASES: dict[str, tuple[str, ...]] = {
    "C3": ("C3-M2", "C3"),
    "C4": ("C4-M1", "C4"),
    "ECG": ("ECG",),
}


class EdfError(ValueError):
    """EDF の構文・構造エラー。offset / field で位置を示す。"""

    def __init__(self, message: str, *, offset: int | None = None, field: str | None = None,
                 record: int | None = None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if record is not None:
            where.append(f"data record {record}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.field = field
        self.record = record


class CalibrationError(EdfError):
    pass


class HypnogramError(ValueError):
    pass


class SleepStage(IntEnum):
    WAKE = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4
    UNSCORED = -1

    @property
    def label(self) -> str:
        return _STAGE_LABELS[self]

    @classmethod
    def from_code(cls, code: int) -> "SleepStage":
        """0–4 以外は Unscored。"""
        try:
            stage = cls(int(code))
        except ValueError:
            return cls.UNSCORED
        return stage

    @classmethod
    def from_name(cls, name: str) -> "SleepStage":
        key = str(name).strip().upper()
        for stage, label in _STAGE_LABELS.items():
            if label.upper() == key:
                return stage
        raise ValueError(f"unknown sleep stage: {name!r}")


_STAGE_LABELS = {
    SleepStage.WAKE: "Wake",
    SleepStage.N1: "N1",
    SleepStage.N2: "N2",
    SleepStage.N3: "N3",
    SleepStage.REM: "REM",
    SleepStage.UNSCORED: "Unscored",
}
SCORED_STAGES = (SleepStage.WAKE, SleepStage.N1, SleepStage.N2, SleepStage.N3, SleepStage.REM)


@dataclass(frozen=True)
class ChannelSignal:
    label: str
    samples: np.ndarray
    sample_rate_hz: float
    physical_dimension: str = ""
    physical_min: float | None = None
    physical_max: float | None = None
    digital_min: int = -32767
    digital_max: int = 32767
    transducer: str = ""
    prefilter: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"{self.label}: samples must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"{self.label}: sample rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"{self.label}: samples contain non-finite values")
        samples = samples.copy() if samples.flags.writeable else samples
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Hypnogram:
    epoch_len_s: float
    stages: tuple[SleepStage, ...]

    def __post_init__(self):
        if not self.epoch_len_s > 0:
            raise HypnogramError("epoch length must be positive")
        object.__setattr__(self, "stages", tuple(SleepStage(s) for s in self.stages))

    def __len__(self) -> int:
        return len(self.stages)

    def codes(self) -> np.ndarray:
        return np.array([int(s) for s in self.stages], dtype=np.int64)


@dataclass(frozen=True)
class Recording:
    subject_id: str
    channels: tuple[ChannelSignal, ...]
    hypnogram: Hypnogram | None = None
    patient_id: str = ""
    recording_id: str = ""
    start_date: str = "01.01.18"
    start_time: str = "00.00.00"
    record_duration_s: float = 1.0
    n_records: int = 0
    annotations: tuple[tuple[float, float, str], ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not str(self.subject_id).strip():
            raise ValueError("subject_id must be non-empty")
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.n_records < 0:
            raise ValueError(f"{self.subject_id}: negative record count {self.n_records}")
        if self.n_records:
            # n_records=0 はレコード構造を持たないメモリ上の記録
            for channel in self.channels:
                expected = self.n_records * channel.sample_rate_hz * self.record_duration_s
                if abs(len(channel.samples) - expected) > 1e-6:
                    raise ValueError(
                        f"{self.subject_id}: {channel.label} has {len(channel.samples)} samples, "
                        f"expected {expected:g} for {self.n_records} records of {self.record_duration_s:g} s"
                    )
        if self.hypnogram is not None:
            limit = self.duration_s + self.hypnogram.epoch_len_s
            needed = len(self.hypnogram) * self.hypnogram.epoch_len_s
            if needed > limit + 1e-9:
                raise HypnogramError(
                    f"{self.subject_id}: hypnogram covers {needed:.0f} s "
                    f"but the recording lasts {self.duration_s:.0f} s"
                )

    @property
    def duration_s(self) -> float:
        return max((c.duration_s for c in self.channels), default=0.0)

    @property
    def n_epochs(self) -> int:
        return len(self.hypnogram) if self.hypnogram is not None else 0

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.channels]

    def channel(self, label: str) -> ChannelSignal:
        for channel in self.channels:
            if channel.label == label:
                return channel
        raise KeyError(label)

    def with_hypnogram(self, hypnogram: Hypnogram) -> "Recording":
        return replace(self, hypnogram=hypnogram)

    def epoch_bounds(self, index: int, fs: float) -> tuple[int, int]:
        """エポック index のサンプル範囲 [start, stop)。"""
        epoch_len = self.hypnogram.epoch_len_s if self.hypnogram else 30.0
        start = int(round(index * epoch_len * fs))
        return start, start + int(round(epoch_len * fs))


# ── チャンネル選択 ────────────────────────────────────────

def _normalize_label(label: str) -> str:
    text = str(label).strip().upper()
    # HMC などは "EEG C3-M2" のように種別接頭辞が付く
    if text.startswith("EEG ") and len(text) > 4:
        text = text[4:]
    return text.replace("/", "-")


def match_channel_label(labels: Sequence[str], wanted: str,
                        aliases: dict[str, tuple[str, ...]] | None = None) -> str | None:
    """論理名（C3 / C4 / ECG）または実ラベルに一致する最初のラベルを返す。"""
    table = aliases or CHANNEL_ALIASES
    candidates = table.get(wanted.upper(), (wanted,))
    normalized = [_normalize_label(label) for label in labels]
    for alias in candidates:
        key = _normalize_label(alias)
        for label, norm in zip(labels, normalized):
            if norm == key:
                return label
        for label, norm in zip(labels, normalized):
            if norm.startswith(key):
                return label
    return None


def select_channel(recording: Recording, wanted: str,
                   aliases: dict[str, tuple[str, ...]] | None = None) -> ChannelSignal:
    label = match_channel_label(recording.labels, wanted, aliases)
    if label is None:
        tried = (aliases or CHANNEL_ALIASES).get(wanted.upper(), (wanted,))
        raise ValueError(
            f"{recording.subject_id}: channel {wanted} not found "
            f"(tried {', '.join(tried)}; available {', '.join(recording.labels)})"
        )
    return recording.channel(label)


# ── EDF ヘッダ ────────────────────────────────────────────

def _ascii(data: bytes, offset: int, width: int, name: str) -> str:
    chunk = data[offset:offset + width]
    if len(chunk) < width:
        raise EdfError("header truncated", offset=offset, field=name)
    try:
        text = chunk.decode("ascii")
    except UnicodeDecodeError as exc:
        raise EdfError("non-ASCII header field", offset=offset + exc.start, field=name) from exc
    if any(not (32 <= ord(ch) <= 126) for ch in text):
        raise EdfError("control character in header field", offset=offset, field=name)
    return text.strip()


def _as_int(text: str, offset: int, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        try:
            value = float(text)
        except ValueError:
            raise EdfError(f"expected an integer, got {text!r}", offset=offset, field=name) from None
        if not value.is_integer():
            raise EdfError(f"expected an integer, got {text!r}", offset=offset, field=name)
        return int(value)


def _as_float(text: str, offset: int, name: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise EdfError(f"expected a number, got {text!r}", offset=offset, field=name) from None
    if not math.isfinite(value):
        raise EdfError(f"non-finite number {text!r}", offset=offset, field=name)
    return value


def _read_header(data: bytes) -> dict:
    if len(data) < HEADER_BYTES:
        raise EdfError("file shorter than the 256-byte EDF header", offset=len(data), field="version")
    header: dict = {}
    offsets: dict[str, int] = {}
    offset = 0
    for name, width in _MAIN_FIELDS:
        header[name] = _ascii(data, offset, width, name)
        offsets[name] = offset
        offset += width

    if header["version"] != "0":
        raise EdfError(f"unsupported version {header['version']!r}", offset=0, field="version")
    reserved = header["reserved"].upper()
    if reserved.startswith("EDF+D"):
        raise EdfError("discontinuous EDF+D recordings are not supported", offset=offsets["reserved"],
                       field="reserved")
    header["edf_plus"] = reserved.startswith("EDF+")

    ns = _as_int(header["n_signals"], offsets["n_signals"], "n_signals")
    if ns < 1:
        raise EdfError("no signals declared", offset=offsets["n_signals"], field="n_signals")
    header["n_signals"] = ns
    header_bytes = _as_int(header["header_bytes"], offsets["header_bytes"], "header_bytes")
    if header_bytes != HEADER_BYTES * (ns + 1):
        raise EdfError(f"header size {header_bytes} does not match {ns} signals",
                       offset=offsets["header_bytes"], field="header_bytes")
    header["header_bytes"] = header_bytes
    header["n_records"] = _as_int(header["n_records"], offsets["n_records"], "n_records")
    header["record_duration"] = _as_float(header["record_duration"], offsets["record_duration"],
                                          "record_duration")
    if header["record_duration"] < 0:
        raise EdfError("negative record duration", offset=offsets["record_duration"],
                       field="record_duration")

    signals: list[dict] = [dict() for _ in range(ns)]
    for name, width in _SIGNAL_FIELDS:
        for i in range(ns):
            text = _ascii(data, offset, width, name)
            if name in ("physical_min", "physical_max"):
                signals[i][name] = _as_float(text, offset, name)
            elif name in ("digital_min", "digital_max", "samples_per_record"):
                signals[i][name] = _as_int(text, offset, name)
            else:
                signals[i][name] = text
            signals[i].setdefault("_offsets", {})[name] = offset
            offset += width

    for i, sig in enumerate(signals):
        if sig["samples_per_record"] < 1:
            raise EdfError(f"signal {i} declares no samples per record",
                           offset=sig["_offsets"]["samples_per_record"], field="samples_per_record")
        if sig["label"] == ANNOTATION_LABEL:
            continue
        if sig["digital_max"] == sig["digital_min"]:
            raise CalibrationError(f"signal {i} ({sig['label']}) has digital_max == digital_min",
                                   offset=sig["_offsets"]["digital_max"], field="digital_max")
        if header["record_duration"] <= 0:
            raise EdfError("record duration must be positive for ordinary signals",
                           offset=offsets["record_duration"], field="record_duration")
    header["signals"] = signals
    return header


def _read_records(data: bytes, header: dict) -> np.ndarray:
    """データ部を (n_records, Σ samples_per_record) の int16 配列として返す。"""
    start = header["header_bytes"]
    per_record = sum(sig["samples_per_record"] for sig in header["signals"])
    record_bytes = 2 * per_record
    available = len(data) - start
    n_records = header["n_records"]
    if n_records < 0:
        # -1 は「記録中で不明」。データ長から数える
        n_records = available // record_bytes
    needed = n_records * record_bytes
    if available < needed:
        raise EdfError("truncated data record", offset=start + (available // record_bytes) * record_bytes,
                       record=available // record_bytes)
    if available > needed:
        logger.warning("EDF has %d trailing bytes after the last data record", available - needed)
    raw = np.frombuffer(data, dtype="<i2", count=n_records * per_record, offset=start)
    header["n_records"] = n_records
    return raw.reshape(n_records, per_record)


def _calibration(sig: dict) -> tuple[float, float]:
    gain = (sig["physical_max"] - sig["physical_min"]) / (sig["digital_max"] - sig["digital_min"])
    offset = sig["physical_max"] - gain * sig["digital_max"]
    return gain, offset


def parse_edf(data: bytes, subject_id: str = "recording", only: Iterable[str] | None = None) -> Recording:
    """EDF / EDF+C バイト列を Recording（ハイプノグラム無し）にする。

    only を渡すと、論理名（C3 / C4 / ECG）または実ラベルで一致した信号だけを復号する。
    """
    header = _read_header(data)
    records = _read_records(data, header)
    signals = header["signals"]
    labels = [sig["label"] for sig in signals]

    wanted: set[str] | None = None
    if only is not None:
        wanted = set()
        for name in only:
            label = match_channel_label(labels, name)
            if label is not None:
                wanted.add(label)

    channels = []
    column = 0
    for sig in signals:
        spr = sig["samples_per_record"]
        block = slice(column, column + spr)
        column += spr
        if sig["label"] == ANNOTATION_LABEL:
            continue
        if wanted is not None and sig["label"] not in wanted:
            continue
        gain, offset = _calibration(sig)
        digital = records[:, block].reshape(-1).astype(np.float64)
        channels.append(ChannelSignal(
            label=sig["label"],
            samples=digital * gain + offset,
            sample_rate_hz=spr / header["record_duration"],
            physical_dimension=sig["physical_dimension"],
            physical_min=sig["physical_min"],
            physical_max=sig["physical_max"],
            digital_min=sig["digital_min"],
            digital_max=sig["digital_max"],
            transducer=sig["transducer"],
            prefilter=sig["prefilter"],
        ))

    annotations = tuple(_annotations_from(header, records)) if header["edf_plus"] else ()
    return Recording(
        subject_id=subject_id,
        channels=tuple(channels),
        patient_id=header["patient_id"],
        recording_id=header["recording_id"],
        start_date=header["start_date"],
        start_time=header["start_time"],
        record_duration_s=header["record_duration"],
        n_records=header["n_records"],
        annotations=annotations,
    )


# ── EDF+ アノテーション（TAL） ─────────────────────────────

def _annotations_from(header: dict, records: np.ndarray) -> list[tuple[float, float, str]]:
    """(onset_s, duration_s, label) のリスト。時刻保持用の空 TAL は除く。"""
    column = 0
    chunks: list[bytes] = []
    for sig in header["signals"]:
        spr = sig["samples_per_record"]
        if sig["label"] == ANNOTATION_LABEL:
            for r in range(records.shape[0]):
                chunks.append(records[r, column:column + spr].astype("<i2").tobytes())
        column += spr

    events: list[tuple[float, float, str]] = []
    for chunk in chunks:
        for tal in chunk.split(b"\x00"):
            if not tal:
                continue
            parts = tal.decode("utf-8", errors="replace").split("\x14")
            timing = parts[0].split("\x15")
            try:
                onset = float(timing[0])
                duration = float(timing[1]) if len(timing) > 1 and timing[1] else 0.0
            except ValueError:
                logger.warning("skipping malformed TAL onset %r", parts[0])
                continue
            for text in parts[1:]:
                if text:
                    events.append((onset, duration, text))
    return events


_STAGE_PATTERNS = (
    (re.compile(r"^(sleep stage )?(w|wake)$"), SleepStage.WAKE),
    (re.compile(r"^(sleep stage )?(n1|1|s1)$"), SleepStage.N1),
    (re.compile(r"^(sleep stage )?(n2|2|s2)$"), SleepStage.N2),
    # R&K の stage 4 は AASM の N3 に併合する
    (re.compile(r"^(sleep stage )?(n3|3|4|s3|s4)$"), SleepStage.N3),
    (re.compile(r"^(sleep stage )?(r|rem)$"), SleepStage.REM),
)


def stage_from_label(text: str) -> SleepStage | None:
    """睡眠段階ラベルなら段階を、段階以外のイベント（覚醒反応など）なら None を返す。"""
    key = str(text).strip().lower()
    for pattern, stage in _STAGE_PATTERNS:
        if pattern.match(key):
            return stage
    if key.startswith("sleep stage"):
        return SleepStage.UNSCORED
    return None


# ── ハイプノグラム ─────────────────────────────────────────

def _stages_from_pairs(pairs: list[tuple[int, SleepStage]]) -> tuple[SleepStage, ...]:
    if not pairs:
        raise HypnogramError("hypnogram is empty")
    length = max(index for index, _ in pairs) + 1
    stages = [SleepStage.UNSCORED] * length
    seen: set[int] = set()
    for index, stage in pairs:
        if index in seen:
            logger.warning("epoch %d scored twice; keeping the first label", index)
            continue
        seen.add(index)
        stages[index] = stage
    if len(seen) < length:
        logger.warning("%d epochs have no label and are treated as Unscored", length - len(seen))
    return tuple(stages)


def _parse_stage_csv(text: str) -> list[tuple[int, SleepStage]]:
    pairs: list[tuple[int, SleepStage]] = []
    previous = -1
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) < 2:
            raise HypnogramError(f"line {line_no}: expected 'epoch_index,stage_code'")
        try:
            index = int(cells[0])
        except ValueError:
            if not pairs and line_no == 1:
                continue  # ヘッダ行
            raise HypnogramError(f"line {line_no}: epoch index {cells[0]!r} is not an integer") from None
        if index <= previous:
            raise HypnogramError(f"line {line_no}: epoch index {index} is not increasing (after {previous})")
        previous = index
        raw = cells[1]
        try:
            code = int(raw)
        except ValueError:
            stage = stage_from_label(raw)
            if stage is None or stage is SleepStage.UNSCORED:
                logger.warning("epoch %d: unknown stage label %r mapped to Unscored", index, raw)
                stage = SleepStage.UNSCORED
        else:
            stage = SleepStage.from_code(code)
            if stage is SleepStage.UNSCORED and code != int(SleepStage.UNSCORED):
                logger.warning("epoch %d: stage code %d outside 0-4 mapped to Unscored", index, code)
        pairs.append((index, stage))
    return pairs


def _parse_stage_annotations(data: bytes, epoch_len_s: float) -> list[tuple[int, SleepStage]]:
    header = _read_header(data)
    if not any(sig["label"] == ANNOTATION_LABEL for sig in header["signals"]):
        raise HypnogramError("EDF file has no 'EDF Annotations' signal")
    records = _read_records(data, header)
    pairs: list[tuple[int, SleepStage]] = []
    for onset, duration, text in _annotations_from(header, records):
        stage = stage_from_label(text)
        if stage is None:
            continue
        if stage is SleepStage.UNSCORED:
            logger.warning("annotation %r at %.1f s mapped to Unscored", text, onset)
        first = int(round(onset / epoch_len_s))
        count = max(1, int(round(duration / epoch_len_s))) if duration > 0 else 1
        pairs.extend((first + k, stage) for k in range(count))
    pairs.sort(key=lambda pair: pair[0])
    return pairs


def parse_hypnogram(data: bytes | str, epoch_len_s: float = 30.0) -> Hypnogram:
    """CSV（epoch_index,stage_code）または EDF+ アノテーションからハイプノグラムを作る。"""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if not data or not data.strip():
        raise HypnogramError("hypnogram input is empty")
    if data[:8] == b"0       " and len(data) >= HEADER_BYTES:
        pairs = _parse_stage_annotations(data, epoch_len_s)
    else:
        pairs = _parse_stage_csv(data.decode("utf-8-sig"))
    return Hypnogram(epoch_len_s=epoch_len_s, stages=_stages_from_pairs(pairs))


def format_hypnogram(hypnogram: Hypnogram, header: bool = True) -> str:
    lines = ["epoch_index,stage_code"] if header else []
    lines.extend(f"{i},{int(stage)}" for i, stage in enumerate(hypnogram.stages))
    return "\n".join(lines) + "\n"


# ── EDF 書き出し ──────────────────────────────────────────

def _field(value, width: int, name: str) -> bytes:
    text = str(value)
    if len(text) > width:
        raise ValueError(f"value {text!r} does not fit the {width}-byte field '{name}'")
    return text.ljust(width).encode("ascii")


def _format_number(value: float, width: int = 8) -> str:
    if float(value).is_integer() and len(str(int(value))) <= width:
        return str(int(value))
    for decimals in range(width, -1, -1):
        text = f"{value:.{decimals}f}".rstrip("0").rstrip(".")
        if len(text) <= width:
            return text
    raise ValueError(f"{value} cannot be written in {width} characters")


def _outward_bound(value: float, upper: bool, width: int = 8) -> float:
    """8文字で表せて、value を内側に含む境界値。"""
    for decimals in range(6, -1, -1):
        scale = 10.0 ** decimals
        bound = (math.ceil(value * scale) if upper else math.floor(value * scale)) / scale
        try:
            text = _format_number(bound, width)
        except ValueError:
            continue
        if float(text) >= value if upper else float(text) <= value:
            return float(text)
    raise ValueError(f"physical range bound {value} too large for an EDF header")


def _annotation_block(onset: float, events: list[tuple[float, float, str]], n_bytes: int | None) -> bytes:
    text = f"+{_format_number(onset, 20)}\x14\x14\x00"
    for ev_onset, duration, label in events:
        text += f"+{_format_number(ev_onset, 20)}\x15{_format_number(duration, 20)}\x14{label}\x14\x00"
    raw = text.encode("utf-8")
    if n_bytes is None:
        return raw
    return raw.ljust(n_bytes, b"\x00")


def write_edf(recording: Recording, record_duration_s: float | None = None, annotate: bool = False) -> bytes:
    """Recording を EDF（annotate=True ならハイプノグラム付き EDF+C）にする。"""
    duration = float(record_duration_s or recording.record_duration_s or 1.0)
    signal_specs = []
    n_records = None
    for channel in recording.channels:
        spr_float = channel.sample_rate_hz * duration
        spr = int(round(spr_float))
        if spr < 1 or abs(spr - spr_float) > 1e-9:
            raise ValueError(f"{channel.label}: {channel.sample_rate_hz} Hz is not representable "
                             f"with {duration} s records")
        if len(channel.samples) % spr:
            raise ValueError(f"{channel.label}: {len(channel.samples)} samples is not a whole number of records")
        count = len(channel.samples) // spr
        if n_records is not None and count != n_records:
            raise ValueError("channels cover different numbers of records")
        n_records = count

        samples = channel.samples
        if channel.physical_min is not None and channel.physical_max is not None:
            phys_min, phys_max = channel.physical_min, channel.physical_max
        else:
            lo, hi = float(samples.min()), float(samples.max())
            if hi <= lo:
                lo, hi = lo - 1.0, hi + 1.0
            phys_min, phys_max = _outward_bound(lo, upper=False), _outward_bound(hi, upper=True)
        dig_min, dig_max = channel.digital_min, channel.digital_max
        gain = (phys_max - phys_min) / (dig_max - dig_min)
        offset = phys_max - gain * dig_max
        digital = np.clip(np.round((samples - offset) / gain), dig_min, dig_max).astype("<i2")
        signal_specs.append({
            "label": channel.label, "transducer": channel.transducer,
            "physical_dimension": channel.physical_dimension,
            "physical_min": _format_number(phys_min), "physical_max": _format_number(phys_max),
            "digital_min": str(dig_min), "digital_max": str(dig_max),
            "prefilter": channel.prefilter, "samples_per_record": spr,
            "data": digital.reshape(count, spr),
        })
    if n_records is None:
        raise ValueError("recording has no channels to write")

    if annotate and recording.hypnogram is not None:
        epoch_len = recording.hypnogram.epoch_len_s
        per_record: list[list[tuple[float, float, str]]] = [[] for _ in range(n_records)]
        for i, stage in enumerate(recording.hypnogram.stages):
            onset = i * epoch_len
            label = "Sleep stage ?" if stage is SleepStage.UNSCORED else _EDF_STAGE_TEXT[stage]
            per_record[min(int(onset // duration), n_records - 1)].append((onset, epoch_len, label))
        blocks = [_annotation_block(r * duration, evs, None) for r, evs in enumerate(per_record)]
        n_bytes = max(len(b) for b in blocks)
        n_bytes += n_bytes % 2
        spr = n_bytes // 2
        data = np.stack([
            np.frombuffer(_annotation_block(r * duration, evs, n_bytes), dtype="<i2")
            for r, evs in enumerate(per_record)
        ])
        signal_specs.append({
            "label": ANNOTATION_LABEL, "transducer": "", "physical_dimension": "",
            "physical_min": "-1", "physical_max": "1", "digital_min": "-32768", "digital_max": "32767",
            "prefilter": "", "samples_per_record": spr, "data": data,
        })

    ns = len(signal_specs)
    out = io.BytesIO()
    out.write(_field("0", 8, "version"))
    out.write(_field(recording.patient_id, 80, "patient_id"))
    out.write(_field(recording.recording_id, 80, "recording_id"))
    out.write(_field(recording.start_date, 8, "start_date"))
    out.write(_field(recording.start_time, 8, "start_time"))
    out.write(_field(HEADER_BYTES * (ns + 1), 8, "header_bytes"))
    out.write(_field("EDF+C" if annotate and recording.hypnogram is not None else "", 44, "reserved"))
    out.write(_field(n_records, 8, "n_records"))
    out.write(_field(_format_number(duration), 8, "record_duration"))
    out.write(_field(ns, 4, "n_signals"))
    for name, width in _SIGNAL_FIELDS:
        for spec in signal_specs:
            out.write(_field(spec.get(name, ""), width, name))
    blocks = [spec["data"] for spec in signal_specs]
    out.write(np.concatenate(blocks, axis=1).astype("<i2").tobytes())
    return out.getvalue()


_EDF_STAGE_TEXT = {
    SleepStage.WAKE: "Sleep stage W",
    SleepStage.N1: "Sleep stage N1",
    SleepStage.N2: "Sleep stage N2",
    SleepStage.N3: "Sleep stage N3",
    SleepStage.REM: "Sleep stage R",
}


# ── データセット ──────────────────────────────────────────

_TRUE_WORDS = {"1", "true", "yes", "y", "x"}


def read_manifest(manifest: Path) -> pd.DataFrame:
    manifest = Path(manifest)
    df = pd.read_csv(manifest, dtype=str, keep_default_na=False)
    df.columns = [str(c).strip().lower() for c in df.columns]
    required = {"subject_id", "edf_path", "hypnogram_path"}
    missing = required - set(df.columns)
    if missing:
        raise ValueError(f"manifest {manifest} is missing columns: {sorted(missing)}")
    if "exclude" not in df.columns:
        df["exclude"] = ""
    if "reason" not in df.columns:
        df["reason"] = ""
    return df


def _resolve(base: Path, value: str) -> Path:
    path = Path(str(value).strip()).expanduser()
    return path if path.is_absolute() else (base / path)


def load_recording(subject_id: str, edf_path: Path, hypnogram_path: Path, epoch_len_s: float = 30.0,
                   required: Sequence[str] = ("C3", "C4", "ECG")) -> Recording:
    recording = parse_edf(Path(edf_path).read_bytes(), subject_id=subject_id, only=required)
    for name in required:
        select_channel(recording, name)
    hypnogram = parse_hypnogram(Path(hypnogram_path).read_bytes(), epoch_len_s)
    return recording.with_hypnogram(hypnogram)


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    edf_path: Path
    hypnogram_path: Path
    excluded: str | None = None


def iter_manifest(manifest: Path):
    """manifest の行を ManifestEntry として返す。パスは manifest の場所基準で解決済み。"""
    manifest = Path(manifest)
    base = manifest.parent
    for row in read_manifest(manifest).itertuples(index=False):
        subject = str(row.subject_id).strip()
        if not subject:
            continue
        reason = None
        if str(row.exclude).strip().lower() in _TRUE_WORDS:
            reason = str(row.reason).strip() or "flagged in manifest"
        yield ManifestEntry(subject, _resolve(base, row.edf_path), _resolve(base, row.hypnogram_path), reason)


def load_dataset(manifest: Path, epoch_len_s: float = 30.0,
                 required: Sequence[str] = ("C3", "C4", "ECG")):
    """manifest の全被験者を読む。

    戻り値は (recordings, errors, excluded)。個別の失敗は errors[subject_id] に集めて続行する。
    """
    recordings: list[Recording] = []
    errors: dict[str, str] = {}
    excluded: dict[str, str] = {}
    for entry in iter_manifest(manifest):
        if entry.excluded is not None:
            excluded[entry.subject_id] = entry.excluded
            logger.info("%s excluded: %s", entry.subject_id, entry.excluded)
            continue
        try:
            recordings.append(load_recording(entry.subject_id, entry.edf_path, entry.hypnogram_path,
                                             epoch_len_s, required))
        except (OSError, ValueError) as exc:
            errors[entry.subject_id] = str(exc)
            logger.warning("%s failed to load: %s", entry.subject_id, exc)
    return recordings, errors, excluded
