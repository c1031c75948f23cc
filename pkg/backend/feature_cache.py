"""被験者ごとのエポック特徴量（HRV / EEG）を SQLite にキャッシュする。

キーは (subject_id, input_digest, config_hash)。EDF・ヒプノグラムのどちらかが変わるか、
計算に効く設定が変わればヒットしない。
"""
from __future__ import annotations

import json
import logging
import sqlite3
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from ecg_hrv import HrvEpoch
from eeg_bands import EegEpoch

logger = logging.getLogger(__name__)


def _connect(db_file: Path) -> sqlite3.Connection:
    db_file.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_file)
    conn.execute("PRAGMA journal_mode = WAL")
    conn.execute("PRAGMA busy_timeout = 10000")
    conn.execute("""CREATE TABLE IF NOT EXISTS epoch_features (
        subject_id TEXT NOT NULL,
        input_digest TEXT NOT NULL,
        config_hash TEXT NOT NULL,
        payload_json TEXT NOT NULL,
        updated_at TEXT NOT NULL,
        PRIMARY KEY (subject_id, input_digest, config_hash)
    )""")
    return conn


def encode_features(hrv: list[HrvEpoch], eeg: dict[str, list[EegEpoch]]) -> str:
    payload = {
        "hrv": [asdict(e) for e in hrv],
        "eeg": {name: [asdict(e) for e in epochs] for name, epochs in eeg.items()},
    }
    return json.dumps(payload, sort_keys=True)


def decode_features(text: str) -> tuple[list[HrvEpoch], dict[str, list[EegEpoch]]]:
    payload = json.loads(text)
    hrv = [HrvEpoch(**item) for item in payload["hrv"]]
    eeg = {name: [EegEpoch(**item) for item in items] for name, items in payload["eeg"].items()}
    return hrv, eeg


def load_features(db_file: Path, subject_id: str, input_digest: str, config_hash: str):
    """ヒットすれば (hrv, eeg)、なければ None。"""
    if not Path(db_file).exists():
        return None
    conn = _connect(Path(db_file))
    try:
        row = conn.execute(
            """SELECT payload_json FROM epoch_features
               WHERE subject_id = ? AND input_digest = ? AND config_hash = ?""",
            (subject_id, input_digest, config_hash),
        ).fetchone()
    finally:
        conn.close()
    if not row:
        return None
    try:
        return decode_features(row[0])
    except (KeyError, TypeError, ValueError) as exc:
        logger.warning("%s: ignoring unreadable cache entry: %s", subject_id, exc)
        return None


def store_features(db_file: Path, subject_id: str, input_digest: str, config_hash: str,
                   hrv: list[HrvEpoch], eeg: dict[str, list[EegEpoch]]) -> None:
    conn = _connect(Path(db_file))
    try:
        with conn:
            # 同じ被験者の古い組み合わせは残さない
            conn.execute("DELETE FROM epoch_features WHERE subject_id = ?", (subject_id,))
            conn.execute(
                """INSERT INTO epoch_features (subject_id, input_digest, config_hash, payload_json, updated_at)
                   VALUES (?, ?, ?, ?, ?)""",
                (subject_id, input_digest, config_hash, encode_features(hrv, eeg),
                 datetime.now(timezone.utc).isoformat(timespec="seconds")),
            )
    finally:
        conn.close()
