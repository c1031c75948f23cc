"""Shared utilities for backend modules."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

LOG_FORMAT = "%(levelname)s  %(name)s  %(message)s"


def atomic_write_text(path: Path, text: str, encoding: str = "utf-8") -> None:
    """一時ファイル + rename で書き込み、クラッシュ時のファイル破損（途中書き）を防ぐ。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    # newline="" で改行を変換しない（OS によって CSV のバイト列が変わらないように）
    with open(tmp, "w", encoding=encoding, newline="") as handle:
        handle.write(text)
    os.replace(tmp, path)


def atomic_write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def config_hash(payload: dict) -> str:
    """設定の正規化 JSON（キー順固定）の SHA-256 先頭16桁。キャッシュキーと来歴に使う。"""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def file_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        while True:
            chunk = handle.read(chunk_size)
            if not chunk:
                break
            digest.update(chunk)
    return digest.hexdigest()


def resolve_log_level(value: str | None) -> int:
    name = str(value or "INFO").strip().upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


def setup_logging(level: str | None = None) -> None:
    """CLI の入口で一度だけ呼ぶ。レベルは引数 > 環境変数 BHC_LOG > INFO。"""
    chosen = level if level is not None else os.environ.get("BHC_LOG")
    logging.basicConfig(level=resolve_log_level(chosen), format=LOG_FORMAT)
