"""バックエンド共通のパス解決。

出力と設定を性質で分けて解決する:
  ① 解析出力（index.json・特徴量CSV・モデル結果・図）  → DATA_DIR
  ② 環境設定（bhc.toml）                              → CONFIG_DIR

環境変数でルートを差し替えられる:
  BHC_DATA_DIR   … 出力ルート（設定ファイルに output_dir が無いときの既定）
  BHC_CONFIG_DIR … `--config` 省略時に bhc.toml を探すディレクトリ
どちらも未指定のときはリポジトリ直下 `data/`。
"""
from __future__ import annotations

import os
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
_DEFAULT_DATA_DIR = REPO_ROOT / "data"


def _dir_from_env(var: str, default: Path) -> Path:
    value = os.environ.get(var)
    if value:
        try:
            return Path(value).expanduser().resolve()
        except Exception:
            pass
    return default


# ① 解析出力ルート
DATA_DIR = _dir_from_env("BHC_DATA_DIR", _DEFAULT_DATA_DIR)
# ② 環境設定ディレクトリ
CONFIG_DIR = _dir_from_env("BHC_CONFIG_DIR", _DEFAULT_DATA_DIR)

DEFAULT_CONFIG_FILE = CONFIG_DIR / "bhc.toml"
EXAMPLE_CONFIG_FILE = REPO_ROOT / "data" / "bhc.example.toml"

# ── 出力ディレクトリ内のファイル名 ────────────────────────
INDEX_FILE_NAME = "index.json"
MANIFEST_FILE_NAME = "run_manifest.json"
CACHE_DB_NAME = "cache.db"
FEATURES_CSV_NAME = "features.csv"
HRV_DEBUG_CSV_NAME = "hrv_epochs.csv"
EEG_DEBUG_CSV_NAME = "eeg_epochs.csv"
MODEL_DIR_NAME = "model"
CLUSTER_DIR_NAME = "cluster"
PLOTS_DIR_NAME = "plots"


def resolve_config_file(explicit: str | os.PathLike | None) -> Path:
    """`--config` が無ければ CONFIG_DIR の bhc.toml、それも無ければ同梱の例を使う。"""
    if explicit:
        return Path(explicit).expanduser().resolve()
    if DEFAULT_CONFIG_FILE.exists():
        return DEFAULT_CONFIG_FILE
    return EXAMPLE_CONFIG_FILE
