"""bhc – 心拍・脳波カップリング解析のコマンドライン。

  python backend/bhc.py synth    --out data/synth --profile mini
  python backend/bhc.py run-all  --config data/bhc.toml --out data/out --jobs 4

サブコマンドは ingest → features → fit → cluster → plot の順に前段の成果物を読む。
run-all はこれを一度に流す。終了コード: 0 成功 / 2 一部の被験者が失敗 / 1 致命的。
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

# Make backend/ importable when run as `python backend/bhc.py`
sys.path.insert(0, str(Path(__file__).parent))

import pandas as pd

import synth
from cluster_analysis import run_stage_clustering, write_cluster_outputs
from ecg_hrv import hrv_debug_frame, process_ecg
from edf_io import iter_manifest, load_recording, parse_hypnogram
from eeg_bands import eeg_debug_frame, process_eeg
from feature_cache import load_features, store_features
from feature_table import SubjectFeatures, build_table, read_table_csv, write_table_csv
from paths import (
    CACHE_DB_NAME,
    CLUSTER_DIR_NAME,
    DATA_DIR,
    EEG_DEBUG_CSV_NAME,
    FEATURES_CSV_NAME,
    HRV_DEBUG_CSV_NAME,
    INDEX_FILE_NAME,
    MANIFEST_FILE_NAME,
    MODEL_DIR_NAME,
    resolve_config_file,
)
from pipeline_config import TOOL_VERSION, PipelineConfig, RunManifest, load_config
from plots import MissingArtifactError, render_all
from shared import atomic_write_json, atomic_write_text, config_hash, file_sha256, setup_logging
from stats_lmm import (
    RankDeficientError,
    fit_model,
    fit_to_json,
    format_effects_table,
    residual_diagnostics,
    specs_for,
    stage_slopes,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


class PipelineError(RuntimeError):
    """続行できない失敗（設定・前段の成果物・全被験者の失敗）。"""


def _get_psutil():
    try:
        import psutil
        return psutil
    except Exception:
        return None


def _csv_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")


def _require(path: Path, step: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, step)
    return path


class Run:
    """1回の CLI 呼び出しの文脈。警告・エラー・時間・出力を集めて最後にマニフェストへ書く。"""

    def __init__(self, config: PipelineConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.hash = config.hash()
        self.manifest = self._load_manifest()

    def _load_manifest(self) -> RunManifest:
        path = self.out_dir / MANIFEST_FILE_NAME
        if path.exists():
            try:
                previous = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
                if previous.config_hash == self.hash and previous.tool_version == TOOL_VERSION:
                    return previous
                logger.info("config changed since the last run; starting a new run manifest")
            except ValueError as exc:
                logger.warning("ignoring unreadable %s: %s", path, exc)
        return RunManifest(config_hash=self.hash)

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.manifest.warnings.append(message)

    def fail(self, key: str, message: str) -> None:
        logger.warning("%s: %s", key, message)
        self.manifest.errors[key] = message

    def record(self, path: Path) -> Path:
        rel = path.relative_to(self.out_dir).as_posix()
        self.manifest.outputs[rel] = file_sha256(path)
        return path

    def write_text(self, path: Path, text: str) -> Path:
        atomic_write_text(path, text)
        return self.record(path)

    def write_json(self, path: Path, payload) -> Path:
        atomic_write_json(path, payload)
        return self.record(path)

    def step(self, name: str, func, *args) -> int:
        self.manifest.commands.append(name)
        started = time.perf_counter()
        try:
            return func(self, *args)
        finally:
            self.manifest.timings_s[name] = round(time.perf_counter() - started, 3)

    def finish(self) -> None:
        psutil = _get_psutil()
        if psutil is not None:
            try:
                self.manifest.resources["peak_rss_mb"] = round(psutil.Process().memory_info().rss / 2**20, 1)
                self.manifest.resources["cpu_count"] = float(psutil.cpu_count() or 0)
            except Exception:
                pass
        atomic_write_json(self.out_dir / MANIFEST_FILE_NAME, self.manifest.model_dump(mode="json"))


# ── ingest ────────────────────────────────────────────────

def _required_channels(config: PipelineConfig) -> tuple[str, ...]:
    return (*config.dataset.electrodes, config.dataset.ecg_channel)


def cmd_ingest(run: Run, manifest: Path | None = None) -> int:
    manifest = manifest or run.config.dataset.manifest
    if manifest is None:
        raise PipelineError("no dataset manifest: set [dataset].manifest or pass --manifest")
    manifest = Path(manifest).resolve()
    if not manifest.exists():
        raise PipelineError(f"manifest not found: {manifest}")

    epoch_len = run.config.dataset.epoch_len_s
    required = _required_channels(run.config)
    recordings, excluded, errors = [], {}, {}
    for entry in iter_manifest(manifest):
        if entry.excluded is not None:
            excluded[entry.subject_id] = entry.excluded
            logger.info("%s excluded: %s", entry.subject_id, entry.excluded)
            continue
        try:
            recording = load_recording(entry.subject_id, entry.edf_path, entry.hypnogram_path, epoch_len, required)
        except (OSError, ValueError) as exc:
            errors[entry.subject_id] = str(exc)
            run.fail(entry.subject_id, str(exc))
            continue
        recordings.append({
            "subject_id": entry.subject_id,
            "edf_path": str(entry.edf_path.resolve()),
            "edf_sha256": file_sha256(entry.edf_path),
            "hypnogram_path": str(entry.hypnogram_path.resolve()),
            "hypnogram_sha256": file_sha256(entry.hypnogram_path),
            "n_epochs": recording.n_epochs,
            "duration_s": recording.duration_s,
            "channels": [
                {"label": ch.label, "fs": ch.sample_rate_hz, "n_samples": int(ch.samples.size)}
                for ch in recording.channels
            ],
        })

    index = {
        "manifest": str(manifest),
        "epoch_len_s": epoch_len,
        "recordings": sorted(recordings, key=lambda r: r["subject_id"]),
        "excluded": excluded,
        "errors": errors,
    }
    run.write_json(run.out_dir / INDEX_FILE_NAME, index)
    run.manifest.row_counts["recordings"] = len(recordings)
    logger.info("ingest: %d recordings, %d excluded, %d failed", len(recordings), len(excluded), len(errors))
    if not recordings:
        raise PipelineError("no recording could be loaded")
    return EXIT_PARTIAL if errors else EXIT_OK


# ── features ──────────────────────────────────────────────

def _compute_subject(job: tuple[dict, PipelineConfig]):
    """ワーカープロセスで1被験者の HRV / EEG エポック特徴量を計算する。"""
    entry, config = job
    subject = entry["subject_id"]
    try:
        recording = load_recording(subject, Path(entry["edf_path"]), Path(entry["hypnogram_path"]),
                                   config.dataset.epoch_len_s, _required_channels(config))
        hrv = process_ecg(recording, config.ecg, config.dataset.ecg_channel)
        eeg = {e: process_eeg(recording, e, config.eeg) for e in config.dataset.electrodes}
        return subject, hrv, eeg, None
    except (OSError, ValueError) as exc:
        return subject, None, None, str(exc)


def _input_digest(entry: dict) -> str:
    return config_hash({"edf": entry["edf_sha256"], "hypnogram": entry["hypnogram_sha256"]})


def _load_index(run: Run) -> dict:
    path = _require(run.out_dir / INDEX_FILE_NAME, "ingest")
    return json.loads(path.read_text(encoding="utf-8"))


def cmd_features(run: Run) -> int:
    index = _load_index(run)
    entries = index["recordings"]
    cache_db = run.out_dir / CACHE_DB_NAME
    results: dict[str, tuple] = {}
    pending = []
    for entry in entries:
        hit = load_features(cache_db, entry["subject_id"], _input_digest(entry), run.hash)
        if hit is None:
            pending.append(entry)
        else:
            results[entry["subject_id"]] = ("cache", *hit)
    logger.info("features: %d cached, %d to compute (jobs=%d)", len(results), len(pending), run.config.run.jobs)

    jobs = [(entry, run.config) for entry in pending]
    if run.config.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(run.config.run.jobs, len(jobs))) as pool:
            computed = list(pool.map(_compute_subject, jobs))
    else:
        computed = [_compute_subject(job) for job in jobs]

    # キャッシュへの書き込みは親プロセスだけ
    for (entry, _), (subject, hrv, eeg, error) in zip(jobs, computed):
        if error is not None:
            run.fail(subject, error)
            continue
        if not any(e.valid for e in hrv):
            run.fail(subject, "corrupt ECG: no epoch produced a valid HF-HRV value")
            continue
        store_features(cache_db, subject, _input_digest(entry), run.hash, hrv, eeg)
        results[subject] = ("computed", hrv, eeg)

    subjects, hrv_frames, eeg_frames = [], [], []
    epoch_len = run.config.dataset.epoch_len_s
    for entry in entries:
        subject = entry["subject_id"]
        if subject not in results:
            continue
        _, hrv, eeg = results[subject]
        hypnogram = parse_hypnogram(Path(entry["hypnogram_path"]).read_bytes(), epoch_len)
        subjects.append(SubjectFeatures(subject, hypnogram, hrv, eeg))
        hrv_frames.append(hrv_debug_frame(subject, hrv))
        eeg_frames.extend(eeg_debug_frame(subject, epochs) for epochs in eeg.values())

    if not subjects:
        raise PipelineError("every subject failed feature extraction")
    table = build_table(subjects, exclusions=index.get("excluded", {}),
                        electrodes=run.config.dataset.electrodes,
                        bands=[b.name for b in run.config.eeg.bands],
                        provenance={"config_hash": run.hash})
    write_table_csv(table, run.out_dir / FEATURES_CSV_NAME)
    run.record(run.out_dir / FEATURES_CSV_NAME)
    run.write_text(run.out_dir / HRV_DEBUG_CSV_NAME, _csv_text(pd.concat(hrv_frames, ignore_index=True)))
    run.write_text(run.out_dir / EEG_DEBUG_CSV_NAME, _csv_text(pd.concat(eeg_frames, ignore_index=True)))
    run.manifest.row_counts["feature_rows"] = len(table)
    run.manifest.row_counts["feature_subjects"] = len(table.subjects)
    failed = len(entries) - len(subjects) + len(index.get("errors", {}))
    return EXIT_PARTIAL if failed else EXIT_OK


# ── fit ───────────────────────────────────────────────────

def cmd_fit(run: Run) -> int:
    table = read_table_csv(_require(run.out_dir / FEATURES_CSV_NAME, "features"))
    model_dir = run.out_dir / MODEL_DIR_NAME
    fitted = 0
    specs = specs_for(run.config.model, table.electrodes or run.config.dataset.electrodes)
    for spec in specs:
        try:
            fit, design = fit_model(table, spec, run.config.model)
        except RankDeficientError as exc:
            run.fail(f"model {spec.label}", str(exc))
            continue
        if not fit.converged:
            run.warn(f"model {spec.label}: optimizer stopped before convergence")
        if design.dropped_columns:
            run.warn(f"model {spec.label}: dropped empty columns {', '.join(design.dropped_columns)}")
        report = stage_slopes(fit, spec)
        label = spec.label
        run.write_text(model_dir / f"{label}_slopes.csv", _csv_text(report.slopes))
        run.write_text(model_dir / f"{label}_contrasts.csv", _csv_text(report.contrasts))
        run.write_text(model_dir / f"{label}_effects_table.csv", _csv_text(format_effects_table(report.slopes)))
        run.write_json(model_dir / f"{label}_fit.json", fit_to_json(fit))
        run.write_json(model_dir / f"{label}_diagnostics.json", residual_diagnostics(fit, design).to_json())
        run.manifest.row_counts[f"model_{label}_n_obs"] = fit.n_obs
        fitted += 1
    if not fitted:
        raise PipelineError("no model could be fitted")
    return EXIT_OK if fitted == len(specs) else EXIT_PARTIAL


# ── cluster ───────────────────────────────────────────────

def cmd_cluster(run: Run) -> int:
    table = read_table_csv(_require(run.out_dir / FEATURES_CSV_NAME, "features"))
    cluster_dir = run.out_dir / CLUSTER_DIR_NAME
    done = 0
    for stage in run.config.cluster.stages:
        try:
            result = run_stage_clustering(table, stage, None, run.config.cluster)
        except ValueError as exc:
            run.fail(f"cluster {stage}", str(exc))
            continue
        if result.k != result.suggested_k:
            logger.info("%s: configured k=%d differs from gap-rule suggestion %d", stage, result.k, result.suggested_k)
        for path in write_cluster_outputs(result, cluster_dir).values():
            run.record(path)
        run.manifest.row_counts[f"cluster_{stage}_epochs"] = int(result.labels.size)
        done += 1
    if not done:
        raise PipelineError("no stage could be clustered")
    return EXIT_OK if done == len(run.config.cluster.stages) else EXIT_PARTIAL


# ── plot ──────────────────────────────────────────────────

def cmd_plot(run: Run) -> int:
    for path in render_all(run.out_dir, run.config.dataset.epoch_len_s):
        run.record(path)
    return EXIT_OK


def cmd_run_all(run: Run, manifest: Path | None = None) -> int:
    codes = [run.step("ingest", cmd_ingest, manifest)]
    for name, func in (("features", cmd_features), ("fit", cmd_fit), ("cluster", cmd_cluster), ("plot", cmd_plot)):
        codes.append(run.step(name, func))
    return max(codes)


# ── entry point ───────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhc", description="Brain-heart coupling analysis of sleep recordings.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("ingest", "synth", "features", "fit", "cluster", "plot", "run-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config (default: $BHC_CONFIG_DIR/bhc.toml or the bundled example)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, help="worker processes for per-recording work")
        p.add_argument("--seed", type=int, help="random seed")
        if name in ("ingest", "run-all"):
            p.add_argument("--manifest", help="dataset manifest CSV (overrides [dataset].manifest)")
        if name == "synth":
            p.add_argument("--subjects", type=int)
            p.add_argument("--hours", type=float)
            p.add_argument("--profile", choices=sorted(synth.PROFILES), default="night")
    return parser


def _output_dir(config: PipelineConfig, default_name: str = "out") -> Path:
    return Path(config.run.output_dir or DATA_DIR / default_name).resolve()


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        config = load_config(resolve_config_file(args.config))
        config = config.with_overrides(
            output_dir=Path(args.out).expanduser() if args.out else None,
            jobs=args.jobs, seed=args.seed,
        )
    except (OSError, ValueError) as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_FATAL

    if args.command == "synth":
        out_dir = _output_dir(config, "synth")
        manifest = synth.write_dataset(out_dir, config.run.seed, args.subjects, args.hours, args.profile)
        print(f"Wrote synthetic dataset {manifest}")
        return EXIT_OK

    out_dir = _output_dir(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = Run(config, out_dir)
    manifest = Path(args.manifest).expanduser() if getattr(args, "manifest", None) else None
    commands = {
        "ingest": lambda: run.step("ingest", cmd_ingest, manifest),
        "features": lambda: run.step("features", cmd_features),
        "fit": lambda: run.step("fit", cmd_fit),
        "cluster": lambda: run.step("cluster", cmd_cluster),
        "plot": lambda: run.step("plot", cmd_plot),
        "run-all": lambda: cmd_run_all(run, manifest),
    }
    try:
        code = commands[args.command]()
    except (PipelineError, MissingArtifactError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        run.manifest.errors[args.command] = str(exc)
        code = EXIT_FATAL
    finally:
        run.finish()
    print(f"{args.command}: exit {code}, outputs in {out_dir}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
