"""解析結果の静的 SVG 図。

ステージ別の滞在時間ヒストグラム、被験者平均の箱ひげ図、残差のヒストグラム + Q-Q と
当てはめ値に対する残差、PCA 散布図、クラスタの樹形図、被験者ごとのクラスタ割合の積み上げ棒。
上流の CSV / JSON だけを読む。
"""
from __future__ import annotations

import io
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.cluster import hierarchy  # noqa: E402

from edf_io import SCORED_STAGES  # noqa: E402
from feature_table import read_table_csv, stage_epoch_counts, subject_stage_means  # noqa: E402
from paths import CLUSTER_DIR_NAME, FEATURES_CSV_NAME, MODEL_DIR_NAME, PLOTS_DIR_NAME  # noqa: E402
from shared import atomic_write_bytes  # noqa: E402

logger = logging.getLogger(__name__)

# 同じ入力から同じバイト列を出すための固定値
matplotlib.rcParams.update({
    "svg.hashsalt": "bhc",
    "svg.fonttype": "none",
    "font.size": 9,
})

BOXPLOT_FEATURES = ("c3_delta", "c3_beta", "c4_delta", "c4_beta", "hf_norm")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, step: str):
        self.step = step
        super().__init__(f"{path} not found; run `bhc {step}` first")


def _require(path: Path, step: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, step)
    return path


def save_svg(fig, path: Path) -> Path:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    return path


def histogram_counts(values, bins: int | np.ndarray = 20) -> tuple[np.ndarray, np.ndarray]:
    return np.histogram(np.asarray(values, dtype=np.float64), bins=bins)


def stage_histograms(counts: pd.DataFrame, path: Path, bins: int = 10) -> Path:
    """被験者ごとの各ステージ滞在時間（分）の分布。"""
    stages = [s.label for s in SCORED_STAGES]
    fig, axes = plt.subplots(1, len(stages), figsize=(3 * len(stages), 2.6), sharey=True)
    for ax, stage in zip(axes, stages):
        minutes = counts.loc[counts["stage_name"] == stage, "minutes"].to_numpy()
        hist, edges = histogram_counts(minutes, bins)
        ax.stairs(hist, edges, fill=True, alpha=0.7)
        ax.set_title(stage)
        ax.set_xlabel("minutes")
    axes[0].set_ylabel("subjects")
    fig.tight_layout()
    return save_svg(fig, path)


def subject_boxplot(means: pd.DataFrame, feature: str, path: Path) -> Path:
    """被験者平均のステージ別箱ひげ図。1人だけでも潰れた箱として描く。"""
    stages = [s for s in SCORED_STAGES if s in set(means["stage"].astype(int))]
    data = [means.loc[means["stage"] == int(s), "mean"].to_numpy() for s in stages]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.boxplot(data, tick_labels=[s.label for s in stages], whis=1.5)
    ax.set_title(feature)
    ax.set_ylabel("subject mean")
    fig.tight_layout()
    return save_svg(fig, path)


def residual_plots(diagnostics: dict, path: Path, title: str = "") -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(7, 3))
    hist = diagnostics["histogram"]
    left.stairs(hist["counts"], hist["edges"], fill=True, alpha=0.7)
    left.set_title("conditional residuals")
    qq = diagnostics["qq"]
    right.scatter(qq["theoretical"], qq["sample"], s=4)
    if qq["theoretical"]:
        lo, hi = min(qq["theoretical"]), max(qq["theoretical"])
        sd = diagnostics.get("sd", 1.0)
        right.plot([lo, hi], [lo * sd, hi * sd], color="black", linewidth=0.8)
    right.set_xlabel("normal quantile")
    right.set_title(f"Q-Q (r = {diagnostics.get('qq_correlation', float('nan')):.3f})")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return save_svg(fig, path)


def fitted_residual_scatter(diagnostics: dict, path: Path, title: str = "") -> Path:
    """条件付き残差 対 当てはめ値。ゼロ線つき。"""
    points = diagnostics["fitted_vs_residual"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.scatter(points["fitted"], points["residual"], s=4, alpha=0.6)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("fitted")
    ax.set_ylabel("conditional residual")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path)


def dendrogram_plot(linkage: pd.DataFrame, path: Path, title: str = "", k: int | None = None,
                    max_leaves: int = 30) -> Path:
    """併合表の樹形図。葉が多いときは上位 max_leaves 個のまとまりに畳む。k を渡すと切断線を引く。"""
    merges = linkage[["left", "right", "height", "size"]].to_numpy(dtype=np.float64)
    n_leaves = merges.shape[0] + 1
    fig, ax = plt.subplots(figsize=(6, 3.2))
    hierarchy.dendrogram(merges, ax=ax, truncate_mode="lastp", p=min(max_leaves, n_leaves),
                         no_labels=True, color_threshold=0.0, above_threshold_color="tab:blue")
    if k is not None and 1 < k < n_leaves:
        heights = np.sort(merges[:, 2])
        ax.axhline(0.5 * (heights[n_leaves - k - 1] + heights[n_leaves - k]),
                   color="black", linestyle="--", linewidth=0.8)
    ax.set_ylabel("merge height")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path)


def pca_scatter(pca: pd.DataFrame, path: Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for cluster, group in pca.groupby("cluster", sort=True):
        ax.scatter(group["pc1"], group["pc2"], s=5, label=f"cluster {cluster}")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=7, markerscale=2)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path)


def distribution_bars(distribution: pd.DataFrame, path: Path, title: str = "") -> Path:
    wide = distribution.pivot(index="subject", columns="cluster", values="proportion").fillna(0.0).sort_index()
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(wide) + 1.5), 3))
    bottom = np.zeros(len(wide))
    for cluster in wide.columns:
        ax.bar(wide.index, wide[cluster].to_numpy(), bottom=bottom, label=f"cluster {cluster}")
        bottom += wide[cluster].to_numpy()
    ax.set_ylim(0, 1)
    ax.set_ylabel("proportion of epochs")
    ax.tick_params(axis="x", labelrotation=90)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return save_svg(fig, path)


def render_all(out_dir: Path, epoch_len_s: float = 30.0) -> list[Path]:
    """出力ディレクトリにある成果物から図をすべて作る。特徴量 CSV が無ければエラー。"""
    out_dir = Path(out_dir)
    plots_dir = out_dir / PLOTS_DIR_NAME
    table = read_table_csv(_require(out_dir / FEATURES_CSV_NAME, "features"))
    written = [stage_histograms(stage_epoch_counts(table, epoch_len_s), plots_dir / "stage_minutes.svg")]
    for feature in BOXPLOT_FEATURES:
        if feature in table.frame.columns:
            written.append(subject_boxplot(subject_stage_means(table, feature), feature,
                                           plots_dir / f"boxplot_{feature}.svg"))

    model_dir = out_dir / MODEL_DIR_NAME
    for diag_file in sorted(model_dir.glob("*_diagnostics.json")):
        label = diag_file.name.removesuffix("_diagnostics.json")
        diagnostics = json.loads(diag_file.read_text(encoding="utf-8"))
        written.append(residual_plots(diagnostics, plots_dir / f"residuals_{label}.svg", label))
        if "fitted_vs_residual" in diagnostics:
            written.append(fitted_residual_scatter(diagnostics, plots_dir / f"fitted_residual_{label}.svg", label))
    if not any(model_dir.glob("*_diagnostics.json")):
        logger.info("no model diagnostics found; residual plots skipped")

    cluster_dir = out_dir / CLUSTER_DIR_NAME
    for pca_file in sorted(cluster_dir.glob("*_pca.csv")):
        stage = pca_file.name.removesuffix("_pca.csv")
        written.append(pca_scatter(pd.read_csv(pca_file, dtype={"subject": str}),
                                   plots_dir / f"pca_{stage}.svg", stage))
        dist_file = cluster_dir / f"{stage}_distribution.csv"
        if dist_file.exists():
            written.append(distribution_bars(pd.read_csv(dist_file, dtype={"subject": str}),
                                             plots_dir / f"distribution_{stage}.svg", stage))
        linkage_file = cluster_dir / f"{stage}_linkage.csv"
        if linkage_file.exists():
            labels_file = cluster_dir / f"{stage}_labels.csv"
            k = int(pd.read_csv(labels_file)["cluster"].nunique()) if labels_file.exists() else None
            written.append(dendrogram_plot(pd.read_csv(linkage_file), plots_dir / f"dendrogram_{stage}.svg", stage, k))
    logger.info("wrote %d plots to %s", len(written), plots_dir)
    return written

