"""ステージ別のエポッククラスタリング（階層型）と、クラスタの特徴づけ。

入力はそのステージのエポックの 10 EEG 相対パワー + hf_abs。z スコアで距離を取り、
平均・Tukey HSD・被験者ごとの分布は元の単位で出す。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import spatial
from scipy.cluster import hierarchy
from sklearn.preprocessing import StandardScaler

from edf_io import SleepStage
from feature_table import FeatureTable, eeg_columns
from pipeline_config import ClusterConfig
from shared import atomic_write_text
from stats_lmm import studentized_range_sf

logger = logging.getLogger(__name__)

LINKAGE_METHODS = ("ward", "average", "complete")
TUKEY_COLUMNS = ["feature", "cluster_i", "cluster_j", "diff", "se", "q", "p"]


def cluster_features() -> list[str]:
    return [*eeg_columns(), "hf_abs"]


def display_name(feature: str) -> str:
    if feature.startswith("hf_"):
        return "HF"
    electrode, band = feature.split("_", 1)
    return f"{electrode.upper()} {band.capitalize()}"


@dataclass
class ClusterInput:
    stage: SleepStage
    matrix: np.ndarray  # 元の単位
    standardized: np.ndarray  # 残した列だけ
    feature_names: list[str]
    kept_features: list[str]
    mean: np.ndarray
    scale: np.ndarray
    subjects: np.ndarray
    epochs: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class LinkageTree:
    merges: np.ndarray  # scipy 形式 (n-1, 4): a, b, height, size
    method: str
    n_leaves: int

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]


@dataclass
class PcaResult:
    coords: np.ndarray
    explained_ratio: np.ndarray
    components: np.ndarray


@dataclass
class ClusterResult:
    stage: SleepStage
    k: int
    suggested_k: int
    labels: np.ndarray
    tree: LinkageTree
    data: ClusterInput
    means: pd.DataFrame
    pca: PcaResult
    tukey: pd.DataFrame
    top: dict[int, list[str]] = field(default_factory=dict)
    distribution: pd.DataFrame | None = None


def build_cluster_input(table: FeatureTable | pd.DataFrame, stage: SleepStage | str,
                        cap_per_subject: int | None = None, seed: int = 0) -> ClusterInput:
    """指定ステージの行を取り出し、必要なら被験者ごとに上限数まで無作為抽出して z スコア化。"""
    stage = SleepStage.from_name(stage) if isinstance(stage, str) else SleepStage(stage)
    frame = table.frame if isinstance(table, FeatureTable) else table
    features = cluster_features()
    rows = frame[frame["stage"] == int(stage)]
    if cap_per_subject is not None:
        rng = np.random.default_rng(seed)
        parts = []
        for _, group in rows.groupby("subject", sort=True):
            if len(group) > cap_per_subject:
                pick = np.sort(rng.choice(len(group), size=cap_per_subject, replace=False))
                group = group.iloc[pick]
            parts.append(group)
        rows = pd.concat(parts) if parts else rows.iloc[0:0]
    matrix = rows[features].to_numpy(dtype=np.float64)
    if matrix.shape[0] < 2:
        raise ValueError(f"{stage.label}: need at least 2 epochs to cluster, got {matrix.shape[0]}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{stage.label}: cluster input contains non-finite values")

    scaler = StandardScaler().fit(matrix)
    spread = matrix.std(axis=0)
    keep = spread > 0
    if not np.all(keep):
        logger.warning("%s: dropping constant features %s", stage.label,
                       ", ".join(f for f, k in zip(features, keep) if not k))
    standardized = scaler.transform(matrix)[:, keep]
    return ClusterInput(
        stage=stage,
        matrix=matrix,
        standardized=standardized,
        feature_names=features,
        kept_features=[f for f, k in zip(features, keep) if k],
        mean=scaler.mean_,
        scale=scaler.scale_,
        subjects=rows["subject"].astype(str).to_numpy(),
        epochs=rows["epoch"].to_numpy(dtype=np.int64),
    )


def hierarchical_cluster(matrix, method: str = "ward", metric: str = "euclidean") -> LinkageTree:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("hierarchical clustering needs at least 2 rows")
    if method not in LINKAGE_METHODS:
        raise ValueError(f"unsupported linkage method {method!r}; expected one of {LINKAGE_METHODS}")
    if metric != "euclidean":
        raise ValueError("only Euclidean distances are supported")
    return LinkageTree(merges=_lance_williams(x, method), method=method, n_leaves=x.shape[0])


def _lance_williams(x: np.ndarray, method: str) -> np.ndarray:
    """距離行列を Lance-Williams 式で更新する凝集法。scipy 形式の併合表を返す。

    クラスタは最小の葉番号のスロットに置き、距離が同じ候補は (a, b) の辞書順で最小のものを併合する。
    """
    n = x.shape[0]
    dist = spatial.distance.squareform(spatial.distance.pdist(x))
    dist[np.tril_indices(n)] = np.inf
    sizes = np.ones(n)
    ids = np.arange(n)
    active = np.ones(n, dtype=bool)
    row_arg = np.argmin(dist, axis=1)
    row_min = dist[np.arange(n), row_arg]
    merges = np.empty((n - 1, 4))

    def refresh(rows) -> None:
        for r in rows:
            row_arg[r] = int(np.argmin(dist[r]))
            row_min[r] = dist[r, row_arg[r]]

    for step in range(n - 1):
        a = int(np.argmin(np.where(active, row_min, np.inf)))
        b = int(row_arg[a])
        height = float(dist[a, b])
        size = sizes[a] + sizes[b]
        merges[step] = [min(ids[a], ids[b]), max(ids[a], ids[b]), height, size]

        others = np.flatnonzero(active)
        others = others[(others != a) & (others != b)]
        d_a = np.where(others < a, dist[others, a], dist[a, others])
        d_b = np.where(others < b, dist[others, b], dist[b, others])
        if method == "ward":
            s = sizes[others]
            merged = np.sqrt(np.maximum(((sizes[a] + s) * d_a ** 2 + (sizes[b] + s) * d_b ** 2
                                         - s * height ** 2) / (size + s), 0.0))
        elif method == "average":
            merged = (sizes[a] * d_a + sizes[b] * d_b) / size
        else:
            merged = np.maximum(d_a, d_b)

        active[b] = False
        dist[b, :] = np.inf
        dist[:, b] = np.inf
        below, above = others[others < a], others[others > a]
        dist[below, a] = merged[others < a]
        dist[a, above] = merged[others > a]
        sizes[a] = size
        ids[a] = n + step

        head = np.arange(b)
        stale = head[active[:b] & ((row_arg[:b] == a) | (row_arg[:b] == b))]
        refresh([a, *stale[stale != a].tolist()])
        closer = merged[others < a]
        better = (closer < row_min[below]) | ((closer == row_min[below]) & (a < row_arg[below]))
        row_min[below[better]] = closer[better]
        row_arg[below[better]] = a
    return merges


def _relabel(labels: np.ndarray) -> np.ndarray:
    """出現順に 0, 1, 2, ... と振り直す。"""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].astype(np.int64)


def cut_tree(tree: LinkageTree, k: int | None = None, height: float | None = None) -> np.ndarray:
    if (k is None) == (height is None):
        raise ValueError("give exactly one of k or height")
    if k is not None:
        if not 1 <= int(k) <= tree.n_leaves:
            raise ValueError(f"k must be in [1, {tree.n_leaves}], got {k}")
        labels = hierarchy.cut_tree(tree.merges, n_clusters=int(k)).ravel()
    else:
        labels = hierarchy.cut_tree(tree.merges, height=float(height)).ravel()
    return _relabel(labels)


def suggest_k(tree: LinkageTree, k_max: int = 10) -> int:
    """k クラスタに切ったとき、外す最小の併合高さ / 残す最大の併合高さ が最大になる k。"""
    h = tree.heights
    n = tree.n_leaves
    best_k, best_ratio = 2, -np.inf
    for k in range(2, min(k_max, n - 1) + 1):
        removed, kept = h[n - k], h[n - k - 1]
        ratio = np.inf if kept <= 0 < removed else (removed / kept if kept > 0 else 1.0)
        if ratio > best_ratio:
            best_k, best_ratio = k, ratio
    return best_k


def pca_project(matrix, dims: int = 2, allow_rank_deficient: bool = False) -> PcaResult:
    """中心化した行列の SVD。各主成分は絶対値最大の負荷が正になるよう符号をそろえる。

    dims が数値ランクを超えるときは ValueError。allow_rank_deficient=True なら警告して
    寄与率 0 の成分をそのまま返す。
    """
    x = np.asarray(matrix, dtype=np.float64)
    limit = min(x.shape[0] - 1, x.shape[1])
    if dims < 1 or dims > limit:
        raise ValueError(f"cannot project {x.shape[0]}x{x.shape[1]} data onto {dims} components")
    centred = x - x.mean(axis=0)
    rank = int(np.linalg.matrix_rank(centred))
    if dims > rank:
        if not allow_rank_deficient:
            raise ValueError(f"data of rank {rank} cannot be projected onto {dims} components")
        logger.warning("PCA: data has rank %d; components beyond it carry no variance", rank)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    total = float(np.sum(s ** 2))
    ratios = (s ** 2 / total) if total > 0 else np.zeros_like(s)
    return PcaResult(coords=centred @ vt[:dims].T, explained_ratio=ratios[:dims], components=vt[:dims])


def cluster_means(labels, matrix, feature_names=None) -> pd.DataFrame:
    labels = np.asarray(labels)
    x = np.asarray(matrix, dtype=np.float64)
    if labels.shape[0] != x.shape[0]:
        raise ValueError("labels and rows are not aligned")
    k = int(labels.max()) + 1 if labels.size else 0
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(x.shape[1])]
    rows = []
    for c in range(k):
        member = labels == c
        if not np.any(member):
            raise ValueError(f"cluster {c} is empty")
        rows.append(x[member].mean(axis=0))
    out = pd.DataFrame(rows, columns=names)
    out.insert(0, "n_epochs", [int(np.sum(labels == c)) for c in range(k)])
    out.index.name = "cluster"
    return out


def tukey_hsd(labels, values, alpha: float = 0.05, feature: str = "") -> pd.DataFrame:
    """全ペアの Tukey-Kramer 比較。サイズ 2 未満のクラスタは除いて警告する。"""
    labels = np.asarray(labels)
    y = np.asarray(values, dtype=np.float64)
    groups = {}
    for c in np.unique(labels):
        member = y[labels == c]
        if member.size < 2:
            logger.warning("%scluster %s has %d epoch(s); left out of Tukey HSD",
                           f"{feature}: " if feature else "", c, member.size)
            continue
        groups[int(c)] = member
    if len(groups) < 2:
        return pd.DataFrame(columns=[*TUKEY_COLUMNS, "reject"])

    k = len(groups)
    total = sum(g.size for g in groups.values())
    df = total - k
    mse = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups.values()) / df
    rows = []
    for i, j in combinations(sorted(groups), 2):
        gi, gj = groups[i], groups[j]
        diff = float(gi.mean() - gj.mean())
        se = float(np.sqrt(mse / 2.0 * (1.0 / gi.size + 1.0 / gj.size)))
        if se > 0:
            q = abs(diff) / se
            p = float(studentized_range_sf(q, k, df))
        else:
            q = 0.0 if diff == 0 else np.inf
            p = 1.0 if diff == 0 else 0.0
        rows.append({"feature": feature, "cluster_i": i, "cluster_j": j, "diff": diff,
                     "se": se, "q": q, "p": min(max(p, 0.0), 1.0)})
    out = pd.DataFrame(rows, columns=TUKEY_COLUMNS)
    out["reject"] = out["p"] < alpha
    return out


def top_features(tukey: pd.DataFrame, means: pd.DataFrame, grand_mean: pd.Series,
                 scale: pd.Series, top_n: int = 5) -> dict[int, list[str]]:
    """クラスタごとに「他の全クラスタとの最大 p が小さい順、標準化差が大きい順」で並べ、↑/↓ を付ける。"""
    out: dict[int, list[str]] = {}
    features = [f for f in grand_mean.index if f in means.columns]
    for c in means.index:
        ranked = []
        for f in features:
            pairs = tukey[(tukey["feature"] == f) & ((tukey["cluster_i"] == c) | (tukey["cluster_j"] == c))]
            worst_p = float(pairs["p"].max()) if len(pairs) else 1.0
            delta = float(means.loc[c, f] - grand_mean[f])
            size = abs(delta) / float(scale[f]) if scale[f] > 0 else 0.0
            ranked.append((worst_p, -size, f, delta))
        ranked.sort()
        out[int(c)] = [f"{'↑' if delta > 0 else '↓'} {display_name(f)}" for _, _, f, delta in ranked[:top_n]]
    return out


def subject_distribution(labels, subjects, k: int | None = None) -> pd.DataFrame:
    """被験者ごとの各クラスタ滞在割合（行で正規化）。ロング形式。"""
    labels = np.asarray(labels, dtype=np.int64)
    subjects = np.asarray(subjects).astype(str)
    if labels.shape[0] != subjects.shape[0]:
        raise ValueError("labels and subjects are not aligned")
    k = int(k if k is not None else (labels.max() + 1 if labels.size else 0))
    counts = pd.crosstab(pd.Series(subjects, name="subject"), pd.Series(labels, name="cluster"))
    counts = counts.reindex(columns=range(k), fill_value=0)
    proportions = counts.div(counts.sum(axis=1), axis=0)
    long = proportions.stack().rename("proportion").reset_index()
    return long[["subject", "cluster", "proportion"]]


def run_stage_clustering(table: FeatureTable | pd.DataFrame, stage: SleepStage | str, k: int | None = None,
                         config: ClusterConfig | None = None) -> ClusterResult:
    cfg = config or ClusterConfig()
    data = build_cluster_input(table, stage, cfg.cap_per_subject, cfg.seed)
    tree = hierarchical_cluster(data.standardized, cfg.linkage)
    suggested = suggest_k(tree, cfg.k_max) if data.n > 2 else 1
    k = int(k if k is not None else cfg.k.get(data.stage.label, suggested))
    k = min(k, data.n)
    labels = cut_tree(tree, k=k)
    logger.info("%s: %d epochs, k=%d (gap rule suggests %d)", data.stage.label, data.n, k, suggested)

    means = cluster_means(labels, data.matrix, data.feature_names)
    tukey = pd.concat(
        [tukey_hsd(labels, data.matrix[:, j], cfg.alpha, name) for j, name in enumerate(data.feature_names)],
        ignore_index=True,
    )
    grand = pd.Series(data.mean, index=data.feature_names)
    scale = pd.Series(data.scale, index=data.feature_names)
    top = top_features(tukey, means, grand, scale, cfg.top_n) if k > 1 else {}
    dims = min(2, data.standardized.shape[1], data.n - 1)
    pca = pca_project(data.standardized, dims, allow_rank_deficient=True)
    return ClusterResult(
        stage=data.stage, k=k, suggested_k=suggested, labels=labels, tree=tree, data=data,
        means=means, pca=pca, tukey=tukey, top=top,
        distribution=subject_distribution(labels, data.subjects, k),
    )


def _csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")


def write_cluster_outputs(result: ClusterResult, out_dir: Path) -> dict[str, Path]:
    """ラベル・平均・Tukey・PCA・被験者分布・併合表の CSV と top_features を書く。"""
    out_dir = Path(out_dir)
    stage = result.stage.label
    data = result.data
    labels = pd.DataFrame({"subject": data.subjects, "epoch": data.epochs,
                           "stage": int(result.stage), "cluster": result.labels})
    means = result.means.reset_index()
    tukey = result.tukey[TUKEY_COLUMNS]
    coords = result.pca.coords
    pca = pd.DataFrame({"subject": data.subjects, "epoch": data.epochs,
                        "pc1": coords[:, 0], "pc2": coords[:, 1] if coords.shape[1] > 1 else 0.0,
                        "cluster": result.labels})
    merges = result.tree.merges
    linkage = pd.DataFrame({"left": merges[:, 0].astype(np.int64), "right": merges[:, 1].astype(np.int64),
                            "height": merges[:, 2], "size": merges[:, 3].astype(np.int64)})
    top = pd.DataFrame([{"cluster": c, "rank": i + 1, "feature": text}
                        for c, items in sorted(result.top.items()) for i, text in enumerate(items)],
                       columns=["cluster", "rank", "feature"])
    outputs = {
        "labels": (labels, f"{stage}_labels.csv"),
        "means": (means, f"{stage}_means.csv"),
        "tukey": (tukey, f"{stage}_tukey.csv"),
        "pca": (pca, f"{stage}_pca.csv"),
        "distribution": (result.distribution, f"{stage}_distribution.csv"),
        "linkage": (linkage, f"{stage}_linkage.csv"),
        "top_features": (top, f"{stage}_top_features.csv"),
    }
    written = {}
    for key, (frame, name) in outputs.items():
        path = out_dir / name
        atomic_write_text(path, _csv(frame))
        written[key] = path
    return written
