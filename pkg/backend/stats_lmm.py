"""REML 線形混合モデル（被験者 / 被験者:ステージ の入れ子ランダム切片）と検定。

応答 hf_yj を、電極ごとの5帯域の相対パワー、ステージ（Wake 基準の指示変数）、
帯域×ステージ交互作用で説明する。分散比 θ = σ²_b / σ²_resid を対数で最適化し、
σ²_resid はプロファイルで消す。混合モデル方程式（Henderson）を Cholesky で解くので
n×n の V は作らない。
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, optimize, sparse, stats

from edf_io import SCORED_STAGES, SleepStage
from eeg_bands import BAND_NAMES
from feature_table import FeatureTable, feature_column
from pipeline_config import ModelConfig

logger = logging.getLogger(__name__)

LOG_THETA_MIN = -30.0
LOG_THETA_MAX = 20.0
EFFECT_COLUMNS = ["stage", "electrode", "band", "estimate", "std_error", "t_ratio", "p"]
EFFECTS_TABLE_COLUMNS = ["Sleep Stage", "Electrode", "EEG Band", "Estimate", "Std Error", "t Ratio", "Prob > t"]


class RankDeficientError(ValueError):
    def __init__(self, aliased: Sequence[str], hint: str = ""):
        self.aliased = list(aliased)
        message = f"design matrix is rank deficient; aliased columns: {', '.join(self.aliased)}"
        super().__init__(message + (f" ({hint})" if hint else ""))


# ── 推測の基本分布 ────────────────────────────────────────

def _check_df(df: float) -> float:
    if not np.isfinite(df) or df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    return float(df)


def t_cdf(t, df: float):
    return stats.t.cdf(t, _check_df(df))


def two_sided_p(t, df: float):
    """両側 p。t 分布の上側確率を使い、裾でも桁落ちしない。"""
    return np.minimum(1.0, 2.0 * stats.t.sf(np.abs(t), _check_df(df)))


def _check_groups(k: int) -> int:
    if int(k) < 2:
        raise ValueError(f"studentized range needs k >= 2 groups, got {k}")
    return int(k)


def studentized_range_cdf(q, k: int, df: float):
    return stats.studentized_range.cdf(q, _check_groups(k), _check_df(df))


def studentized_range_sf(q, k: int, df: float):
    return stats.studentized_range.sf(q, _check_groups(k), _check_df(df))


def studentized_range_ppf(prob: float, k: int, df: float) -> float:
    return float(stats.studentized_range.ppf(prob, _check_groups(k), _check_df(df)))


# ── モデル仕様と計画行列 ──────────────────────────────────

@dataclass(frozen=True)
class ModelSpec:
    electrodes: tuple[str, ...] = ("C3",)
    bands: tuple[str, ...] = BAND_NAMES
    response: str = "hf_yj"
    reference_stage: SleepStage = SleepStage.WAKE

    @property
    def label(self) -> str:
        return "+".join(self.electrodes)

    @property
    def covariates(self) -> list[str]:
        return [feature_column(e, b) for e in self.electrodes for b in self.bands]

    @property
    def contrast_stages(self) -> list[SleepStage]:
        return [s for s in SCORED_STAGES if s != self.reference_stage]


@dataclass(frozen=True)
class RandomBlock:
    """ランダム切片1種類。codes[i] は行 i の水準番号。"""

    name: str
    codes: np.ndarray
    levels: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.levels)

    def matrix(self) -> sparse.csr_matrix:
        n = self.codes.size
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.codes)), shape=(n, self.size))


@dataclass
class Design:
    y: np.ndarray
    X: np.ndarray
    column_names: list[str]
    blocks: list[RandomBlock]
    spec: ModelSpec
    dropped_columns: list[str] = field(default_factory=list)

    @property
    def Z(self) -> sparse.csr_matrix:
        return sparse.hstack([b.matrix() for b in self.blocks], format="csr")


def _interaction_name(covariate: str, stage: SleepStage) -> str:
    return f"{covariate}:stage[{stage.label}]"


def _stage_name(stage: SleepStage) -> str:
    return f"stage[{stage.label}]"


def _factorize(keys: Sequence) -> tuple[np.ndarray, tuple[str, ...]]:
    codes, uniques = pd.factorize(pd.Series(list(keys), dtype=str), sort=True)
    return codes.astype(np.int64), tuple(str(u) for u in uniques)


def build_design(table: FeatureTable | pd.DataFrame, spec: ModelSpec | None = None) -> Design:
    """固定効果 [1, 帯域, ステージ指示, 帯域×ステージ] と入れ子ランダム切片のブロック。"""
    spec = spec or ModelSpec()
    frame = table.frame if isinstance(table, FeatureTable) else table
    if len(frame) == 0:
        raise ValueError("cannot build a design from an empty table")
    missing = [c for c in (spec.response, *spec.covariates) if c not in frame.columns]
    if missing:
        raise ValueError(f"table lacks model columns: {missing}")

    n = len(frame)
    stage = frame["stage"].to_numpy(dtype=np.int64)
    covs = frame[spec.covariates].to_numpy(dtype=np.float64)
    columns = [np.ones(n)]
    names = ["Intercept"]
    for j, name in enumerate(spec.covariates):
        columns.append(covs[:, j])
        names.append(name)
    for s in spec.contrast_stages:
        columns.append((stage == int(s)).astype(np.float64))
        names.append(_stage_name(s))
    for s in spec.contrast_stages:
        indicator = (stage == int(s)).astype(np.float64)
        for j, name in enumerate(spec.covariates):
            columns.append(covs[:, j] * indicator)
            names.append(_interaction_name(name, s))
    X = np.column_stack(columns)

    # データに現れないステージの列は全ゼロなので落とす
    empty = [j for j in range(X.shape[1]) if not np.any(X[:, j])]
    dropped = [names[j] for j in empty]
    if dropped:
        logger.warning("%s: dropping empty design columns: %s", spec.label, ", ".join(dropped))
        keep = [j for j in range(X.shape[1]) if j not in set(empty)]
        X = X[:, keep]
        names = [names[j] for j in keep]

    _, r, pivot = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        aliased = [names[j] for j in sorted(pivot[rank:])]
        raise RankDeficientError(
            aliased,
            "relative band powers that sum to one alias the intercept; widen eeg.total_range_hz",
        )

    subjects = frame["subject"].astype(str).to_numpy()
    subject_codes, subject_levels = _factorize(subjects)
    cell_codes, cell_levels = _factorize([f"{s}:{SleepStage(int(g)).label}" for s, g in zip(subjects, stage)])
    blocks = [
        RandomBlock("subject", subject_codes, subject_levels),
        RandomBlock("subject:stage", cell_codes, cell_levels),
    ]
    y = frame[spec.response].to_numpy(dtype=np.float64)
    return Design(y=y, X=X, column_names=names, blocks=blocks, spec=spec, dropped_columns=dropped)


# ── REML ──────────────────────────────────────────────────

@dataclass
class ModelFit:
    beta: np.ndarray
    column_names: list[str]
    cov_beta: np.ndarray
    theta: np.ndarray
    variance_components: dict[str, float]
    sigma2_resid: float
    reml_loglik: float
    n_obs: int
    rank_X: int
    df_resid: int
    converged: bool
    n_iter: int
    blups: dict[str, np.ndarray] = field(default_factory=dict)
    at_boundary: dict[str, bool] = field(default_factory=dict)
    label: str = ""

    @property
    def sigma2_subject(self) -> float:
        return self.variance_components.get("subject", 0.0)

    @property
    def sigma2_subject_stage(self) -> float:
        return self.variance_components.get("subject:stage", 0.0)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_beta), 0.0, None))

    def index(self, name: str) -> int:
        return self.column_names.index(name)


class _RemlProblem:
    """交差積を一度だけ計算し、θ ごとに q×q と p×p の Cholesky だけで評価する。"""

    def __init__(self, y: np.ndarray, X: np.ndarray, Z: sparse.csr_matrix, block_sizes: Sequence[int]):
        self.n, self.p = X.shape
        Zt = Z.T.tocsr()
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)
        self.ZtX = np.asarray(Zt @ X)
        self.Zty = np.asarray(Zt @ y).ravel()
        self.ZtZ = np.asarray((Zt @ Z).todense())
        self.block_of = np.repeat(np.arange(len(block_sizes)), block_sizes)
        self.eye = np.eye(Z.shape[1])

    def solve(self, theta: np.ndarray) -> dict:
        lam = np.sqrt(theta)[self.block_of]
        lzx = lam[:, None] * self.ZtX
        lzy = lam * self.Zty
        upper = lam[:, None] * self.ZtZ * lam[None, :] + self.eye
        chol_l = linalg.cho_factor(upper, lower=True, check_finite=False)
        a_x = linalg.cho_solve(chol_l, lzx, check_finite=False)
        a_y = linalg.cho_solve(chol_l, lzy, check_finite=False)
        schur = self.XtX - lzx.T @ a_x
        schur = (schur + schur.T) / 2
        chol_s = linalg.cho_factor(schur, lower=True, check_finite=False)
        beta = linalg.cho_solve(chol_s, self.Xty - lzx.T @ a_y, check_finite=False)
        u = a_y - a_x @ beta
        r2 = max(self.yty - u @ lzy - beta @ self.Xty, np.finfo(float).tiny)
        dof = self.n - self.p
        logdet_l = 2.0 * np.sum(np.log(np.diag(chol_l[0])))
        logdet_s = 2.0 * np.sum(np.log(np.diag(chol_s[0])))
        deviance = logdet_l + logdet_s + dof * (1.0 + np.log(2.0 * np.pi * r2 / dof))
        return {
            "beta": beta, "u": u, "lam": lam, "r2": r2, "deviance": float(deviance),
            "chol_l": chol_l, "chol_s": chol_s, "a_x": a_x,
        }

    def deviance(self, theta: np.ndarray) -> float:
        try:
            return self.solve(theta)["deviance"]
        except linalg.LinAlgError:
            return np.inf

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        """∂deviance/∂θ_k = tr(Z_k' P Z_k) − ν‖Z_k' P y‖² / y'Py。"""
        sol = self.solve(theta)
        lam = sol["lam"]
        ztz_lam = self.ZtZ * lam[None, :]
        g = linalg.cho_solve(sol["chol_l"], lam[:, None] * self.ZtZ, check_finite=False)
        zvz_diag = np.diag(self.ZtZ) - np.einsum("ij,ji->i", ztz_lam, g)
        w = self.ZtX - ztz_lam @ sol["a_x"]
        ws = linalg.cho_solve(sol["chol_s"], w.T, check_finite=False)
        trace_part = zvz_diag - np.einsum("ij,ji->i", w, ws)
        zpy = (self.Zty - self.ZtX @ sol["beta"]) - ztz_lam @ sol["u"]
        dof = self.n - self.p
        per_column = trace_part - dof * zpy ** 2 / sol["r2"]
        return np.bincount(self.block_of, weights=per_column, minlength=len(theta))


def _newton_polish(problem: _RemlProblem, theta_from, phi: np.ndarray, free: list[int],
                   max_steps: int = 30, step_tol: float = 1e-9) -> tuple[np.ndarray, bool, int]:
    """log θ での解析勾配の零点を Newton 法で求める（ヘッセ行列は勾配の中心差分）。

    下限付近で θ 方向の勾配が非負の成分は境界解として下限に固定する。
    """
    phi = np.array(phi, dtype=np.float64)

    def grad_phi(values: np.ndarray) -> np.ndarray:
        theta = theta_from(values)
        return theta[free] * problem.gradient(theta)[free]

    for step in range(1, max_steps + 1):
        theta = theta_from(phi)
        raw = problem.gradient(theta)[free]
        pinned = (phi <= LOG_THETA_MIN + 10.0) & (raw >= 0)
        phi[pinned] = LOG_THETA_MIN
        active = np.flatnonzero(~pinned)
        if active.size == 0:
            return phi, True, step

        g = grad_phi(phi)[active]
        h = 1e-5
        hess = np.empty((active.size, active.size))
        for j, col in enumerate(active):
            up, down = phi.copy(), phi.copy()
            up[col] += h
            down[col] -= h
            hess[:, j] = (grad_phi(up)[active] - grad_phi(down)[active]) / (2 * h)
        hess = (hess + hess.T) / 2
        try:
            delta = linalg.cho_solve(linalg.cho_factor(hess, check_finite=False), g, check_finite=False)
        except linalg.LinAlgError:
            return phi, False, step

        base = problem.deviance(theta)
        slack = 1e-10 * max(1.0, abs(base))
        scale = 1.0
        while True:
            candidate = phi.copy()
            candidate[active] = np.clip(phi[active] - scale * delta, LOG_THETA_MIN, LOG_THETA_MAX)
            if problem.deviance(theta_from(candidate)) <= base + slack or scale < 1e-4:
                break
            scale /= 2
        moved = float(np.max(np.abs(candidate - phi)))
        phi = candidate
        if moved <= step_tol:
            return phi, True, step
    return phi, False, max_steps


def fit_reml(y, X, blocks: Sequence[RandomBlock], column_names: Sequence[str] | None = None,
             max_iter: int = 4000, xtol: float = 1e-10,
             fixed_theta: Sequence[float | None] | None = None, label: str = "") -> ModelFit:
    """REML で分散比を推定し、最適点での GLS 推定量と共分散を返す。

    fixed_theta は各ブロックの θ を固定するとき値を、推定するとき None を入れる。
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or y.shape[0] != X.shape[0]:
        raise ValueError("y and X must have matching rows")
    if not blocks:
        raise ValueError("at least one random-effect block is required")
    n, p = X.shape
    rank = int(np.linalg.matrix_rank(X))
    if rank < p:
        raise RankDeficientError(list(column_names or [f"x{j}" for j in range(p)])[rank:])
    if n <= rank:
        raise ValueError(f"need more observations ({n}) than fixed-effect columns ({rank})")

    Z = sparse.hstack([b.matrix() for b in blocks], format="csr")
    problem = _RemlProblem(y, X, Z, [b.size for b in blocks])
    fixed = list(fixed_theta) if fixed_theta is not None else [None] * len(blocks)
    if len(fixed) != len(blocks):
        raise ValueError("fixed_theta must give one entry per block")
    free = [i for i, value in enumerate(fixed) if value is None]

    def theta_from(phi_free) -> np.ndarray:
        theta = np.array([0.0 if v is None else float(v) for v in fixed])
        theta[free] = np.exp(np.clip(np.asarray(phi_free, dtype=np.float64), LOG_THETA_MIN, LOG_THETA_MAX))
        return theta

    def objective(phi_free) -> float:
        return problem.deviance(theta_from(np.atleast_1d(phi_free)))

    if not free:
        phi, converged, n_iter = np.empty(0), True, 0
    else:
        if len(free) == 1:
            result = optimize.minimize_scalar(
                objective, bounds=(LOG_THETA_MIN, LOG_THETA_MAX), method="bounded",
                options={"xatol": xtol, "maxiter": max_iter},
            )
            phi, found, n_iter = np.atleast_1d(result.x), bool(result.success), int(result.nfev)
        else:
            start = np.zeros(len(free))
            simplex = np.vstack([start, start + np.eye(len(free))])
            fatol = 1e-10 * max(1.0, abs(objective(start)))
            result = optimize.minimize(
                objective, start, method="Nelder-Mead",
                options={"initial_simplex": simplex, "xatol": max(xtol, 1e-8), "fatol": fatol,
                         "maxiter": max_iter},
            )
            phi, found, n_iter = np.asarray(result.x), bool(result.success), int(result.nit)
        polished, converged, steps = _newton_polish(problem, theta_from, phi, free)
        n_iter += steps
        if problem.deviance(theta_from(polished)) <= objective(phi) + 1e-8 * max(1.0, abs(objective(phi))):
            phi = polished
        else:
            converged = found
    if not converged:
        logger.warning("%sREML optimizer stopped after %d iterations without converging",
                       f"{label}: " if label else "", n_iter)

    theta = theta_from(phi)
    sol = problem.solve(theta)
    dof = n - p
    sigma2 = sol["r2"] / dof
    cov_beta = sigma2 * linalg.cho_solve(sol["chol_s"], np.eye(p), check_finite=False)
    cov_beta = (cov_beta + cov_beta.T) / 2
    b = sol["lam"] * sol["u"]
    offsets = np.cumsum([0] + [blk.size for blk in blocks])
    blups = {blk.name: b[offsets[i]:offsets[i + 1]] for i, blk in enumerate(blocks)}
    boundary = {blk.name: bool(i in free and np.log(max(theta[i], 1e-300)) <= LOG_THETA_MIN + 1e-6)
                for i, blk in enumerate(blocks)}

    return ModelFit(
        beta=sol["beta"],
        column_names=list(column_names or [f"x{j}" for j in range(p)]),
        cov_beta=cov_beta,
        theta=theta,
        variance_components={blk.name: float(theta[i] * sigma2) for i, blk in enumerate(blocks)},
        sigma2_resid=float(sigma2),
        reml_loglik=-0.5 * sol["deviance"],
        n_obs=n,
        rank_X=rank,
        df_resid=n - rank,
        converged=converged,
        n_iter=n_iter,
        blups=blups,
        at_boundary=boundary,
        label=label,
    )


def fit_model(table: FeatureTable | pd.DataFrame, spec: ModelSpec | None = None,
              config: ModelConfig | None = None) -> tuple[ModelFit, Design]:
    spec = spec or ModelSpec()
    cfg = config or ModelConfig()
    design = build_design(table, spec)
    fit = fit_reml(design.y, design.X, design.blocks, design.column_names,
                   max_iter=cfg.max_iter, xtol=cfg.xtol, label=spec.label)
    logger.info("%s: n=%d rank=%d sigma2 subject=%.4g cell=%.4g resid=%.4g converged=%s",
                spec.label, fit.n_obs, fit.rank_X, fit.sigma2_subject, fit.sigma2_subject_stage,
                fit.sigma2_resid, fit.converged)
    return fit, design


def specs_for(config: ModelConfig, electrodes: Sequence[str] = ("C3", "C4")) -> list[ModelSpec]:
    """既定は電極ごとに1モデル。per_electrode=False なら両電極をまとめた1モデル。"""
    if config.per_electrode:
        return [ModelSpec(electrodes=(e,)) for e in electrodes]
    return [ModelSpec(electrodes=tuple(electrodes))]


# ── 効果の報告 ────────────────────────────────────────────

@dataclass
class EffectReport:
    slopes: pd.DataFrame
    contrasts: pd.DataFrame


def _combination(fit: ModelFit, weights: dict[str, float]) -> tuple[float, float]:
    c = np.zeros(len(fit.column_names))
    for name, w in weights.items():
        c[fit.index(name)] = w
    estimate = float(c @ fit.beta)
    variance = float(c @ fit.cov_beta @ c)
    return estimate, float(np.sqrt(max(variance, 0.0)))


def _effect_row(stage: SleepStage, covariate: str, estimate: float, se: float, df: float) -> dict:
    electrode, band = covariate.split("_", 1)
    t = estimate / se if se > 0 else float("nan")
    p = float(two_sided_p(t, df)) if se > 0 else float("nan")
    return {"stage": stage.label, "electrode": electrode.upper(), "band": band.capitalize(),
            "estimate": estimate, "std_error": se, "t_ratio": t, "p": p}


def stage_slopes(fit: ModelFit, spec: ModelSpec | None = None) -> EffectReport:
    """ステージ別の傾き（主効果 + 交互作用）と、Wake との差（交互作用そのもの）。"""
    spec = spec or ModelSpec()
    names = set(fit.column_names)
    slopes, contrasts = [], []
    for stage in SCORED_STAGES:
        for cov in spec.covariates:
            if stage == spec.reference_stage:
                est, se = _combination(fit, {cov: 1.0})
                slopes.append(_effect_row(stage, cov, est, se, fit.df_resid))
                continue
            term = _interaction_name(cov, stage)
            if term not in names:
                continue
            est, se = _combination(fit, {cov: 1.0, term: 1.0})
            slopes.append(_effect_row(stage, cov, est, se, fit.df_resid))
            est, se = _combination(fit, {term: 1.0})
            contrasts.append(_effect_row(stage, cov, est, se, fit.df_resid))
    return EffectReport(
        slopes=pd.DataFrame(slopes, columns=EFFECT_COLUMNS),
        contrasts=pd.DataFrame(contrasts, columns=EFFECT_COLUMNS),
    )


def significant_effects(report: EffectReport, alpha: float = 0.05) -> pd.DataFrame:
    return report.slopes[report.slopes["p"] < alpha].reset_index(drop=True)


def _format_p(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "<.0001" if p < 1e-4 else f"{p:.4f}"


def format_effects_table(effects: pd.DataFrame) -> pd.DataFrame:
    """Estimate / Std Error / t Ratio / Prob > t の表示用表。"""
    return pd.DataFrame({
        "Sleep Stage": effects["stage"],
        "Electrode": effects["electrode"],
        "EEG Band": effects["band"],
        "Estimate": effects["estimate"].map(lambda v: f"{v:.7g}"),
        "Std Error": effects["std_error"].map(lambda v: f"{v:.7g}"),
        "t Ratio": effects["t_ratio"].map(lambda v: f"{v:.2f}"),
        "Prob > t": effects["p"].map(_format_p),
    }, columns=EFFECTS_TABLE_COLUMNS)


def fit_to_json(fit: ModelFit) -> dict:
    se = fit.std_errors
    return {
        "label": fit.label,
        "n_obs": fit.n_obs,
        "rank_X": fit.rank_X,
        "df_resid": fit.df_resid,
        "converged": fit.converged,
        "iterations": fit.n_iter,
        "reml_loglik": float(fit.reml_loglik),
        "sigma2_resid": fit.sigma2_resid,
        "variance_components": dict(fit.variance_components),
        "theta": [float(t) for t in fit.theta],
        "at_boundary": dict(fit.at_boundary),
        "beta": [
            {"term": name, "estimate": float(b), "std_error": float(s)}
            for name, b, s in zip(fit.column_names, fit.beta, se)
        ],
    }


# ── 残差診断 ──────────────────────────────────────────────

@dataclass
class Diagnostics:
    residuals: np.ndarray
    fitted: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    qq_theoretical: np.ndarray
    qq_sample: np.ndarray
    qq_correlation: float

    def to_json(self, max_points: int = 2000) -> dict:
        n = self.residuals.size
        take = np.unique(np.linspace(0, n - 1, min(n, max_points)).round().astype(int)) if n else np.empty(0, int)
        return {
            "n": int(n),
            "mean": float(np.mean(self.residuals)) if n else 0.0,
            "sd": float(np.std(self.residuals, ddof=1)) if n > 1 else 0.0,
            "qq_correlation": self.qq_correlation,
            "histogram": {"counts": self.hist_counts.tolist(), "edges": self.hist_edges.tolist()},
            "qq": {"theoretical": self.qq_theoretical[take].tolist(), "sample": self.qq_sample[take].tolist()},
            "fitted_vs_residual": {"fitted": self.fitted[take].tolist(), "residual": self.residuals[take].tolist()},
        }


def residual_diagnostics(fit: ModelFit, design: Design, bins: int = 40) -> Diagnostics:
    """条件付き残差 y − Xβ̂ − Zû（û は BLUP）。"""
    b = np.concatenate([fit.blups[blk.name] for blk in design.blocks])
    fitted = design.X @ fit.beta + design.Z @ b
    residuals = design.y - fitted
    counts, edges = np.histogram(residuals, bins=bins)
    n = residuals.size
    order = np.sort(residuals)
    # Blom の位置
    theoretical = stats.norm.ppf((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    sd = np.std(residuals)
    corr = float(np.corrcoef(theoretical, order)[0, 1]) if n > 2 and sd > 0 else float("nan")
    return Diagnostics(residuals, fitted, counts, edges, theoretical, order, corr)
