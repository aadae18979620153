"""The three-level model chain as two reusable steps.

``fit_hierarchy`` turns trees, plots and training segments into fitted proxy
and satellite models; ``estimate_target`` applies them to target segments and
returns the hybrid estimate with its covariance chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .allometry import AllometricModelSpec, PlotAGBDResult, plot_agbd
from .estimators import DECOMPOSITION_CONFIGS, EstimateReport, aggregate_tracks, hybrid_estimate, rmsd_md
from .exceptions import EmptyInput
from .gnls import QuadraticGNLS
from .propagation import DENSE_CAP, CovChain, averaging_matrix, build_chain, param_cov_total
from .segmenter import quality_filter
from .tables import PLOTS, SEGMENTS, metric_matrix, validate_linkage
from .varsel import AnnealConfig, AnnealingSelector


@dataclass
class LevelSettings:
    """Model settings for one regression level.

    When ``select`` is set, ``predictors`` is replaced by the annealing
    choice among ``candidates`` (default: every metric column).
    """

    predictors: list[str]
    variance: str = "constant_plus_power"
    transforms: dict[str, str] | None = None
    select: AnnealConfig | None = None
    candidates: list[str] | None = None

    def make(self, predictors) -> QuadraticGNLS:
        transforms = None
        if self.transforms:
            transforms = {k: v for k, v in self.transforms.items() if k in predictors}
        return QuadraticGNLS(variance=self.variance, transforms=transforms)

    def choose(self, table: pd.DataFrame, fixed, y) -> tuple[list[str], dict | None]:
        if self.select is None:
            return list(self.predictors), None
        names = self.candidates or [c for c in table.columns if c not in fixed]
        X = _frame(table, names)
        if self.transforms:
            for col, kind in self.transforms.items():
                if kind == "sqrt" and col in X:
                    X[col] = np.sqrt(X[col])
        sel = AnnealingSelector(**vars(self.select)).fit(X, y)
        record = {
            "candidates": list(names),
            "selected": sel.selected_,
            "objective": sel.best_objective_,
            "evaluations": sel.n_evaluations_,
            "steps": int(sel.trace_.shape[0]),
            "config": vars(self.select),
        }
        return sel.selected_, record


@dataclass
class PipelineSettings:
    proxy: LevelSettings
    satellite: LevelSettings
    min_photons: int = 100
    min_conf: float = 0.6
    dense_cap: int = DENSE_CAP


@dataclass
class Hierarchy:
    plots: PlotAGBDResult
    proxy_fit: QuadraticGNLS
    i2_fit: QuadraticGNLS
    M: object
    X_subcell: pd.DataFrame
    train_segments: pd.DataFrame
    proxy_segment_agbd: np.ndarray
    diagnostics: dict[str, float] = field(default_factory=dict)
    selection: dict[str, dict] = field(default_factory=dict)

    @property
    def proxy_predictors(self) -> list[str]:
        return self.proxy_fit.feature_names_

    @property
    def satellite_predictors(self) -> list[str]:
        return self.i2_fit.feature_names_


def _frame(df: pd.DataFrame, names) -> pd.DataFrame:
    return pd.DataFrame(metric_matrix(df, names), columns=list(names))


def fit_hierarchy(
    spec: AllometricModelSpec,
    trees: pd.DataFrame,
    plots: pd.DataFrame,
    subcells: pd.DataFrame,
    train_segments: pd.DataFrame,
    settings: PipelineSettings,
    *,
    filter_segments: bool = True,
) -> Hierarchy:
    """Allometry, proxy fit, subcell averaging and satellite fit."""
    validate_linkage(trees, plots)
    plot_res = plot_agbd(spec, trees, plots)

    selection = {}
    proxy_names, record = settings.proxy.choose(plots, PLOTS.names, plot_res.agbd)
    if record:
        selection["proxy"] = record
    proxy_fit = settings.proxy.make(proxy_names).fit(_frame(plots, proxy_names), plot_res.agbd)

    segs = quality_filter(train_segments, settings.min_photons, settings.min_conf) if filter_segments else train_segments
    if segs.empty:
        raise EmptyInput("no training segments pass the quality filter")
    seg_ids = list(segs["segment_id"])
    keep = subcells["segment_id"].isin(set(seg_ids)).to_numpy()
    sub = subcells.loc[keep].reset_index(drop=True)
    M = averaging_matrix(sub["segment_id"].to_numpy(), seg_ids)
    X_sub = _frame(sub, proxy_names)
    proxy_seg = np.asarray(M.T @ proxy_fit.predict(X_sub)).ravel()

    sat_names, record = settings.satellite.choose(segs, SEGMENTS.names, proxy_seg)
    if record:
        selection["satellite"] = record
    i2_fit = settings.satellite.make(sat_names).fit(_frame(segs, sat_names), proxy_seg)
    diag = rmsd_md(i2_fit.fitted_values_, proxy_seg)
    return Hierarchy(
        plots=plot_res,
        proxy_fit=proxy_fit,
        i2_fit=i2_fit,
        M=M,
        X_subcell=X_sub,
        train_segments=segs,
        proxy_segment_agbd=proxy_seg,
        diagnostics=diag,
        selection=selection,
    )


@dataclass
class TargetResult:
    report: EstimateReport
    predictions: pd.DataFrame
    chain: CovChain
    chains: dict[str, CovChain]


def estimate_target(
    h: Hierarchy,
    target_segments: pd.DataFrame,
    settings: PipelineSettings,
    *,
    decompose: bool = True,
    filter_segments: bool = True,
) -> TargetResult:
    """Predict target segments and compute the hybrid estimate."""
    segs = quality_filter(target_segments, settings.min_photons, settings.min_conf) if filter_segments else target_segments
    if segs.empty:
        raise EmptyInput("no target segments pass the quality filter")
    Y = _frame(segs, h.satellite_predictors)
    pred = h.i2_fit.predict(Y)
    predictions = pd.DataFrame(
        {"segment_id": segs["segment_id"].to_numpy(), "track_id": segs["track_id"].to_numpy(), "agbd": pred}
    )
    tracks = aggregate_tracks(predictions["track_id"].to_numpy(), pred)

    configs = DECOMPOSITION_CONFIGS if decompose else DECOMPOSITION_CONFIGS[:1]
    chains = {}
    for label, flags in configs:
        chains[label] = build_chain(
            h.plots, h.proxy_fit, h.X_subcell, h.M, h.i2_fit, Y, flags, dense_cap=settings.dense_cap
        )
    full = chains[DECOMPOSITION_CONFIGS[0][0]]
    decomposition = [(label, hybrid_estimate(tracks, c).se_total) for label, c in chains.items()] if decompose else []
    report = hybrid_estimate(tracks, full, decomposition=decomposition, diagnostics=h.diagnostics)
    return TargetResult(report=report, predictions=predictions, chain=full, chains=chains)


def reference_cov(h: Hierarchy) -> np.ndarray:
    """Parameter covariance of the plot-level model including allometry,
    used for the wall-to-wall reference estimate."""
    return param_cov_total(h.proxy_fit.train_jacobian(), h.proxy_fit.train_variance_, h.plots.cov)
