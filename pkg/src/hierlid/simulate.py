"""Synthetic worlds with known truth and Monte Carlo checks of the estimators.

A world is a raster of true AGBD on 15 m pixels. Tracks are pixel columns;
every run of six pixels down a column is one 90 m segment whose pixels are
its subcells. Predictors are built backwards from the truth so that both
regression levels are correctly specified:

* segment metric ``y1`` solves ``g(gamma, y) = S`` where ``S`` is the
  segment's true mean AGBD; ``y2`` is free noise entering the model;
* training segments carry proxy-level AGBD ``T = S + e_g`` and their subcell
  metrics solve ``f(beta, x_k) = T * F_k / S``, so the averaged proxy
  prediction equals ``T``;
* field plots sit on random pixels with metrics solving
  ``f(beta, x) = F_pixel``; their measured AGBD is ``F_pixel + e_f`` and the
  tree list is generated to reproduce it exactly under the true allometry.

Training data live outside the target population, so the design and model
components of the error are independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .allometry import AllometricModelSpec, default_spec, eval_combined_agb
from .estimators import TrackAggregate, design_variance, hybrid_mean, model_variance, Z95
from .exceptions import ConfigError, ValidationError
from .pipeline import Hierarchy, LevelSettings, PipelineSettings, estimate_target, fit_hierarchy
from .propagation import build_chain
from .tables import SPECIES, SUBCELLS_PER_SEGMENT

PROXY_METRICS = ("hmean", "dens", "spec1", "spec2")
SAT_METRICS = ("p90", "std", "b50", "cover")
_NOISE_RANGE = (0.0, 10.0)


@dataclass
class SyntheticWorldConfig:
    """World generation settings.

    Model coefficients apply to the first two metric columns of each level;
    the remaining columns are decoys unrelated to AGBD.
    """

    n_rows: int = 60
    n_cols: int = 64
    pixel_size_m: float = 15.0
    mean_agbd: float = 80.0
    sd_agbd: float = 35.0
    range_px: float = 6.0
    n_tracks: int = 8
    n_plots: int = 150
    n_train_segments: int = 120
    plot_radius_m: float = 9.0
    dbh_shape: float = 2.0
    dbh_scale: float = 8.0
    height_a: float = 1.5
    height_b: float = 0.25
    height_noise: float = 0.1
    species_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    allometry_rel_sd: float = 0.005
    proxy_coef: tuple[float, float, float] = (2.0, 0.5, 0.3)
    proxy_sigma: float = 0.3
    proxy_c: float = 5.0
    proxy_p: float = 0.7
    i2_coef: tuple[float, float, float] = (1.5, 0.6, 0.2)
    i2_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        self.species_probs = tuple(float(v) for v in self.species_probs)
        self.proxy_coef = tuple(float(v) for v in self.proxy_coef)
        self.i2_coef = tuple(float(v) for v in self.i2_coef)
        problems = []
        if self.n_rows < SUBCELLS_PER_SEGMENT or self.n_rows % SUBCELLS_PER_SEGMENT:
            problems.append(f"n_rows must be a positive multiple of {SUBCELLS_PER_SEGMENT}")
        if self.n_cols < 2:
            problems.append("n_cols must be at least 2")
        if not 1 <= self.n_tracks <= self.n_cols:
            problems.append("n_tracks must lie between 1 and n_cols")
        if self.mean_agbd <= 0:
            problems.append("mean_agbd must be positive")
        for name in ("sd_agbd", "range_px", "height_noise", "allometry_rel_sd", "proxy_sigma", "proxy_c", "i2_sigma"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.n_plots < 5 or self.n_train_segments < 5:
            problems.append("need at least 5 plots and 5 training segments")
        if len(self.proxy_coef) != 3 or len(self.i2_coef) != 3:
            problems.append("proxy_coef and i2_coef take three values")
        elif self.proxy_coef[1] == 0 or self.i2_coef[1] == 0:
            problems.append("the first slope of each model must be non-zero")
        if len(self.species_probs) != 3 or abs(sum(self.species_probs) - 1) > 1e-9 or min(self.species_probs) < 0:
            problems.append("species_probs must be three non-negative values summing to 1")
        if self.plot_radius_m <= 0 or self.pixel_size_m <= 0:
            problems.append("plot_radius_m and pixel_size_m must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticWorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown world settings {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def noiseless(self) -> "SyntheticWorldConfig":
        d = self.to_dict()
        d.update(proxy_sigma=0.0, i2_sigma=0.0, allometry_rel_sd=0.0, height_noise=0.0)
        return SyntheticWorldConfig.from_dict(d)


def settings_for_world(cfg: SyntheticWorldConfig) -> PipelineSettings:
    return PipelineSettings(
        proxy=LevelSettings(list(PROXY_METRICS[:2]), "constant_plus_power"),
        satellite=LevelSettings(list(SAT_METRICS[:2]), "homoscedastic"),
    )


# -- random field ----------------------------------------------------------


def gaussian_field(rng: np.random.Generator, n_rows: int, n_cols: int, range_px: float) -> np.ndarray:
    """Standardized stationary Gaussian field by spectral synthesis.

    White noise is filtered with a Gaussian transfer function whose width
    corresponds to ``range_px`` pixels. The result is rescaled to sample mean
    0 and sample sd 1.
    """
    noise = rng.standard_normal((n_rows, n_cols))
    if range_px > 0:
        ky = np.fft.fftfreq(n_rows)[:, None]
        kx = np.fft.fftfreq(n_cols)[None, :]
        transfer = np.exp(-((np.pi * range_px) ** 2) * (kx**2 + ky**2) / 2.0)
        noise = np.real(np.fft.ifft2(np.fft.fft2(noise) * transfer))
    sd = noise.std()
    return (noise - noise.mean()) / sd if sd > 0 else np.zeros_like(noise)


def lognormal_field(z: np.ndarray, mean: float, sd: float) -> np.ndarray:
    """Map a standard field to a lognormal one with the given moments."""
    if sd == 0:
        return np.full_like(z, mean)
    s2 = math.log1p((sd / mean) ** 2)
    return np.clip(np.exp(math.log(mean) - 0.5 * s2 + math.sqrt(s2) * z), 0.0, None)


def _solve_first(target, coef, other) -> np.ndarray:
    """First predictor such that ``(b0 + b1 x1 + b2 x2)^2 = target``."""
    return (np.sqrt(np.clip(target, 0.0, None)) - coef[0] - coef[2] * other) / coef[1]


# -- trees -----------------------------------------------------------------


def _heights(d, noise, cfg):
    return np.minimum(1.3 + (d / (cfg.height_a + cfg.height_b * d)) ** 2 * noise, 60.0)


def _plot_trees(rng, target_kg, spec, cfg, mean_tree_kg):
    """Tree list whose true total AGB equals ``target_kg``.

    Diameters of a Poisson-sized stand are scaled by one common factor;
    stems are dropped or added until the scaled diameters stay in range.
    """
    if target_kg <= 0:
        return None
    n = max(1, int(rng.poisson(target_kg / mean_tree_kg)))
    pool = n + 64
    d0 = 5.0 + rng.gamma(cfg.dbh_shape, cfg.dbh_scale, pool)
    hn = np.exp(cfg.height_noise * rng.standard_normal(pool))
    sp = rng.choice(np.array(SPECIES), size=pool, p=cfg.species_probs)

    def total(s, k):
        d = s * d0[:k]
        return float(np.sum(eval_combined_agb(spec, (d, _heights(d, hn[:k], cfg), sp[:k])))) - target_kg

    for _ in range(pool):
        lo, hi = 5.0 / d0[:n].min(), 200.0 / d0[:n].max()
        if total(lo, n) > 0:
            if n == 1:
                return None
            n -= 1
            continue
        if total(hi, n) < 0:
            if n == pool:
                break
            n += 1
            continue
        s = brentq(total, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, args=(n,))
        d = np.clip(s * d0[:n], 5.0, 200.0)
        return d, _heights(d, hn[:n], cfg), sp[:n]
    raise ValidationError(f"cannot build a tree list for {target_kg:.1f} kg")


# -- world -----------------------------------------------------------------


@dataclass
class TrainingSample:
    trees: pd.DataFrame
    plots: pd.DataFrame
    subcells: pd.DataFrame
    segments: pd.DataFrame


@dataclass
class World:
    config: SyntheticWorldConfig
    raster: np.ndarray
    segments: pd.DataFrame  # target population, one row per segment
    pixels: pd.DataFrame
    training: TrainingSample
    allometry: AllometricModelSpec
    mean_tree_kg: float
    _seg_agbd: np.ndarray = field(repr=False, default=None)

    @property
    def true_mean(self) -> float:
        return math.fsum(self.raster.ravel()) / self.raster.size

    @property
    def seg_rows(self) -> int:
        return self.config.n_rows // SUBCELLS_PER_SEGMENT

    def column_segments(self, columns, labels=None) -> pd.DataFrame:
        """Target segments of the given columns, one track per entry.

        Repeated columns become distinct tracks so sampling with
        replacement keeps its cluster structure.
        """
        k = self.seg_rows
        idx = np.concatenate([np.arange(c * k, (c + 1) * k) for c in columns])
        out = self.segments.iloc[idx].reset_index(drop=True)
        labels = labels if labels is not None else [f"t{j:03d}" for j in range(len(columns))]
        out["track_id"] = np.repeat(np.asarray(labels, dtype=object), k)
        out["segment_id"] = [f"{t}_{s}" for t, s in zip(out["track_id"], out["segment_id"])]
        return out

    def tables(self) -> dict[str, pd.DataFrame]:
        return {
            "trees": self.training.trees,
            "plots": self.training.plots,
            "subcells": self.training.subcells,
            "train_segments": self.training.segments,
            "segments": self.segments,
            "pixels": self.pixels,
        }


def _segment_frame(ids, tracks, y1, y2, decoys) -> pd.DataFrame:
    n = len(ids)
    return pd.DataFrame(
        {
            "segment_id": ids,
            "track_id": tracks,
            "n_photons": np.full(n, 200, dtype=np.int64),
            "high_conf_fraction": np.full(n, 0.8),
            "forested": np.ones(n, dtype=bool),
            SAT_METRICS[0]: y1,
            SAT_METRICS[1]: y2,
            SAT_METRICS[2]: decoys[:, 0],
            SAT_METRICS[3]: decoys[:, 1],
        }
    )


def _metric_frame(id_cols: dict, x1, x2, decoys) -> pd.DataFrame:
    out = dict(id_cols)
    out.update({PROXY_METRICS[0]: x1, PROXY_METRICS[1]: x2, PROXY_METRICS[2]: decoys[:, 0], PROXY_METRICS[3]: decoys[:, 1]})
    return pd.DataFrame(out)


def draw_training(world_cfg: SyntheticWorldConfig, raster: np.ndarray, spec: AllometricModelSpec, mean_tree_kg: float, rng) -> TrainingSample:
    """Field plots with trees and training segments with subcells."""
    cfg = world_cfg
    lo, hi = _NOISE_RANGE
    R, C = raster.shape
    beta, gamma = np.array(cfg.proxy_coef), np.array(cfg.i2_coef)
    area = math.pi * cfg.plot_radius_m**2 / 1e4

    # Plots
    cells = rng.integers(0, raster.size, cfg.n_plots)
    m = raster.ravel()[cells]
    sd_f = cfg.proxy_sigma * (cfg.proxy_c + np.power(m, cfg.proxy_p))
    P = np.clip(m + sd_f * rng.standard_normal(cfg.n_plots), 0.0, None)
    x2 = rng.uniform(lo, hi, cfg.n_plots)
    decoys = rng.uniform(lo, hi, (cfg.n_plots, 2))
    plot_ids = [f"P{i:04d}" for i in range(cfg.n_plots)]
    rows = {"tree_id": [], "plot_id": [], "dbh_cm": [], "height_m": [], "species": []}
    for pid, p in zip(plot_ids, P):
        built = _plot_trees(rng, p * area * 1000.0, spec, cfg, mean_tree_kg)
        if built is None:
            continue
        d, h, sp = built
        start = len(rows["tree_id"])
        rows["tree_id"] += [f"T{start + j:06d}" for j in range(d.size)]
        rows["plot_id"] += [pid] * d.size
        rows["dbh_cm"] += d.tolist()
        rows["height_m"] += h.tolist()
        rows["species"] += sp.tolist()
    trees = pd.DataFrame(rows).astype({"dbh_cm": float, "height_m": float, "tree_id": object, "plot_id": object, "species": object})
    ci = cells // C
    cj = cells % C
    plots = _metric_frame(
        {
            "plot_id": plot_ids,
            "area_ha": np.full(cfg.n_plots, area),
            "x": (cj + 0.5) * cfg.pixel_size_m,
            "y": (ci + 0.5) * cfg.pixel_size_m,
        },
        _solve_first(m, beta, x2),
        x2,
        decoys,
    )

    # Training segments drawn from random raster segments
    k = SUBCELLS_PER_SEGMENT
    n = cfg.n_train_segments
    blocks = raster.reshape(R // k, k, C).transpose(0, 2, 1).reshape(-1, k)
    pick = rng.integers(0, blocks.shape[0], n)
    F = blocks[pick]
    S = F.mean(axis=1)
    T = np.clip(S + cfg.i2_sigma * rng.standard_normal(n), 0.0, None)
    w = np.divide(F, S[:, None], out=np.ones_like(F), where=S[:, None] > 0)
    y2 = rng.uniform(lo, hi, n)
    seg_ids = [f"V{i:04d}" for i in range(n)]
    segments = _segment_frame(seg_ids, [f"V{i // 10:03d}" for i in range(n)], _solve_first(S, gamma, y2), y2, rng.uniform(lo, hi, (n, 2)))
    sub_target = (T[:, None] * w).ravel()
    sx2 = rng.uniform(lo, hi, n * k)
    subcells = _metric_frame(
        {
            "subcell_id": [f"{s}_{j}" for s in seg_ids for j in range(k)],
            "segment_id": np.repeat(np.asarray(seg_ids, dtype=object), k),
        },
        _solve_first(sub_target, beta, sx2),
        sx2,
        rng.uniform(lo, hi, (n * k, 2)),
    )
    return TrainingSample(trees=trees, plots=plots, subcells=subcells, segments=segments)


def _mean_tree_kg(rng, spec, cfg, n=4000) -> float:
    d = 5.0 + rng.gamma(cfg.dbh_shape, cfg.dbh_scale, n)
    h = _heights(d, np.exp(cfg.height_noise * rng.standard_normal(n)), cfg)
    sp = rng.choice(np.array(SPECIES), size=n, p=cfg.species_probs)
    return float(np.mean(eval_combined_agb(spec, (d, h, sp))))


def world_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed).jumped())


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) ^ int(replicate)))


def generate_world(config: SyntheticWorldConfig | None = None) -> World:
    """Build a world; identical configs give identical worlds."""
    cfg = config or SyntheticWorldConfig()
    rng = world_rng(cfg.seed)
    R, C, k = cfg.n_rows, cfg.n_cols, SUBCELLS_PER_SEGMENT
    raster = lognormal_field(gaussian_field(rng, R, C, cfg.range_px), cfg.mean_agbd, cfg.sd_agbd)
    spec = default_spec(cfg.allometry_rel_sd)
    mean_tree = _mean_tree_kg(rng, spec, cfg)

    gamma, beta = np.array(cfg.i2_coef), np.array(cfg.proxy_coef)
    lo, hi = _NOISE_RANGE
    # Column-major segment order: all of column 0 first.
    S = raster.reshape(R // k, k, C).mean(axis=1).T.ravel()
    cols = np.repeat(np.arange(C), R // k)
    rows = np.tile(np.arange(R // k), C)
    y2 = rng.uniform(lo, hi, S.size)
    segments = _segment_frame(
        [f"{r:05d}" for r in rows],
        [f"c{c:03d}" for c in cols],
        _solve_first(S, gamma, y2),
        y2,
        rng.uniform(lo, hi, (S.size, 2)),
    )
    segments["segment_id"] = [f"c{c:03d}_{r:05d}" for c, r in zip(cols, rows)]
    px2 = rng.uniform(lo, hi, raster.size)
    pixels = _metric_frame(
        {"pixel_id": [f"px{i:06d}" for i in range(raster.size)]},
        _solve_first(raster.ravel(), beta, px2),
        px2,
        rng.uniform(lo, hi, (raster.size, 2)),
    )
    training = draw_training(cfg, raster, spec, mean_tree, rng)
    return World(cfg, raster, segments, pixels, training, spec, mean_tree, _seg_agbd=S)


def draw_allometry(spec: AllometricModelSpec, rng) -> AllometricModelSpec:
    """Parameters drawn from ``N(alpha, C_alpha)``."""
    vals, vecs = np.linalg.eigh(spec.cov)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return spec.with_params(spec.params + root @ rng.standard_normal(spec.n_params))


# -- Monte Carlo -----------------------------------------------------------


@dataclass
class MonteCarloResult:
    mode: str
    replicates: int
    truth: float
    table: pd.DataFrame

    def __post_init__(self):
        if self.replicates < 2:
            raise ValidationError("a Monte Carlo result needs at least 2 replicates")

    def _mean(self, col) -> float:
        return math.fsum(self.table[col].to_numpy()) / len(self.table)

    @property
    def mean_mu(self) -> float:
        return self._mean("mu")

    @property
    def empirical_var_mu(self) -> float:
        mu = self.table["mu"].to_numpy()
        m = math.fsum(mu) / mu.size
        return math.fsum((mu - m) ** 2) / (mu.size - 1)

    @property
    def mean_var_design(self) -> float:
        return self._mean("var_design")

    @property
    def mean_var_model(self) -> float:
        return self._mean("var_model")

    @property
    def mean_var_total(self) -> float:
        return self._mean("var_total")

    @property
    def coverage(self) -> float:
        return float(np.mean(self.table["covered"].to_numpy()))

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "replicates": self.replicates,
            "truth": self.truth,
            "mean_mu": self.mean_mu,
            "empirical_var_mu": self.empirical_var_mu,
            "mean_var_design": self.mean_var_design,
            "mean_var_model": self.mean_var_model,
            "mean_var_total": self.mean_var_total,
            "coverage": self.coverage,
        }

    def to_json(self) -> str:
        out = self.summary()
        out["table"] = {c: self.table[c].tolist() for c in self.table.columns}
        return json.dumps(out, indent=1) + "\n"


def fit_world(world: World, settings: PipelineSettings | None = None) -> Hierarchy:
    t = world.training
    settings = settings or settings_for_world(world.config)
    return fit_hierarchy(world.allometry, t.trees, t.plots, t.subcells, t.segments, settings)


def _row(r, mu, vd, vm, truth):
    se = math.sqrt(vd + vm)
    return (r, mu, vd, vm, vd + vm, abs(mu - truth) <= Z95 * se)


def _tracks_only(world: World, replicates: int, settings) -> MonteCarloResult:
    cfg = world.config
    h = fit_world(world, settings)
    k = world.seg_rows
    settings = settings or settings_for_world(cfg)
    Y = world.segments[settings.satellite.predictors]
    pred = h.i2_fit.predict(Y)
    jac = h.i2_fit.mean_jacobian(Y)
    chain = build_chain(h.plots, h.proxy_fit, h.X_subcell, h.M, h.i2_fit, Y.iloc[:1])
    col_sum = pred.reshape(cfg.n_cols, k).sum(axis=1)
    col_jac = jac.reshape(cfg.n_cols, k, -1).sum(axis=1)
    truth = math.fsum(pred) / pred.size
    rows = []
    for r in range(replicates):
        cols = replicate_rng(cfg.seed, r).integers(0, cfg.n_cols, cfg.n_tracks)
        tracks = [TrackAggregate(str(j), float(col_sum[c]), k) for j, c in enumerate(cols)]
        g = col_jac[cols].sum(axis=0)
        vm = model_variance(max(float(g @ chain.c_gamma @ g), 0.0), k * len(cols))
        rows.append(_row(r, hybrid_mean(tracks), design_variance(tracks), vm, truth))
    table = pd.DataFrame(rows, columns=["replicate", "mu", "var_design", "var_model", "var_total", "covered"])
    return MonteCarloResult("tracks_only", replicates, truth, table)


def run_replicate(world: World, r: int, settings: PipelineSettings | None = None):
    """One full-chain replicate: new tracks, allometry, plots and training
    segments; both models refitted."""
    cfg = world.config
    settings = settings or settings_for_world(cfg)
    rng = replicate_rng(cfg.seed, r)
    cols = rng.integers(0, cfg.n_cols, cfg.n_tracks)
    spec_hat = draw_allometry(world.allometry, rng)
    t = draw_training(cfg, world.raster, world.allometry, world.mean_tree_kg, rng)
    h = fit_hierarchy(spec_hat, t.trees, t.plots, t.subcells, t.segments, settings)
    res = estimate_target(h, world.column_segments(cols), settings, decompose=False)
    rep = res.report
    return _row(r, rep.mu, rep.var_design, rep.var_model, world.true_mean)


def run_sampling_mc(world: World, replicates: int, resample: str = "tracks_only", settings: PipelineSettings | None = None) -> MonteCarloResult:
    """Repeat sampling (and, for ``full_chain``, model fitting) on a world.

    Replicate ``r`` draws from a Philox stream keyed by ``seed ^ r``, so any
    replicate can be reproduced on its own.
    """
    if replicates < 2:
        raise ValidationError("Monte Carlo needs at least 2 replicates")
    if resample == "tracks_only":
        return _tracks_only(world, replicates, settings)
    if resample != "full_chain":
        raise ValidationError(f"unknown resampling mode {resample!r}")
    rows = [run_replicate(world, r, settings) for r in range(replicates)]
    table = pd.DataFrame(rows, columns=["replicate", "mu", "var_design", "var_model", "var_total", "covered"])
    return MonteCarloResult("full_chain", replicates, world.true_mean, table)
