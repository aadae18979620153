"""Fixed-size predictor subset selection by simulated annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .exceptions import NumericalError, TooFewCandidates, ValidationError
from .gnls import gauss_newton


def subset_rmse(X: np.ndarray, y: np.ndarray, columns, *, gn_iter: int = 5) -> float:
    """RMSE of a homoscedastic quadratic fit on ``columns``.

    Rank-deficient or otherwise failing fits score ``inf``.
    """
    Z = np.column_stack([np.ones(X.shape[0]), X[:, list(columns)]])
    beta, _, rank, _ = np.linalg.lstsq(Z, np.sqrt(y), rcond=None)
    if rank < Z.shape[1]:
        return math.inf
    try:
        beta, _, _ = gauss_newton(Z, y, np.ones_like(y), beta, max_iter=gn_iter)
    except NumericalError:
        return math.inf
    lin = Z @ beta
    r = y - lin * lin
    out = math.sqrt(float(np.mean(r * r)))
    return out if math.isfinite(out) else math.inf


@dataclass
class AnnealConfig:
    subset_size: int = 4
    initial_temperature: float | None = None
    cooling_rate: float = 0.95
    iterations_per_temperature: int = 50
    min_temperature_ratio: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        if self.subset_size < 1:
            raise ValidationError("subset_size must be at least 1")
        if not 0.0 < self.cooling_rate < 1.0:
            raise ValidationError("cooling_rate must lie in (0, 1)")
        if self.iterations_per_temperature < 1:
            raise ValidationError("iterations_per_temperature must be at least 1")
        if self.initial_temperature is not None and self.initial_temperature < 0:
            raise ValidationError("initial_temperature must be non-negative")
        if not self.min_temperature_ratio > 0:
            raise ValidationError("min_temperature_ratio must be positive")


class AnnealingSelector(SelectorMixin, BaseEstimator):
    """Choose ``subset_size`` predictors minimizing quadratic-fit RMSE.

    A move swaps one chosen column for one unchosen column, both drawn
    uniformly. Moves are accepted with the Metropolis rule and the
    temperature falls geometrically. With ``initial_temperature=0`` the
    search is a greedy descent that stops after one sweep of
    ``iterations_per_temperature`` proposals.

    Parameters
    ----------
    subset_size : int
    initial_temperature : float, optional
        Defaults to the objective of a random starting subset.
    cooling_rate : float
    iterations_per_temperature : int
    min_temperature_ratio : float
        Annealing stops once ``T < min_temperature_ratio * T0``.
    rng_seed : int

    Attributes
    ----------
    support_ : ndarray of bool
    selected_ : list of str
        Chosen column names in input order.
    best_objective_ : float
    trace_ : ndarray of shape (n_steps, 3)
        Temperature, current objective and best-so-far objective per
        proposal.
    n_evaluations_ : int
        Distinct subsets fitted.
    """

    def __init__(
        self,
        subset_size=4,
        initial_temperature=None,
        cooling_rate=0.95,
        iterations_per_temperature=50,
        min_temperature_ratio=1e-4,
        rng_seed=0,
    ):
        self.subset_size = subset_size
        self.initial_temperature = initial_temperature
        self.cooling_rate = cooling_rate
        self.iterations_per_temperature = iterations_per_temperature
        self.min_temperature_ratio = min_temperature_ratio
        self.rng_seed = rng_seed

    def fit(self, X, y):
        cfg = AnnealConfig(**self.get_params())
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        y = np.asarray(y, dtype=float)
        if (y < 0).any():
            raise ValidationError("response must be non-negative")
        n_cand = X.shape[1]
        if n_cand < cfg.subset_size:
            raise TooFewCandidates(f"{n_cand} candidate columns for a subset of {cfg.subset_size}")

        cache: dict[tuple[int, ...], float] = {}

        def objective(subset) -> float:
            key = tuple(sorted(subset))
            if key not in cache:
                cache[key] = subset_rmse(X, y, key)
            return cache[key]

        rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
        current = sorted(rng.choice(n_cand, size=cfg.subset_size, replace=False).tolist())
        cur_obj = objective(current)
        best, best_obj = list(current), cur_obj
        trace = []

        if n_cand > cfg.subset_size:
            t0 = cfg.initial_temperature
            if t0 is None:
                t0 = cur_obj if math.isfinite(cur_obj) else float(np.std(y))
            t_min = cfg.min_temperature_ratio * t0
            temp = t0
            while True:
                for _ in range(cfg.iterations_per_temperature):
                    out_pos = int(rng.integers(cfg.subset_size))
                    unchosen = [j for j in range(n_cand) if j not in current]
                    new_col = unchosen[int(rng.integers(len(unchosen)))]
                    u = float(rng.random())
                    cand = sorted(current[:out_pos] + current[out_pos + 1 :] + [new_col])
                    cand_obj = objective(cand)
                    if _accept(cur_obj, cand_obj, temp, u):
                        current, cur_obj = cand, cand_obj
                        if cur_obj < best_obj:
                            best, best_obj = list(current), cur_obj
                    trace.append((temp, cur_obj, best_obj))
                temp *= cfg.cooling_rate
                if temp <= 0 or temp < t_min:
                    break
        else:
            trace.append((0.0, cur_obj, best_obj))

        if not math.isfinite(best_obj):
            raise NumericalError("every visited subset produced a singular fit")
        support = np.zeros(n_cand, dtype=bool)
        support[best] = True
        self.support_ = support
        names = getattr(self, "feature_names_in_", None)
        names = [str(v) for v in names] if names is not None else [f"x{i}" for i in range(n_cand)]
        self.selected_ = [names[j] for j in np.flatnonzero(support)]
        self.best_objective_ = best_obj
        self.trace_ = np.array(trace, dtype=float)
        self.n_evaluations_ = len(cache)
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_


def _accept(cur: float, new: float, temp: float, u: float) -> bool:
    if new <= cur:
        return True
    if temp <= 0 or not math.isfinite(new):
        return False
    if not math.isfinite(cur):
        return True
    return u < math.exp(-(new - cur) / temp)


def select_variables(X_candidates, y, config: AnnealConfig | None = None):
    """Run the annealer; returns ``(chosen names, objective trace)``."""
    config = config or AnnealConfig()
    sel = AnnealingSelector(
        subset_size=config.subset_size,
        initial_temperature=config.initial_temperature,
        cooling_rate=config.cooling_rate,
        iterations_per_temperature=config.iterations_per_temperature,
        min_temperature_ratio=config.min_temperature_ratio,
        rng_seed=config.rng_seed,
    ).fit(X_candidates, y)
    return sel.selected_, sel.trace_
