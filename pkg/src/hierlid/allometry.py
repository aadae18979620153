"""Tree allometry with parameter-uncertainty propagation to plot AGBD.

Species-specific biomass models are combined into one model through species
indicators; tree-level covariance follows from a first-order Taylor
expansion around the published parameters, and plot AGBD covariance from
the aggregation ``A^-1 U C_tree U^T A^-1``.

Every built-in form is log-linear in its parameters,
``AGB = exp(a . phi(d, h) + bias_log_var / 2)`` (kg), so the gradient with
respect to ``a`` is ``AGB * phi(d, h)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from .exceptions import DimensionMismatch, InputFileError, UnknownForm, ValidationError, ZeroArea
from .tables import SPECIES

FeatureMap = Callable[[np.ndarray, np.ndarray, dict], np.ndarray]


def _loglinear(d, h, const):
    return np.column_stack([np.ones_like(d), np.log(d), np.log(h)])


def _log_rational(d, h, const):
    # Rational diameter/height terms on the log scale; ds = 2 + 1.25 d.
    k_d = const.get("k_d", 12.0)
    k_h = const.get("k_h", 20.0)
    ds = 2.0 + 1.25 * d
    return np.column_stack([np.ones_like(d), ds / (ds + k_d), h / (h + k_h)])


FORMS: dict[str, tuple[FeatureMap, int]] = {
    "loglinear": (_loglinear, 3),
    "log_rational": (_log_rational, 3),
}


def register_form(name: str, features: FeatureMap, n_params: int) -> None:
    """Add a log-linear-in-parameters form usable from ``allometry.json``."""
    FORMS[name] = (features, n_params)


@dataclass
class SpeciesModel:
    form: str
    params: np.ndarray
    cov: np.ndarray
    bias_log_var: float = 0.0
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.form not in FORMS:
            raise UnknownForm(f"unknown allometric form {self.form!r}; known: {sorted(FORMS)}")
        self.params = np.asarray(self.params, dtype=float).ravel()
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        arity = FORMS[self.form][1]
        if self.params.size != arity:
            raise ValidationError(f"form {self.form!r} takes {arity} parameters, got {self.params.size}")
        if self.cov.shape != (arity, arity):
            raise ValidationError(f"parameter covariance must be {arity}x{arity}, got {self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-10):
            raise ValidationError("parameter covariance is not symmetric")
        eig = np.linalg.eigvalsh(self.cov)
        if eig.min() < -1e-8 * max(eig.max(), 0.0):
            raise ValidationError("parameter covariance is not positive semi-definite")

    def features(self, d, h) -> np.ndarray:
        return FORMS[self.form][0](np.asarray(d, float), np.asarray(h, float), self.constants)

    def agb(self, d, h, params=None) -> np.ndarray:
        a = self.params if params is None else params
        return np.exp(self.features(d, h) @ a + 0.5 * self.bias_log_var)


@dataclass
class AllometricModelSpec:
    """Per-species models, stacked in the order pine, spruce, deciduous."""

    models: dict[str, SpeciesModel]

    def __post_init__(self):
        missing = [s for s in SPECIES if s not in self.models]
        if missing:
            raise ValidationError(f"allometry spec lacks species {missing}")

    @property
    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for s in SPECIES:
            n = self.models[s].params.size
            out[s] = slice(start, start + n)
            start += n
        return out

    @property
    def n_params(self) -> int:
        return sum(self.models[s].params.size for s in SPECIES)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.models[s].params for s in SPECIES])

    @property
    def cov(self) -> np.ndarray:
        """Block-diagonal stacked parameter covariance."""
        out = np.zeros((self.n_params, self.n_params))
        for s, sl in self.offsets.items():
            out[sl, sl] = self.models[s].cov
        return out

    def with_params(self, params: np.ndarray) -> "AllometricModelSpec":
        params = np.asarray(params, float)
        models = {}
        for s, sl in self.offsets.items():
            m = self.models[s]
            models[s] = SpeciesModel(m.form, params[sl], m.cov, m.bias_log_var, dict(m.constants))
        return AllometricModelSpec(models)

    @classmethod
    def from_dict(cls, data: dict) -> "AllometricModelSpec":
        models = {}
        for s in SPECIES:
            if s not in data:
                raise ValidationError(f"allometry spec lacks species {s!r}")
            d = data[s]
            models[s] = SpeciesModel(
                form=d["form"],
                params=d["params"],
                cov=d["cov"],
                bias_log_var=float(d.get("bias_log_var", 0.0)),
                constants=dict(d.get("constants", {})),
            )
        return cls(models)

    def to_dict(self) -> dict:
        out = {}
        for s in SPECIES:
            m = self.models[s]
            out[s] = {
                "form": m.form,
                "params": m.params.tolist(),
                "cov": m.cov.tolist(),
                "bias_log_var": m.bias_log_var,
            }
            if m.constants:
                out[s]["constants"] = dict(m.constants)
        return out


def load_allometry(path) -> AllometricModelSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputFileError(f"cannot read allometry spec {path}: {exc}") from exc
    return AllometricModelSpec.from_dict(data)


def default_spec(rel_sd: float = 0.01) -> AllometricModelSpec:
    """Built-in log-linear test models.

    Intercept and slope errors are strongly anti-correlated, as is typical
    of log-scale fits; ``rel_sd`` sets each parameter sd relative to its
    magnitude.
    """
    params = {
        "pine": [-2.2, 2.1, 0.55],
        "spruce": [-2.0, 1.95, 0.6],
        "deciduous": [-2.6, 2.3, 0.45],
    }
    corr = np.array([[1.0, -0.8, -0.3], [-0.8, 1.0, -0.2], [-0.3, -0.2, 1.0]])
    models = {}
    for s, p in params.items():
        sd = rel_sd * np.abs(p)
        models[s] = SpeciesModel("loglinear", p, corr * np.outer(sd, sd))
    return AllometricModelSpec(models)


def _tree_arrays(trees):
    if isinstance(trees, pd.DataFrame):
        return (
            trees["dbh_cm"].to_numpy(float),
            trees["height_m"].to_numpy(float),
            trees["species"].to_numpy(),
        )
    d, h, s = trees
    return np.asarray(d, float), np.asarray(h, float), np.asarray(s)


def species_indicators(species) -> np.ndarray:
    """``(n_trees, 3)`` 0/1 matrix; each row has exactly one 1."""
    species = np.asarray(species)
    ind = np.column_stack([species == s for s in SPECIES]).astype(float)
    bad = ind.sum(axis=1) != 1
    if bad.any():
        raise ValidationError(f"unknown species {species[bad][0]!r}")
    return ind


def eval_combined_agb(spec: AllometricModelSpec, trees, params=None) -> np.ndarray:
    """Tree AGB (kg) from the indicator-combined model.

    ``trees`` is a trees table or a ``(dbh, height, species)`` triple.
    ``params`` optionally overrides the stacked parameter vector.
    """
    d, h, species = _tree_arrays(trees)
    ind = species_indicators(species)
    params = spec.params if params is None else np.asarray(params, float)
    out = np.zeros(d.shape)
    for j, s in enumerate(SPECIES):
        sel = ind[:, j] == 1
        if sel.any():
            out[sel] = spec.models[s].agb(d[sel], h[sel], params[spec.offsets[s]])
    return out


def tree_jacobian(spec: AllometricModelSpec, trees) -> np.ndarray:
    """Partial derivatives of tree AGB, shape ``(n_params_total, n_trees)``.

    Rows follow the stacked parameter vector; entries belonging to another
    species' block are exactly zero.
    """
    d, h, species = _tree_arrays(trees)
    ind = species_indicators(species)
    jac = np.zeros((spec.n_params, d.size))
    for j, s in enumerate(SPECIES):
        sel = np.flatnonzero(ind[:, j] == 1)
        if sel.size == 0:
            continue
        model = spec.models[s]
        phi = model.features(d[sel], h[sel])
        agb = np.exp(phi @ model.params + 0.5 * model.bias_log_var)
        jac[spec.offsets[s], sel] = (phi * agb[:, None]).T
    return jac


def tree_covariance(spec: AllometricModelSpec, trees, jacobian=None) -> np.ndarray:
    """``J^T C_alpha J`` over the trees (kg^2)."""
    jac = tree_jacobian(spec, trees) if jacobian is None else np.asarray(jacobian, float)
    c_alpha = spec.cov
    if jac.shape[0] != c_alpha.shape[0]:
        raise DimensionMismatch(f"jacobian has {jac.shape[0]} rows, parameter covariance {c_alpha.shape[0]}")
    out = jac.T @ c_alpha @ jac
    return 0.5 * (out + out.T)


@dataclass
class PlotAGBDResult:
    plot_ids: list
    agbd: np.ndarray  # Mg/ha
    cov: np.ndarray  # (Mg/ha)^2
    gradient: np.ndarray  # d agbd / d alpha, (n_params, n_plots)

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"plot_id": self.plot_ids, "agbd": self.agbd, "se": self.se()})


def aggregation_matrix(tree_plot_ids, plot_ids) -> np.ndarray:
    """0/1 matrix ``U`` with ``U[i, j] = 1`` when tree ``j`` is on plot ``i``."""
    index = {pid: i for i, pid in enumerate(plot_ids)}
    rows = np.array([index.get(p, -1) for p in tree_plot_ids], dtype=np.int64)
    if (rows < 0).any():
        raise ValidationError("tree references a plot not in the plot list")
    u = np.zeros((len(plot_ids), len(rows)))
    u[rows, np.arange(len(rows))] = 1.0
    return u


def plot_agbd(spec: AllometricModelSpec, trees: pd.DataFrame, plots: pd.DataFrame, params=None) -> PlotAGBDResult:
    """Plot AGBD (Mg/ha) and its covariance from allometric parameter error.

    Empty plots get AGBD 0 with zero covariance row and column.
    """
    area = plots["area_ha"].to_numpy(float)
    if (area <= 0).any():
        raise ZeroArea(f"plot {plots['plot_id'].to_numpy()[area <= 0][0]!r} has non-positive area")
    plot_ids = list(plots["plot_id"])
    u = aggregation_matrix(trees["plot_id"].to_numpy(), plot_ids)
    scale = 1.0 / (1000.0 * area)  # kg per plot -> Mg/ha

    work = spec if params is None else spec.with_params(params)
    agb = eval_combined_agb(work, trees)
    jac = tree_jacobian(work, trees)
    agbd = scale * (u @ agb)
    # G = J U^T A^-1, so C_plot = G^T C_alpha G without forming C_tree.
    grad = (jac @ u.T) * scale[None, :]
    cov = grad.T @ spec.cov @ grad
    cov = 0.5 * (cov + cov.T)
    return PlotAGBDResult(plot_ids=plot_ids, agbd=agbd, cov=cov, gradient=grad)


def plot_agbd_draws(spec: AllometricModelSpec, trees: pd.DataFrame, plots: pd.DataFrame, param_draws) -> np.ndarray:
    """Plot AGBD for each row of ``param_draws`` (n_draws, n_params)."""
    draws = np.atleast_2d(np.asarray(param_draws, float))
    d, h, species = _tree_arrays(trees)
    ind = species_indicators(species)
    agb = np.zeros((draws.shape[0], d.size))
    for j, s in enumerate(SPECIES):
        sel = ind[:, j] == 1
        if not sel.any():
            continue
        m = spec.models[s]
        phi = m.features(d[sel], h[sel])
        agb[:, sel] = np.exp(draws[:, spec.offsets[s]] @ phi.T + 0.5 * m.bias_log_var)
    area = plots["area_ha"].to_numpy(float)
    u = aggregation_matrix(trees["plot_id"].to_numpy(), list(plots["plot_id"]))
    return (agb @ u.T) / (1000.0 * area)[None, :]
