"""Squared-linear-predictor regression fitted by generalized nonlinear least squares.

The mean function is ``f(beta, x) = (beta_0 + sum_j beta_j t_j(x_j))**2`` where
``t_j`` is the identity or a square root. Residual variance is either
homoscedastic or of constant-plus-power form ``sigma^2 (c + f^p)^2``.

Fitting alternates between

1. damped Gauss-Newton for ``beta`` with weights fixed at the inverse
   residual variances, and
2. the variance-function parameters, maximizing the Gaussian
   pseudo-likelihood of the residuals given the fitted values (``sigma`` is
   profiled out; ``log c`` and ``p`` are searched with bounded L-BFGS-B),

until both change by less than ``tol`` or ``max_iter`` rounds have run.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted, validate_data

from .exceptions import ColumnMismatch, InputFileError, SingularNormalEquations, ValidationError

VARIANCE_KINDS = ("constant_plus_power", "homoscedastic")
TRANSFORM_KINDS = ("identity", "sqrt")

_SIGMA_FLOOR = float(np.sqrt(np.finfo(float).tiny))
_LOG_C_BOUNDS = (-25.0, 25.0)
_P_BOUNDS = (0.0, 2.0)


@dataclass(frozen=True)
class VarianceFunction:
    kind: str = "homoscedastic"
    sigma: float = 1.0
    c: float = 0.0
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in VARIANCE_KINDS:
            raise ValidationError(f"unknown variance function {self.kind!r}")
        if not self.sigma > 0:
            raise ValidationError("variance function sigma must be positive")
        if self.kind == "constant_plus_power" and self.c < 0:
            raise ValidationError("variance function offset c must be non-negative")

    def shape(self, fitted) -> np.ndarray:
        """Residual variance divided by ``sigma**2``."""
        fitted = np.asarray(fitted, dtype=float)
        if self.kind == "homoscedastic":
            return np.ones_like(fitted)
        return (self.c + np.power(np.clip(fitted, 0.0, None), self.p)) ** 2

    def variance(self, fitted) -> np.ndarray:
        return self.sigma**2 * self.shape(fitted)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "c": self.c, "p": self.p}


def _profile_nll(theta, resid2, fitted, log_fitted):
    """Negative log pseudo-likelihood with sigma profiled out, and its
    gradient in ``(log c, p)``."""
    log_c, p = theta
    c = np.exp(log_c)
    fp = np.power(fitted, p)
    s = c + fp
    q = resid2 / (s * s)
    sigma2 = np.mean(q)
    if not np.isfinite(sigma2) or sigma2 <= 0:
        return np.inf, np.zeros(2)
    n = resid2.size
    nll = 0.5 * n * np.log(sigma2) + np.sum(np.log(s))
    d_s = (1.0 - q / sigma2) / s
    return nll, np.array([np.sum(d_s) * c, np.sum(d_s * fp * log_fitted)])


def estimate_variance_function(residuals, fitted, kind: str, start: VarianceFunction | None = None) -> VarianceFunction:
    """Pseudo-likelihood estimate of the residual variance function.

    The search always starts from ``c = 1, p = 0.5``; when ``start`` is
    given it is also tried and the better optimum is kept. The profile
    likelihood can be multimodal, and keeping the previous optimum as a
    candidate stops the outer fitting loop from cycling between modes.
    """
    r2 = np.asarray(residuals, float) ** 2
    fitted = np.clip(np.asarray(fitted, float), 0.0, None)
    ms = float(np.mean(r2))
    if kind == "homoscedastic":
        return VarianceFunction("homoscedastic", sigma=max(np.sqrt(ms), _SIGMA_FLOOR))
    if kind != "constant_plus_power":
        raise ValidationError(f"unknown variance function {kind!r}")
    if ms <= _SIGMA_FLOOR**2:
        return VarianceFunction("constant_plus_power", sigma=_SIGMA_FLOOR, c=1.0, p=0.5)

    log_fitted = np.log(np.where(fitted > 0, fitted, 1.0))
    starts = [np.array([0.0, 0.5])]
    if start is not None and start.kind == "constant_plus_power":
        starts.append(np.clip([np.log(max(start.c, 1e-300)), start.p], *zip(_LOG_C_BOUNDS, _P_BOUNDS)))
    best = None
    for x0 in starts:
        res = minimize(
            _profile_nll,
            x0=x0,
            args=(r2, fitted, log_fitted),
            jac=True,
            method="L-BFGS-B",
            bounds=[_LOG_C_BOUNDS, _P_BOUNDS],
            options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 1000},
        )
        if best is None or res.fun < best.fun:
            best = res
    log_c, p = best.x
    c = float(np.exp(log_c))
    s = c + np.power(fitted, p)
    sigma = float(np.sqrt(np.mean(r2 / (s * s))))
    return VarianceFunction("constant_plus_power", sigma=max(sigma, _SIGMA_FLOOR), c=c, p=float(p))


def _design(X: np.ndarray, transforms) -> np.ndarray:
    cols = [np.ones(X.shape[0])]
    for j, kind in enumerate(transforms):
        col = X[:, j]
        if kind == "sqrt":
            if (col < 0).any():
                raise ValidationError(f"sqrt-transformed predictor {j} has negative values")
            col = np.sqrt(col)
        cols.append(col)
    return np.column_stack(cols)


def gauss_newton(Z, y, weights, beta, *, max_iter=200, tol=1e-12, max_halvings=20):
    """Weighted Gauss-Newton for ``y ~ (Z beta)^2`` with step halving.

    Returns ``(beta, n_iter, last_step_norm)``.
    """
    sw = np.sqrt(weights)
    beta = np.array(beta, dtype=float)
    lin = Z @ beta
    r = y - lin * lin
    sse = float(np.sum(weights * r * r))
    step_norm = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        jac = 2.0 * lin[:, None] * Z
        step, _, rank, _ = np.linalg.lstsq(sw[:, None] * jac, sw * r, rcond=None)
        if rank < Z.shape[1]:
            raise SingularNormalEquations(
                f"normal equations are rank deficient ({rank} < {Z.shape[1]})"
            )
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            lin_c = Z @ cand
            r_c = y - lin_c * lin_c
            sse_c = float(np.sum(weights * r_c * r_c))
            if sse_c <= sse:
                break
            t *= 0.5
        else:
            break
        step_norm = float(np.max(np.abs(t * step)))
        beta, lin, r, sse = cand, lin_c, r_c, sse_c
        if step_norm <= tol * max(float(np.max(np.abs(beta))), 1e-300):
            break
    return beta, it, step_norm


def _resolve_transforms(transforms, names, k):
    if transforms is None:
        return ["identity"] * k
    if isinstance(transforms, dict):
        unknown = set(transforms) - set(names)
        if unknown:
            raise ColumnMismatch(f"transforms given for unknown predictors {sorted(unknown)}")
        out = [transforms.get(n, "identity") for n in names]
    else:
        out = list(transforms)
        if len(out) != k:
            raise ColumnMismatch(f"{len(out)} transforms for {k} predictors")
    bad = [t for t in out if t not in TRANSFORM_KINDS]
    if bad:
        raise ValidationError(f"unknown transforms {bad}")
    return out


class QuadraticGNLS(RegressorMixin, BaseEstimator):
    """Quadratic (squared linear predictor) regression with a residual
    variance function.

    Parameters
    ----------
    variance : {"constant_plus_power", "homoscedastic"}
        Residual variance structure.
    transforms : dict or sequence, optional
        Per-predictor input transform, ``"identity"`` or ``"sqrt"``. A dict
        is keyed by column name.
    max_iter : int
        Maximum number of outer (reweighting) iterations.
    tol : float
        Relative convergence tolerance on coefficients and variance
        parameters.
    max_halvings : int
        Step halvings allowed per Gauss-Newton step.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features + 1,)
        Intercept followed by slopes, canonicalized so the mean training
        linear predictor is non-negative.
    variance_function_ : VarianceFunction or None
        ``None`` when fitted with fixed ``sample_weight``.
    cov_naive_ : ndarray
        ``(J^T Sigma^-1 J)^-1`` at the training data.
    converged_ : bool
    n_iter_ : int
    """

    def __init__(self, variance="constant_plus_power", transforms=None, max_iter=100, tol=1e-8, max_halvings=20):
        self.variance = variance
        self.transforms = transforms
        self.max_iter = max_iter
        self.tol = tol
        self.max_halvings = max_halvings

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y, sample_weight=None):
        """Fit the model.

        ``sample_weight``, when given, is taken as known inverse residual
        variances: the weights stay fixed and no variance function is
        estimated.
        """
        if self.variance not in VARIANCE_KINDS:
            raise ValidationError(f"unknown variance function {self.variance!r}")
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        y = np.asarray(y, dtype=float)
        n, k = X.shape
        if n <= k + 1:
            raise ValidationError(f"need more than {k + 1} rows to fit {k + 1} coefficients, got {n}")
        if (y < 0).any():
            raise ValidationError("response must be non-negative")
        self.transforms_ = _resolve_transforms(self.transforms, self.feature_names_, k)
        Z = _design(X, self.transforms_)
        self.X_train_ = X.copy()
        self.train_variance_fixed_ = None
        if sample_weight is not None:
            w = np.asarray(sample_weight, dtype=float)
            if w.shape != (n,) or not (w > 0).all():
                raise ValidationError("sample_weight must be positive with one entry per row")
            self.train_variance_fixed_ = 1.0 / w

        if np.ptp(y) == 0:
            beta = np.zeros(k + 1)
            beta[0] = np.sqrt(y[0])
            self.coef_ = beta
            if sample_weight is not None:
                self.variance_function_ = None
            elif self.variance == "constant_plus_power":
                self.variance_function_ = VarianceFunction(self.variance, sigma=_SIGMA_FLOOR, c=1.0, p=0.5)
            else:
                self.variance_function_ = VarianceFunction("homoscedastic", sigma=_SIGMA_FLOOR)
            self.n_iter_, self.step_norm_, self.converged_ = 0, 0.0, True
            self._finish(Z, y)
            return self

        beta, _, rank, _ = np.linalg.lstsq(Z, np.sqrt(y), rcond=None)
        if rank < k + 1:
            raise SingularNormalEquations(f"predictor matrix is rank deficient ({rank} < {k + 1})")

        if sample_weight is not None:
            beta, it, step = gauss_newton(Z, y, w, beta, max_halvings=self.max_halvings)
            self.coef_ = beta
            self.variance_function_ = None
            self.n_iter_, self.step_norm_, self.converged_ = it, step, True
            self._finish(Z, y)
            return self

        varfn = VarianceFunction(self.variance)
        best = None
        converged = False
        step = 0.0
        it = 0
        for it in range(1, self.max_iter + 1):
            lin = Z @ beta
            w = 1.0 / np.maximum(varfn.shape(lin * lin), 1e-300)
            new_beta, _, step = gauss_newton(Z, y, w, beta, max_halvings=self.max_halvings)
            lin = Z @ new_beta
            fitted = lin * lin
            new_varfn = estimate_variance_function(y - fitted, fitted, self.variance, start=varfn if it > 1 else None)

            nll = _full_nll(y - fitted, new_varfn.variance(fitted))
            if best is None or nll <= best[0]:
                best = (nll, new_beta, new_varfn)

            d_beta = np.max(np.abs(new_beta - beta)) / max(np.max(np.abs(new_beta)), 1e-300)
            d_var = _varfn_change(varfn, new_varfn, fitted) if it > 1 else np.inf
            beta, varfn = new_beta, new_varfn
            if d_beta < self.tol and d_var < self.tol:
                converged = True
                break

        if not converged:
            warnings.warn(
                f"GNLS did not converge in {self.max_iter} iterations; returning the best iterate",
                ConvergenceWarning,
                stacklevel=2,
            )
            _, beta, varfn = best
        self.coef_ = beta
        self.variance_function_ = varfn
        self.n_iter_, self.step_norm_, self.converged_ = it, step, converged
        self._finish(Z, y)
        return self

    def _finish(self, Z, y):
        if np.mean(Z @ self.coef_) < 0:
            self.coef_ = -self.coef_
        lin = Z @ self.coef_
        self.fitted_values_ = lin * lin
        self.residuals_ = y - self.fitted_values_
        self.cov_naive_ = naive_covariance(2.0 * lin[:, None] * Z, self.train_variance_)

    # -- prediction --------------------------------------------------------

    @property
    def feature_names_(self) -> list[str]:
        names = getattr(self, "feature_names_in_", None)
        if names is not None:
            return [str(n) for n in names]
        return [f"x{i}" for i in range(self.n_features_in_)]

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "coef_")
        names = getattr(self, "feature_names_in_", None)
        if isinstance(X, pd.DataFrame) and names is not None:
            missing = [n for n in names if n not in X.columns]
            if missing:
                raise ColumnMismatch(f"missing predictor columns {missing}")
            X = X[list(names)]
        elif np.ndim(X) == 2:
            if np.shape(X)[1] != self.n_features_in_:
                raise ColumnMismatch(f"expected {self.n_features_in_} predictor columns, got {np.shape(X)[1]}")
            if names is not None:
                # Bare arrays are taken to be in training column order.
                X = pd.DataFrame(np.asarray(X, dtype=float), columns=list(names))
        return validate_data(self, X, reset=False, dtype=np.float64)

    def _lin(self, X):
        Z = _design(self._check_X(X), self.transforms_)
        return Z, Z @ self.coef_

    def predict(self, X) -> np.ndarray:
        _, lin = self._lin(X)
        return lin * lin

    def mean_jacobian(self, X) -> np.ndarray:
        """``d f / d beta`` at each row, shape ``(n, n_features + 1)``."""
        Z, lin = self._lin(X)
        return 2.0 * lin[:, None] * Z

    # -- training-data summaries used by the covariance chain --------------

    @property
    def train_variance_(self) -> np.ndarray:
        """Diagonal of the estimated residual covariance at the training rows."""
        if self.train_variance_fixed_ is not None:
            return self.train_variance_fixed_
        lin = _design(self.X_train_, self.transforms_) @ self.coef_
        return self.variance_function_.variance(lin * lin)

    def train_jacobian(self) -> np.ndarray:
        check_is_fitted(self, "coef_")
        if getattr(self, "X_train_", None) is None:
            raise ValidationError("model carries no training data")
        Z = _design(self.X_train_, self.transforms_)
        return 2.0 * (Z @ self.coef_)[:, None] * Z

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "coef_")
        vf = self.variance_function_
        x_train = getattr(self, "X_train_", None)
        fixed = getattr(self, "train_variance_fixed_", None)
        return {
            "model": "quadratic",
            "feature_names": self.feature_names_,
            "transforms": list(self.transforms_),
            "coef": [float(v) for v in self.coef_],
            "variance_function": None if vf is None else vf.to_dict(),
            "cov_naive": None if getattr(self, "cov_naive_", None) is None else self.cov_naive_.tolist(),
            "n_iter": int(getattr(self, "n_iter_", 0)),
            "step_norm": float(getattr(self, "step_norm_", 0.0)),
            "converged": bool(getattr(self, "converged_", True)),
            "X_train": None if x_train is None else x_train.tolist(),
            "train_variance": None if fixed is None else [float(v) for v in fixed],
            "params": self.get_params(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuadraticGNLS":
        params = dict(data.get("params") or {})
        vf = data.get("variance_function")
        if vf is not None:
            params.setdefault("variance", vf["kind"])
        model = cls(**params)
        names = list(data["feature_names"])
        model.feature_names_in_ = np.asarray(names, dtype=object)
        model.n_features_in_ = len(names)
        model.transforms_ = _resolve_transforms(list(data["transforms"]), names, len(names))
        model.coef_ = np.asarray(data["coef"], dtype=float)
        if model.coef_.size != len(names) + 1:
            raise ValidationError("coefficient count must equal predictor count + 1")
        model.variance_function_ = None if vf is None else VarianceFunction(**vf)
        cov = data.get("cov_naive")
        model.cov_naive_ = None if cov is None else np.asarray(cov, dtype=float)
        model.n_iter_ = int(data.get("n_iter", 0))
        model.step_norm_ = float(data.get("step_norm", 0.0))
        model.converged_ = bool(data.get("converged", True))
        x_train = data.get("X_train")
        model.X_train_ = None if x_train is None else np.asarray(x_train, dtype=float).reshape(-1, len(names))
        tv = data.get("train_variance")
        model.train_variance_fixed_ = None if tv is None else np.asarray(tv, dtype=float)
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QuadraticGNLS":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise InputFileError(f"cannot read model {path}: {exc}") from exc


def _full_nll(resid, var):
    return 0.5 * float(np.sum(np.log(var) + resid * resid / var))


def _varfn_change(a: VarianceFunction, b: VarianceFunction, fitted) -> float:
    """Largest change in log residual sd over the fitted values."""
    sa = np.sqrt(a.variance(fitted))
    sb = np.sqrt(b.variance(fitted))
    return float(np.max(np.abs(np.log(sa) - np.log(sb))))


def naive_covariance(jacobian, variance) -> np.ndarray:
    """``(J^T Sigma^-1 J)^-1`` for diagonal ``Sigma``."""
    jacobian = np.asarray(jacobian, float)
    variance = np.asarray(variance, float)
    # Scale out the overall variance level so tiny sigmas cannot overflow.
    scale = float(np.max(variance))
    info = jacobian.T @ (jacobian / (variance / scale)[:, None])
    try:
        out = np.linalg.inv(info) * scale
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations("information matrix is singular") from exc
    return 0.5 * (out + out.T)


def predict(model: QuadraticGNLS, X) -> np.ndarray:
    return model.predict(X)


def mean_jacobian(model: QuadraticGNLS, X) -> np.ndarray:
    return model.mean_jacobian(X)


def fit_gnls(X, y, varfn_kind: str = "constant_plus_power", **kwargs) -> QuadraticGNLS:
    return QuadraticGNLS(variance=varfn_kind, **kwargs).fit(X, y)


def load_published_models() -> dict[str, QuadraticGNLS]:
    """Published coefficient fixtures (no training data attached)."""
    path = Path(__file__).with_name("published_models.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    return {name: QuadraticGNLS.from_dict(entry) for name, entry in data.items()}
