"""Covariance chain through allometry, proxy model and satellite model.

Parameter covariance at each regression level is the naive GNLS term plus
the contribution of uncertain responses, both from a first-order expansion::

    C = I^-1 + I^-1 J^T S^-1 C_resp S^-1 J I^-1,    I = J^T S^-1 J

Prediction covariances are congruences ``G^T C G``. They are kept in factored
form (a factor ``G`` and a small core ``C``) so that segment-level matrices
are only materialized when small enough.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .allometry import PlotAGBDResult
from .exceptions import DimensionMismatch, SingularInformation, ValidationError
from .gnls import QuadraticGNLS
from .tables import SUBCELLS_PER_SEGMENT

log = logging.getLogger(__name__)

DENSE_CAP = 20_000
ZERO_FLAGS = ("plot", "proxy", "model")


class JitterWarning(UserWarning):
    """Raised when an information matrix needed regularization."""


@dataclass
class FactoredCov:
    """Covariance ``factor.T @ core @ factor`` with a small ``core``."""

    factor: np.ndarray  # (k, n)
    core: np.ndarray  # (k, k)

    @property
    def n(self) -> int:
        return self.factor.shape[1]

    def dense(self) -> np.ndarray:
        out = self.factor.T @ self.core @ self.factor
        return 0.5 * (out + out.T)

    def quadform(self, weights=None) -> float:
        """``w^T C w``; ``w`` defaults to a vector of ones."""
        v = self.factor.sum(axis=1) if weights is None else self.factor @ np.asarray(weights, float)
        return float(v @ self.core @ v)

    def sandwich(self, B) -> np.ndarray:
        """``B^T C B`` for a dense ``B`` with ``n`` rows."""
        g = self.factor @ B
        out = g.T @ self.core @ g
        return 0.5 * (out + out.T)


def _as_variance(Sigma) -> np.ndarray:
    s = np.asarray(Sigma, dtype=float)
    if s.ndim == 2:
        if s.shape[0] != s.shape[1]:
            raise DimensionMismatch("residual covariance must be square")
        off = s - np.diag(np.diag(s))
        if np.any(off != 0):
            raise ValidationError("residual covariance must be diagonal")
        s = np.diag(s).copy()
    if not (s > 0).all():
        raise ValidationError("residual variances must be positive")
    return s


def _inv_information(info: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of a symmetric information matrix via Cholesky, with a
    reported Tikhonov jitter when it is numerically singular."""
    info = 0.5 * (info + info.T)
    k = info.shape[0]
    eye = np.eye(k)
    try:
        cf = linalg.cho_factor(info)
        cond = np.linalg.cond(info)
        if np.isfinite(cond) and cond < 1.0 / np.finfo(float).eps:
            return linalg.cho_solve(cf, eye), 0.0
    except linalg.LinAlgError:
        pass
    jitter = 1e-10 * float(np.trace(info)) / k
    if not jitter > 0:
        raise SingularInformation("information matrix has non-positive trace")
    try:
        cf = linalg.cho_factor(info + jitter * eye)
    except linalg.LinAlgError as exc:
        raise SingularInformation("information matrix is singular even after jitter") from exc
    msg = f"information matrix is near-singular; added jitter {jitter:.3e} to its diagonal"
    warnings.warn(msg, JitterWarning, stacklevel=3)
    log.warning(msg)
    return linalg.cho_solve(cf, eye), jitter


def param_cov_total(J, Sigma, C_resp=None, *, return_jitter=False):
    """Parameter covariance including response uncertainty.

    Parameters
    ----------
    J : (n, k) array
        Mean-function Jacobian at the training rows.
    Sigma : (n,) or diagonal (n, n) array
        Residual variances.
    C_resp : (n, n) array, FactoredCov or None
        Covariance of the responses; ``None`` means exact responses.
    """
    J = np.asarray(J, dtype=float)
    var = _as_variance(Sigma)
    if J.shape[0] != var.size:
        raise DimensionMismatch(f"Jacobian has {J.shape[0]} rows, residual covariance {var.size}")
    K = J / var[:, None]  # Sigma^-1 J
    # Work on a unit variance scale; the result is rescaled at the end.
    scale = float(np.max(var))
    inv_info, jitter = _inv_information(J.T @ K * scale)
    inv_info *= scale
    cov = inv_info
    if C_resp is not None:
        if isinstance(C_resp, FactoredCov):
            if C_resp.n != J.shape[0]:
                raise DimensionMismatch("response covariance does not match the training rows")
            middle = C_resp.sandwich(K)
        else:
            C_resp = np.asarray(C_resp, dtype=float)
            if C_resp.shape != (J.shape[0], J.shape[0]):
                raise DimensionMismatch(f"response covariance is {C_resp.shape}, expected {(J.shape[0],) * 2}")
            middle = K.T @ C_resp @ K
        cov = inv_info + inv_info @ middle @ inv_info
    cov = 0.5 * (cov + cov.T)
    return (cov, jitter) if return_jitter else cov


def averaging_matrix(segment_of_subcell, segment_ids) -> sparse.csr_matrix:
    """Sparse ``(n_subcell, n_segment)`` matrix with ``1/6`` where subcell
    ``i`` belongs to segment ``j``."""
    index = {sid: j for j, sid in enumerate(segment_ids)}
    cols = np.array([index.get(s, -1) for s in segment_of_subcell], dtype=np.int64)
    if (cols < 0).any():
        raise DimensionMismatch("subcell references a segment that is not in the segment list")
    counts = np.bincount(cols, minlength=len(segment_ids))
    if (counts != SUBCELLS_PER_SEGMENT).any():
        j = int(np.flatnonzero(counts != SUBCELLS_PER_SEGMENT)[0])
        raise DimensionMismatch(f"segment {segment_ids[j]!r} has {counts[j]} subcells")
    data = np.full(cols.size, 1.0 / SUBCELLS_PER_SEGMENT)
    return sparse.csr_matrix((data, (np.arange(cols.size), cols)), shape=(cols.size, len(segment_ids)))


def proxy_factor(fit: QuadraticGNLS, X_subcell, M) -> np.ndarray:
    """``J_f* M`` with shape ``(k + 1, n_segment)``."""
    jac = fit.mean_jacobian(X_subcell)
    if M.shape[0] != jac.shape[0]:
        raise DimensionMismatch(f"averaging matrix has {M.shape[0]} rows for {jac.shape[0]} subcells")
    return np.asarray((sparse.csr_matrix(M).T @ jac).T)


def proxy_prediction_cov(fit: QuadraticGNLS, X_subcell, M, c_beta, *, dense_cap: int = DENSE_CAP):
    """Covariance of segment proxy AGBD, ``M^T J_f*^T C_beta J_f* M``.

    Returns a dense array, or a :class:`FactoredCov` when the segment count
    exceeds ``dense_cap``.
    """
    fc = FactoredCov(proxy_factor(fit, X_subcell, M), np.asarray(c_beta, float))
    if fc.core.shape != (fc.factor.shape[0],) * 2:
        raise DimensionMismatch("parameter covariance does not match the proxy model")
    return fc.dense() if fc.n <= dense_cap else fc


def target_prediction_cov(fit_i2: QuadraticGNLS, Y_target, c_gamma, *, dense_cap: int = DENSE_CAP):
    """Covariance of target-segment predictions, ``J_g*^T C_gamma J_g*``."""
    fc = FactoredCov(fit_i2.mean_jacobian(Y_target).T, np.asarray(c_gamma, float))
    if fc.core.shape != (fc.factor.shape[0],) * 2:
        raise DimensionMismatch("parameter covariance does not match the satellite model")
    return fc.dense() if fc.n <= dense_cap else fc


@dataclass
class CovChain:
    c_plot: np.ndarray
    c_beta: np.ndarray
    c_proxy: np.ndarray | None
    proxy_cov: FactoredCov
    c_gamma: np.ndarray
    c_i2: np.ndarray | None
    i2_cov: FactoredCov
    zero_flags: frozenset = field(default_factory=frozenset)
    jitter: dict = field(default_factory=dict)

    @property
    def i2_quadform(self) -> float:
        """``1^T C_I2 1``."""
        return max(self.i2_cov.quadform(), 0.0)

    def summary(self) -> dict:
        ones = lambda m: float(np.sum(m))  # noqa: E731
        return {
            "zero_flags": sorted(self.zero_flags),
            "n_plot": int(self.c_plot.shape[0]),
            "n_train_segments": int(self.proxy_cov.n),
            "n_target_segments": int(self.i2_cov.n),
            "plot_quadform": ones(self.c_plot),
            "beta_trace": float(np.trace(self.c_beta)),
            "proxy_quadform": max(self.proxy_cov.quadform(), 0.0),
            "gamma_trace": float(np.trace(self.c_gamma)),
            "i2_quadform": self.i2_quadform,
            "jitter": dict(self.jitter),
        }


def build_chain(
    allometry_result: PlotAGBDResult | np.ndarray | None,
    proxy_fit: QuadraticGNLS,
    X_subcell,
    M,
    i2_fit: QuadraticGNLS,
    Y_target,
    zero_flags=(),
    *,
    dense_cap: int = DENSE_CAP,
) -> CovChain:
    """Propagate covariance from plot AGBD to target-segment predictions.

    ``zero_flags`` switches off components for the uncertainty
    decomposition: ``"plot"`` drops the allometric covariance, ``"proxy"``
    drops the whole proxy-prediction covariance, ``"model"`` drops the
    target prediction covariance.
    """
    flags = frozenset(zero_flags)
    unknown = flags - set(ZERO_FLAGS)
    if unknown:
        raise ValidationError(f"unknown zero flags {sorted(unknown)}")

    jf = proxy_fit.train_jacobian()
    n_plot = jf.shape[0]
    if allometry_result is None:
        c_plot = np.zeros((n_plot, n_plot))
    else:
        c_plot = np.asarray(getattr(allometry_result, "cov", allometry_result), dtype=float)
    if c_plot.shape != (n_plot, n_plot):
        raise DimensionMismatch(f"plot covariance is {c_plot.shape} but the proxy model has {n_plot} training plots")
    if "plot" in flags:
        c_plot = np.zeros_like(c_plot)

    jitter = {}
    c_beta, jitter["beta"] = param_cov_total(jf, proxy_fit.train_variance_, c_plot, return_jitter=True)

    pf = proxy_factor(proxy_fit, X_subcell, M)
    core = np.zeros_like(c_beta) if "proxy" in flags else c_beta
    proxy_cov = FactoredCov(pf, core)

    jg = i2_fit.train_jacobian()
    if jg.shape[0] != proxy_cov.n:
        raise DimensionMismatch(
            f"satellite model has {jg.shape[0]} training rows but {proxy_cov.n} proxy segments"
        )
    c_gamma, jitter["gamma"] = param_cov_total(jg, i2_fit.train_variance_, proxy_cov, return_jitter=True)

    i2_core = np.zeros_like(c_gamma) if "model" in flags else c_gamma
    i2_cov = FactoredCov(i2_fit.mean_jacobian(Y_target).T, i2_core)

    return CovChain(
        c_plot=c_plot,
        c_beta=c_beta,
        c_proxy=proxy_cov.dense() if proxy_cov.n <= dense_cap else None,
        proxy_cov=proxy_cov,
        c_gamma=c_gamma,
        c_i2=i2_cov.dense() if i2_cov.n <= dense_cap else None,
        i2_cov=i2_cov,
        zero_flags=flags,
        jitter=jitter,
    )


def is_psd(C, rel_tol: float = 1e-8) -> bool:
    """Symmetric within 1e-10 and min eigenvalue >= -rel_tol * trace / n."""
    C = np.asarray(C, float)
    if C.size == 0:
        return True
    scale = max(float(np.max(np.abs(C))), 1e-300)
    if np.max(np.abs(C - C.T)) > 1e-10 * scale:
        return False
    n = C.shape[0]
    return float(np.linalg.eigvalsh(C).min()) >= -rel_tol * max(float(np.trace(C)), 0.0) / n
