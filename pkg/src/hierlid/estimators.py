"""Hybrid and model-based estimators of mean AGBD.

The hybrid estimator treats each satellite track as a cluster sampled with
replacement. Its variance is the cluster-sampling (design) variance of the
ratio of track totals plus the model variance carried by the covariance of
the segment predictions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .exceptions import EmptyInput, EmptyRaster, InsufficientClusters, LengthMismatch, ValidationError
from .gnls import QuadraticGNLS
from .propagation import CovChain, build_chain

Z95 = 1.959963984540054

DECOMPOSITION_CONFIGS = (
    ("all components", ()),
    ("allometry removed", ("plot",)),
    ("allometry and proxy model removed", ("plot", "proxy")),
    ("sampling only", ("plot", "proxy", "model")),
)


@dataclass(frozen=True)
class TrackAggregate:
    track_id: str
    agbd_sum: float
    n_seg: int

    def __post_init__(self):
        if self.n_seg < 1:
            raise ValidationError(f"track {self.track_id!r} has no segments")
        if not self.agbd_sum >= 0:
            raise ValidationError(f"track {self.track_id!r} has a negative AGBD sum")


def aggregate_tracks(track_ids, agbd) -> list[TrackAggregate]:
    """Per-track sums of segment predictions, in order of first appearance."""
    track_ids = np.asarray(track_ids)
    agbd = np.asarray(agbd, dtype=float)
    if track_ids.shape != agbd.shape:
        raise LengthMismatch(f"{track_ids.size} track ids for {agbd.size} predictions")
    if agbd.size == 0:
        raise EmptyInput("no segments to aggregate")
    frame = pd.DataFrame({"track": track_ids, "agbd": agbd})
    grouped = frame.groupby("track", sort=False)["agbd"]
    sums, counts = grouped.sum(), grouped.size()
    return [TrackAggregate(str(t), float(sums[t]), int(counts[t])) for t in sums.index]


def _arrays(tracks) -> tuple[np.ndarray, np.ndarray]:
    tracks = list(tracks)
    if not tracks:
        raise EmptyInput("no tracks")
    sums = np.array([t.agbd_sum for t in tracks], dtype=float)
    counts = np.array([t.n_seg for t in tracks], dtype=float)
    return sums, counts


def hybrid_mean(tracks) -> float:
    """Ratio of summed track AGBD to summed segment count."""
    sums, counts = _arrays(tracks)
    return math.fsum(sums) / math.fsum(counts)


def design_variance(tracks) -> float:
    """With-replacement cluster-sampling variance of the ratio estimator."""
    sums, counts = _arrays(tracks)
    n = sums.size
    if n < 2:
        raise InsufficientClusters(f"design variance needs at least 2 tracks, got {n}")
    mu = math.fsum(sums) / math.fsum(counts)
    nbar = counts.mean()
    resid = sums - mu * counts
    return math.fsum(resid * resid) / (n * (n - 1) * nbar * nbar)


def model_variance(c_i2_quadform: float, n_tot: int) -> float:
    if c_i2_quadform < 0:
        raise ValidationError("quadratic form of a covariance must be non-negative")
    if n_tot < 1:
        raise ValidationError("need at least one segment")
    return float(c_i2_quadform) / float(n_tot) ** 2


def format_estimate(mu: float, se: float, unit: str = "Mg/ha") -> str:
    """``"65.7 ± 1.91 Mg/ha, 2.9%"``."""
    rel = se / mu if mu > 0 else float("nan")
    unit = f" {unit}" if unit else ""
    return f"{mu:.1f} ± {se:.2f}{unit}, {100 * rel:.1f}%"


@dataclass
class EstimateReport:
    mu: float
    var_design: float
    var_model: float
    n_track: int
    n_tot: int
    method: str = "hybrid"
    decomposition: list[tuple[str, float]] = field(default_factory=list)
    diagnostics: dict[str, float] = field(default_factory=dict)

    @property
    def var_total(self) -> float:
        return self.var_design + self.var_model

    @property
    def se_total(self) -> float:
        return math.sqrt(self.var_total)

    @property
    def rel_se(self) -> float:
        return self.se_total / self.mu if self.mu > 0 else float("nan")

    @property
    def ci95(self) -> tuple[float, float]:
        half = Z95 * self.se_total
        return self.mu - half, self.mu + half

    def contributions(self) -> list[tuple[str, float]]:
        """Successive differences of the decomposition standard errors."""
        out = []
        for (label, se), (_, nxt) in zip(self.decomposition, self.decomposition[1:]):
            out.append((label, se - nxt))
        if self.decomposition:
            out.append(self.decomposition[-1])
        return out

    def summary(self) -> str:
        return format_estimate(self.mu, self.se_total)

    def to_dict(self) -> dict:
        lo, hi = self.ci95
        return {
            "method": self.method,
            "mu": self.mu,
            "var_design": self.var_design,
            "var_model": self.var_model,
            "var_total": self.var_total,
            "se_total": self.se_total,
            "rel_se": self.rel_se,
            "ci95": [lo, hi],
            "n_track": self.n_track,
            "n_tot": self.n_tot,
            "decomposition": [{"config": label, "se": se} for label, se in self.decomposition],
            "diagnostics": dict(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def render(self) -> str:
        lines = [
            f"Method              {self.method}",
            f"Mean AGBD           {self.summary()}",
            f"95% interval        {self.ci95[0]:.1f} to {self.ci95[1]:.1f} Mg/ha",
            f"Tracks / segments   {self.n_track} / {self.n_tot}",
            f"Design variance     {self.var_design:.4f}",
            f"Model variance      {self.var_model:.4f}",
        ]
        for key, value in self.diagnostics.items():
            lines.append(f"{key.upper():<20}{value:.2f} Mg/ha")
        if self.decomposition:
            lines.append("")
            lines.append(f"{'Configuration':<36}{'SE':>8}{'Change':>10}{'Share':>8}")
            total = self.decomposition[0][1]
            for (label, se), (_, delta) in zip(self.decomposition, self.contributions()):
                share = 100 * se / total if total > 0 else float("nan")
                lines.append(f"{label:<36}{se:>8.2f}{delta:>10.2f}{share:>7.1f}%")
        return "\n".join(lines) + "\n"


def hybrid_estimate(tracks, chain: CovChain | float | None, *, decomposition=None, diagnostics=None) -> EstimateReport:
    """Hybrid estimate from track aggregates and the prediction covariance.

    ``chain`` may also be the quadratic form ``1^T C_I2 1`` directly, or
    ``None`` for a design-only estimate.
    """
    tracks = list(tracks)
    mu = hybrid_mean(tracks)
    vd = design_variance(tracks)
    n_tot = int(sum(t.n_seg for t in tracks))
    if chain is None:
        quad = 0.0
    elif isinstance(chain, CovChain):
        if chain.i2_cov.n != n_tot:
            raise ValidationError(f"covariance chain covers {chain.i2_cov.n} segments, tracks have {n_tot}")
        quad = chain.i2_quadform
    else:
        quad = max(float(chain), 0.0)
    return EstimateReport(
        mu=mu,
        var_design=vd,
        var_model=model_variance(quad, n_tot),
        n_track=len(tracks),
        n_tot=n_tot,
        decomposition=list(decomposition or []),
        diagnostics=dict(diagnostics or {}),
    )


def decompose(tracks, allometry_result, proxy_fit, X_subcell, M, i2_fit, Y_target, **chain_kw):
    """Standard errors for the four nested configurations.

    Returns ``(report, chains)`` where ``report`` is the full estimate with
    its decomposition filled in and ``chains`` maps each label to its
    :class:`CovChain`.
    """
    tracks = list(tracks)
    ses, chains = [], {}
    for label, flags in DECOMPOSITION_CONFIGS:
        chain = build_chain(allometry_result, proxy_fit, X_subcell, M, i2_fit, Y_target, flags, **chain_kw)
        chains[label] = chain
        ses.append((label, hybrid_estimate(tracks, chain).se_total))
    report = hybrid_estimate(tracks, chains[DECOMPOSITION_CONFIGS[0][0]], decomposition=ses)
    return report, chains


def hmb_reference(ref_fit: QuadraticGNLS, X_pixels, c_delta) -> EstimateReport:
    """Model-based mean over wall-to-wall pixels and its variance."""
    if len(X_pixels) == 0:
        raise EmptyRaster("no pixels to predict")
    pred = ref_fit.predict(X_pixels)
    jac = ref_fit.mean_jacobian(X_pixels)
    g = jac.sum(axis=0)
    c_delta = np.asarray(c_delta, dtype=float)
    if c_delta.shape != (g.size, g.size):
        raise ValidationError(f"parameter covariance is {c_delta.shape}, model has {g.size} coefficients")
    n = pred.size
    var = max(float(g @ c_delta @ g), 0.0) / n**2
    return EstimateReport(
        mu=math.fsum(pred) / n, var_design=0.0, var_model=var, n_track=0, n_tot=n, method="hmb_reference"
    )


def rmsd_md(pred_a, pred_b) -> dict[str, float]:
    """Root mean square deviation and mean difference of ``a - b``."""
    a = np.asarray(pred_a, dtype=float).ravel()
    b = np.asarray(pred_b, dtype=float).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"prediction vectors have lengths {a.size} and {b.size}")
    if a.size == 0:
        raise EmptyInput("no predictions to compare")
    d = a - b
    return {"rmsd": math.sqrt(math.fsum(d * d) / d.size), "md": math.fsum(d) / d.size}
