"""Along-track segmentation of classified photons and height metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .exceptions import ConfigError, EmptyInput, EmptyTrack, LengthMismatch
from .tables import SUBCELLS_PER_SEGMENT

HEIGHT_PERCENTILES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95, 99)
DENSITY_PERCENTILES = (5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95)
CANOPY_CLASSES = ("canopy", "top_of_canopy")
COVER_THRESHOLD_M = 1.3


@dataclass(frozen=True)
class MetricSet:
    n_all: int
    n_c: int
    mean: float
    std: float
    max: float
    qav: float
    percentiles: tuple[float, ...]
    densities: tuple[float, ...]
    cover: float

    def as_dict(self) -> dict[str, float]:
        out = asdict(self)
        out.pop("percentiles")
        out.pop("densities")
        out.update({f"p{k}": v for k, v in zip(HEIGHT_PERCENTILES, self.percentiles)})
        out.update({f"b{k}": v for k, v in zip(DENSITY_PERCENTILES, self.densities)})
        return out


def metric_names() -> list[str]:
    return (
        ["n_all", "n_c", "mean", "std", "max", "qav"]
        + [f"p{k}" for k in HEIGHT_PERCENTILES]
        + [f"b{k}" for k in DENSITY_PERCENTILES]
        + ["cover"]
    )


def compute_height_metrics(heights, canopy_flags=None, cover_threshold: float = COVER_THRESHOLD_M) -> MetricSet:
    """Height and density metrics for one set of normalized heights.

    Height statistics use the canopy-flagged heights only; the photon
    counts, density percentiles and cover use all heights. When
    ``canopy_flags`` is omitted (e.g. airborne point heights), points above
    ``cover_threshold`` count as canopy.

    Density percentile ``b_k`` is the fraction of all points above
    ``max(k/100 * p99, cover_threshold)``. Percentiles interpolate linearly
    between closest ranks.
    """
    h = np.asarray(heights, dtype=float).ravel()
    if h.size == 0:
        raise EmptyInput("no heights to compute metrics from")
    if canopy_flags is None:
        canopy = h > cover_threshold
    else:
        canopy = np.asarray(canopy_flags, dtype=bool).ravel()
        if canopy.shape != h.shape:
            raise LengthMismatch("canopy_flags must match heights in length")

    hc = h[canopy]
    n_all, n_c = int(h.size), int(hc.size)
    if n_c:
        pct = np.percentile(hc, HEIGHT_PERCENTILES)
        # Force exact monotonicity; interpolation can wobble in the last ulp.
        pct = np.maximum.accumulate(pct)
        mean, std, hmax = float(hc.mean()), float(hc.std()), float(hc.max())
        qav = float(np.mean(hc * hc))
        qav = max(qav, mean * mean)
        p99 = float(pct[-1])
    else:
        pct = np.zeros(len(HEIGHT_PERCENTILES))
        mean = std = hmax = qav = p99 = 0.0

    dens = tuple(
        float(np.mean(h > max(k / 100.0 * p99, cover_threshold))) for k in DENSITY_PERCENTILES
    )
    return MetricSet(
        n_all=n_all,
        n_c=n_c,
        mean=mean,
        std=std,
        max=hmax,
        qav=qav,
        percentiles=tuple(float(v) for v in pct),
        densities=dens,
        cover=n_c / n_all,
    )


def _window(offset: np.ndarray, length: float) -> np.ndarray:
    # Windows are (k*L, (k+1)*L]; the first one also owns its left edge.
    k = np.ceil(offset / length).astype(np.int64) - 1
    return np.maximum(k, 0)


def build_segments(
    photons: pd.DataFrame,
    segment_length: float = 90.0,
    subcell_length: float = 15.0,
    *,
    skip_empty: bool = False,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Split each track into fixed along-track segments and subcells.

    Windows are aligned to the first photon of each track. Noise photons are
    dropped before anything else. Returns ``(segments, subcells)`` tables in
    the ``segments.csv`` / ``subcells.csv`` layouts, with photon metrics as
    the segment predictor columns and the subcell photon count as the only
    subcell column.
    """
    n_sub = segment_length / subcell_length
    if abs(n_sub - round(n_sub)) > 1e-9 or round(n_sub) != SUBCELLS_PER_SEGMENT:
        raise ConfigError(
            f"segment_length/subcell_length must equal {SUBCELLS_PER_SEGMENT}, got {n_sub:g}"
        )

    seg_rows, sub_rows = [], []
    for track_id, grp in photons.groupby("track_id", sort=False):
        kept = grp[grp["cls"].to_numpy() != "noise"]
        if kept.empty:
            if skip_empty:
                continue
            raise EmptyTrack(f"track {track_id!r} has no photons after discarding noise")
        kept = kept.sort_values("along_m", kind="stable")
        along = kept["along_m"].to_numpy(dtype=float)
        height = kept["height_m"].to_numpy(dtype=float)
        canopy = kept["cls"].isin(CANOPY_CLASSES).to_numpy()
        conf = kept["high_confidence"].to_numpy(dtype=bool)

        offset = along - along[0]
        seg_idx = _window(offset, segment_length)
        sub_idx = np.minimum(_window(offset - seg_idx * segment_length, subcell_length), SUBCELLS_PER_SEGMENT - 1)

        for k in np.unique(seg_idx):
            sel = seg_idx == k
            segment_id = f"{track_id}_{int(k):05d}"
            metrics = compute_height_metrics(height[sel], canopy[sel])
            seg_rows.append(
                {
                    "segment_id": segment_id,
                    "track_id": str(track_id),
                    "n_photons": int(sel.sum()),
                    "high_conf_fraction": float(conf[sel].mean()),
                    "forested": True,
                    **metrics.as_dict(),
                }
            )
            counts = np.bincount(sub_idx[sel], minlength=SUBCELLS_PER_SEGMENT)
            for j in range(SUBCELLS_PER_SEGMENT):
                sub_rows.append(
                    {"subcell_id": f"{segment_id}_{j}", "segment_id": segment_id, "n_photons": float(counts[j])}
                )

    segments = pd.DataFrame(seg_rows)
    subcells = pd.DataFrame(sub_rows)
    for name in ("n_all", "n_c"):
        if name in segments:
            segments[name] = segments[name].astype(float)
    return segments, subcells


def quality_filter(segments: pd.DataFrame, min_photons: int = 100, min_conf: float = 0.6) -> pd.DataFrame:
    """Keep segments with enough photons, enough high-confidence photons and
    forest cover. Bounds are inclusive."""
    keep = (
        (segments["n_photons"].to_numpy() >= min_photons)
        & (segments["high_conf_fraction"].to_numpy() >= min_conf)
        & segments["forested"].to_numpy(dtype=bool)
    )
    return segments.loc[keep].reset_index(drop=True)

