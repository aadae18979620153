import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierlid.exceptions import ConfigError, EmptyInput, EmptyTrack
from hierlid.segmenter import build_segments, compute_height_metrics, quality_filter


def photons(along, cls="canopy", height=10.0, conf=True, track="t1"):
    n = len(along)
    return pd.DataFrame({
        "track_id": track,
        "along_m": np.asarray(along, float),
        "height_m": np.broadcast_to(height, n).astype(float),
        "cls": np.broadcast_to(np.asarray(cls, dtype=object), n),
        "high_confidence": np.broadcast_to(conf, n),
    })


def test_constant_heights():
    m = compute_height_metrics(np.full(20, 10.0), np.ones(20, bool))
    assert m.mean == 10.0 and m.std == 0.0
    assert all(p == 10.0 for p in m.percentiles)
    assert m.qav == 100.0
    assert m.cover == 1.0


def test_cover_is_canopy_share():
    m = compute_height_metrics([0.0, 0.0, 0.0, 20.0], [False, False, False, True])
    assert m.cover == 0.25
    assert m.n_all == 4 and m.n_c == 1


def test_median_uses_linear_interpolation():
    h = np.arange(1, 101, dtype=float)
    m = compute_height_metrics(h, np.ones(100, bool))
    p50 = dict(m.as_dict())["p50"]
    s = np.sort(h)
    pos = 0.5 * (len(s) - 1)
    lo = int(np.floor(pos))
    assert p50 == 50.5 == s[lo] + (pos - lo) * (s[lo + 1] - s[lo])


def test_density_fraction_above_relative_height():
    h = np.array([0.5, 2.0, 5.0, 10.0])
    m = compute_height_metrics(h, h > 1.3)
    b50 = m.as_dict()["b50"]
    p99 = m.as_dict()["p99"]
    assert b50 == np.mean(h > 0.5 * p99)


def test_empty_heights():
    with pytest.raises(EmptyInput):
        compute_height_metrics([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_metrics_permutation_invariant_and_monotone(heights, rnd):
    h = np.array(heights)
    flags = h > 1.3
    perm = list(range(len(h)))
    rnd.shuffle(perm)
    a = compute_height_metrics(h, flags)
    b = compute_height_metrics(h[perm], flags[perm])
    np.testing.assert_allclose(a.percentiles, b.percentiles, rtol=0, atol=1e-12)
    assert a.densities == b.densities and a.cover == b.cover
    assert all(x <= y for x, y in zip(a.percentiles, a.percentiles[1:]))
    assert a.qav >= a.mean**2


def test_two_segments_from_180_m():
    along = np.linspace(0.0, 180.0, 600, endpoint=False) + 0.15
    segs, subs = build_segments(photons(along))
    assert len(segs) == 2
    assert len(subs) == 12
    assert segs["n_photons"].sum() == 600
    assert list(segs["segment_id"]) == ["t1_00000", "t1_00001"]


def test_exactly_90_m_is_one_segment():
    segs, subs = build_segments(photons([0.0, 45.0, 90.0]))
    assert len(segs) == 1
    assert subs["n_photons"].sum() == 3


def test_noise_only_track():
    with pytest.raises(EmptyTrack):
        build_segments(photons([0.0, 10.0], cls="noise"))
    segs, _ = build_segments(photons([0.0, 10.0], cls="noise"), skip_empty=True)
    assert segs.empty


def test_bad_window_ratio():
    with pytest.raises(ConfigError):
        build_segments(photons([0.0]), 90.0, 10.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1000, allow_nan=False), min_size=1, max_size=200),
       st.lists(st.sampled_from(["ground", "canopy", "top_of_canopy", "noise"]), min_size=200, max_size=200))
def test_counts_add_up(along, classes):
    cls = classes[: len(along)]
    df = photons(along, cls=np.array(cls, dtype=object))
    n_signal = sum(c != "noise" for c in cls)
    if n_signal == 0:
        return
    segs, subs = build_segments(df)
    assert segs["n_photons"].sum() == n_signal
    assert subs["n_photons"].sum() == n_signal


def _segments(n, conf, forested=True):
    return pd.DataFrame({
        "segment_id": [f"s{i}" for i in range(len(n))],
        "track_id": "t",
        "n_photons": n,
        "high_conf_fraction": conf,
        "forested": forested,
    })


def test_filter_drops_unforested():
    assert quality_filter(_segments([200], [0.9], forested=False)).empty


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 400), st.floats(0, 1)), min_size=1, max_size=30))
def test_filter_idempotent(rows):
    segs = _segments([r[0] for r in rows], [r[1] for r in rows])
    once = quality_filter(segs)
    pd.testing.assert_frame_equal(quality_filter(once), once)
    assert ((once["n_photons"] >= 100) & (once["high_conf_fraction"] >= 0.6)).all()
