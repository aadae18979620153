import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierlid.exceptions import ColumnTypeError, InputFileError, InvariantViolation, MissingColumn, OrphanTree
from hierlid.tables import (
    PLOTS,
    SEGMENTS,
    SUBCELLS,
    TREES,
    format_table,
    load_table,
    metric_matrix,
    read_table,
    validate_linkage,
    write_table,
)

TREES_CSV = "tree_id,plot_id,dbh_cm,height_m,species\nT1,P1,15,12,pine\n"


def test_single_tree_row():
    df = read_table(TREES_CSV, TREES)
    assert len(df) == 1
    assert df.loc[0, "dbh_cm"] == 15.0
    assert df.loc[0, "species"] == "pine"


def test_dbh_below_threshold_rejected():
    with pytest.raises(InvariantViolation) as err:
        read_table(TREES_CSV.replace(",15,", ",3,"), TREES)
    assert "row 2" in str(err.value)


def test_height_at_breast_height_rejected():
    with pytest.raises(InvariantViolation):
        read_table(TREES_CSV.replace(",12,", ",1.3,"), TREES)


def test_unknown_species_rejected():
    with pytest.raises(InvariantViolation):
        read_table(TREES_CSV.replace("pine", "oak"), TREES)


def test_missing_column():
    with pytest.raises(MissingColumn):
        read_table("tree_id,plot_id,dbh_cm,height_m\nT1,P1,15,12\n", TREES)


def test_bad_number_reports_line_and_column():
    with pytest.raises(ColumnTypeError) as err:
        read_table(TREES_CSV.replace(",15,", ",abc,"), TREES)
    assert "dbh_cm" in str(err.value)


def test_duplicate_segment_id_rejected():
    text = (
        "segment_id,track_id,n_photons,high_conf_fraction,forested\n"
        "s1,t,100,0.7,true\n"
        "s1,t,120,0.8,true\n"
    )
    with pytest.raises(InvariantViolation):
        read_table(text, SEGMENTS)


def test_extra_columns_kept_as_metrics():
    text = "segment_id,track_id,n_photons,high_conf_fraction,forested,p90\ns1,t,100,0.7,yes,12.5\n"
    df = read_table(text, SEGMENTS)
    assert df.loc[0, "p90"] == 12.5
    assert bool(df.loc[0, "forested"])


def test_subcells_need_six_per_segment():
    rows = "".join(f"s1_{j},s1,1.0\n" for j in range(5))
    with pytest.raises(InvariantViolation):
        read_table("subcell_id,segment_id,n\n" + rows, SUBCELLS)


def test_nonstandard_radius_warns_or_fails():
    text = "plot_id,area_ha,x,y\nP1,0.05,0,0\n"
    with pytest.warns(UserWarning):
        read_table(text, PLOTS)
    with pytest.raises(InvariantViolation):
        read_table(text, PLOTS, strict_radii=True)
    read_table("plot_id,area_ha,x,y\nP1,0.025446900494077322,0,0\n", PLOTS, strict_radii=True)


def test_load_missing_file(tmp_path):
    with pytest.raises(InputFileError):
        load_table(tmp_path / "nope.csv", "trees")


def test_linkage_report():
    trees = read_table(TREES_CSV + "T2,P1,20,15,spruce\n", TREES)
    plots = pd.DataFrame({"plot_id": ["P1", "P2"], "area_ha": [0.02, 0.02], "x": [0.0, 1.0], "y": [0.0, 0.0]})
    rep = validate_linkage(trees, plots)
    assert rep.ok and rep.orphans == []
    assert rep.empty_plots == ["P2"]
    assert rep.trees_per_plot == {"P1": 2, "P2": 0}


def test_orphan_tree():
    trees = read_table(TREES_CSV.replace("P1", "P9"), TREES)
    plots = pd.DataFrame({"plot_id": ["P1"], "area_ha": [0.02], "x": [0.0], "y": [0.0]})
    with pytest.raises(OrphanTree):
        validate_linkage(trees, plots)
    assert validate_linkage(trees, plots, strict=False).orphans == ["T1"]


def test_metric_matrix_missing():
    with pytest.raises(MissingColumn):
        metric_matrix(pd.DataFrame({"a": [1.0]}), ["a", "b"])


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, st.booleans(), st.integers(0, 10_000)), min_size=1, max_size=20))
def test_round_trip_is_byte_identical(rows):
    df = pd.DataFrame({
        "segment_id": [f"s{i}" for i in range(len(rows))],
        "track_id": "t",
        "n_photons": [r[2] for r in rows],
        "high_conf_fraction": 0.5,
        "forested": [r[1] for r in rows],
        "metric": [r[0] for r in rows],
    })
    text = format_table(df, SEGMENTS)
    again = format_table(read_table(text, SEGMENTS), SEGMENTS)
    assert again == text
    assert read_table(text, SEGMENTS)["metric"].tolist() == [r[0] for r in rows]


def test_write_then_load_preserves_order(tmp_path):
    df = read_table(TREES_CSV + "T0,P1,30.25,20.125,deciduous\n", TREES)
    write_table(df, tmp_path / "t.csv", "trees")
    back = load_table(tmp_path / "t.csv", "trees")
    assert back["tree_id"].tolist() == ["T1", "T0"]
    np.testing.assert_array_equal(back["dbh_cm"], df["dbh_cm"])
