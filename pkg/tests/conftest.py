"""Shared fixtures and the acceptance summary printed after the run."""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

_ACCEPTANCE: dict[int, dict] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            number, title = mark.args
            _ACCEPTANCE.setdefault(number, {"title": title, "outcomes": [], "details": []})


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None or call.when != "call":
        return
    entry = _ACCEPTANCE[mark.args[0]]
    entry["outcomes"].append(call.excinfo is None)
    entry["details"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        if not entry["outcomes"]:
            status = "NOT RUN"
        else:
            status = "PASS" if all(entry["outcomes"]) else "FAIL"
        detail = "; ".join(entry["details"])
        line = f"{status:<7} {number:>2}. {entry['title']}"
        tr.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def measured(record_property):
    """Attach a measured value to the acceptance summary line."""

    def record(text):
        record_property("measured", text)

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_trees(rng, plot_ids, per_plot=(3, 12), species=("pine", "spruce", "deciduous")):
    rows = []
    k = 0
    for pid in plot_ids:
        for _ in range(int(rng.integers(*per_plot))):
            d = float(rng.uniform(6, 40))
            h = float(np.clip(1.3 + 25 * (1 - np.exp(-0.06 * d)) + rng.normal(0, 1), 2.0, 40.0))
            rows.append({"tree_id": f"T{k:04d}", "plot_id": pid, "dbh_cm": d, "height_m": h, "species": species[int(rng.integers(len(species)))]})
            k += 1
    return pd.DataFrame(rows)


def make_plots(plot_ids, area_ha=0.0254, **metrics):
    n = len(plot_ids)
    df = pd.DataFrame({"plot_id": list(plot_ids), "area_ha": area_ha, "x": np.arange(n) * 100.0, "y": np.zeros(n)})
    for name, values in metrics.items():
        df[name] = values
    return df
