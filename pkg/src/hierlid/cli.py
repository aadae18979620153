"""Command line front end.

``hierlid <subcommand> --config run.json`` runs the pipeline stages up to
and including the named one, writing every intermediate artifact to the
configured output directory. Paths in the configuration are relative to
the configuration file.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import sklearn

from . import __version__
from .allometry import default_spec, load_allometry
from .estimators import EstimateReport, hmb_reference
from .exceptions import ConfigError, HierlidError, InputFileError, StageError
from .pipeline import Hierarchy, LevelSettings, PipelineSettings, estimate_target, fit_hierarchy, reference_cov
from .segmenter import build_segments, quality_filter
from .simulate import SyntheticWorldConfig, generate_world, replicate_rng, run_sampling_mc, settings_for_world
from .tables import SCHEMAS, load_table, validate_linkage, write_table
from .varsel import AnnealConfig

log = logging.getLogger("hierlid")

MODES = ("fit_train", "predict_target", "estimate", "reference_hmb", "simulate", "mc")
STAGES = ("ingest", "select", "fit", "predict", "estimate", "reference")
# Inputs each stage needs, cumulative through the stage order.
STAGE_INPUTS = {
    "ingest": ("trees", "plots", "subcells", "train_segments"),
    "select": (),
    "fit": (),
    "predict": ("segments",),
    "estimate": (),
    "reference": ("pixels",),
}
MODE_STAGE = {"fit_train": "fit", "predict_target": "predict", "estimate": "estimate", "reference_hmb": "reference"}
TABLE_SCHEMA = {
    "trees": "trees",
    "plots": "plots",
    "subcells": "subcells",
    "train_segments": "segments",
    "segments": "segments",
    "pixels": "pixels",
    "photons": "photons",
}


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputFileError(f"cannot write {path}: {exc}") from exc


# -- configuration ---------------------------------------------------------


@dataclass
class RunConfig:
    path: Path
    raw: dict
    base: Path
    output_dir: Path
    mode: str
    rng_seed: int
    inputs: dict[str, Path] = field(default_factory=dict)

    def input(self, name: str) -> Path:
        if name not in self.inputs:
            raise ConfigError(f"configuration has no input {name!r}")
        return self.inputs[name]

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def level(self, name: str, default_variance: str) -> LevelSettings:
        d = dict(self.raw.get(name, {}))
        select = d.pop("select", None)
        cfg = None
        if select:
            select = dict(select)
            select.setdefault("rng_seed", self.rng_seed)
            cfg = AnnealConfig(**select)
        predictors = d.get("predictors")
        if not predictors and cfg is None:
            raise ConfigError(f"{name}: give 'predictors' or a 'select' block")
        return LevelSettings(
            predictors=list(predictors or []),
            variance=d.get("variance", default_variance),
            transforms=d.get("transforms") or None,
            select=cfg,
            candidates=d.get("candidates"),
        )

    def settings(self) -> PipelineSettings:
        flt = self.raw.get("filter", {})
        return PipelineSettings(
            proxy=self.level("proxy", "constant_plus_power"),
            satellite=self.level("satellite", "homoscedastic"),
            min_photons=int(flt.get("min_photons", 100)),
            min_conf=float(flt.get("min_conf", 0.6)),
            dense_cap=int(self.raw.get("dense_cap", 20_000)),
        )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputFileError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    base = path.parent.resolve()
    mode = raw.get("mode", "estimate")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    inputs = {k: (base / v) for k, v in (raw.get("inputs") or {}).items() if v}
    out = base / raw.get("output_dir", "out")
    return RunConfig(path, raw, base, out, mode, int(raw.get("rng_seed", 0)), inputs)


# -- stages ----------------------------------------------------------------


class Run:
    """Staged execution of one configuration."""

    def __init__(self, config: RunConfig):
        self.cfg = config
        self.out = config.output_dir
        self.tables: dict[str, pd.DataFrame] = {}
        self.hierarchy: Hierarchy | None = None
        self.written: list[str] = []

    def _stage(self, name, fn, *args):
        log.info("stage %s", name)
        try:
            return fn(*args)
        except StageError:
            raise
        except HierlidError as exc:
            raise StageError(name, exc) from exc
        except OSError as exc:
            raise StageError(name, InputFileError(str(exc))) from exc

    def _emit(self, name: str, text: str) -> None:
        _write(self.out / name, text)
        if name not in self.written:
            self.written.append(name)

    def _emit_table(self, name: str, df: pd.DataFrame, schema=None) -> None:
        write_table(df, self.out / name, schema)
        if name not in self.written:
            self.written.append(name)

    def preflight(self, last: str) -> None:
        """Check that every input needed up to ``last`` exists."""
        needed = []
        for stage in STAGES[: STAGES.index(last) + 1]:
            needed += [(stage, n) for n in STAGE_INPUTS[stage]]
        for stage, name in needed:
            if name not in self.cfg.inputs:
                raise StageError(stage, ConfigError(f"configuration lacks input {name!r}"))
            if not self.cfg.inputs[name].is_file():
                raise StageError(stage, InputFileError(f"missing input {name}: {self.cfg.inputs[name]}"))
        allo = self.cfg.inputs.get("allometry")
        if allo is not None and not allo.is_file():
            raise StageError("ingest", InputFileError(f"missing input allometry: {allo}"))
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StageError("ingest", InputFileError(f"cannot create {self.out}: {exc}")) from exc

    def run(self, last: str) -> None:
        self.preflight(last)
        order = STAGES[: STAGES.index(last) + 1]
        self._stage("ingest", self.ingest, "predict" in order, "reference" in order)
        self._stage("fit", self.fit)
        if "predict" in order:
            self._stage("predict", self.predict)
        if "estimate" in order:
            self._stage("estimate", self.estimate)
        if "reference" in order:
            self._stage("reference", self.reference)
        self.manifest()

    def ingest(self, with_target: bool, with_pixels: bool) -> None:
        names = list(STAGE_INPUTS["ingest"])
        if with_target:
            names.append("segments")
        if with_pixels:
            names.append("pixels")
        strict = bool(self.cfg.raw.get("strict_radii", False))
        for name in names:
            self.tables[name] = load_table(self.cfg.input(name), TABLE_SCHEMA[name], strict_radii=strict)
        link = validate_linkage(self.tables["trees"], self.tables["plots"])
        self._emit(
            "ingest.json",
            dumps(
                {
                    "rows": {k: int(len(v)) for k, v in self.tables.items()},
                    "empty_plots": link.empty_plots,
                }
            ),
        )

    def fit(self) -> None:
        allo = self.cfg.inputs.get("allometry")
        spec = load_allometry(allo) if allo is not None else default_spec()
        t = self.tables
        settings = self.cfg.settings()
        h = fit_hierarchy(spec, t["trees"], t["plots"], t["subcells"], t["train_segments"], settings)
        self.hierarchy = h
        plots = h.plots.to_frame()
        self._emit_table("allometry_plots.csv", plots)
        if h.selection:
            self._emit("selection.json", dumps(h.selection))
        self._emit("proxy_model.json", dumps(h.proxy_fit.to_dict()))
        self._emit("i2_model.json", dumps(h.i2_fit.to_dict()))

    def predict(self) -> None:
        self.result = estimate_target(self.hierarchy, self.tables["segments"], self.cfg.settings())
        self._emit_table("target_predictions.csv", self.result.predictions)

    def estimate(self) -> None:
        res = self.result
        chain_report = {label: c.summary() for label, c in res.chains.items()}
        chain_report["allometry"] = {
            "plot_agbd_mean": float(np.mean(self.hierarchy.plots.agbd)),
            "c_plot_trace": float(np.trace(self.hierarchy.plots.cov)),
            "c_plot_sum": float(np.sum(self.hierarchy.plots.cov)),
        }
        self._emit("chain_report.json", dumps(chain_report))
        self._emit("report.json", dumps(res.report.to_dict()))
        self._emit("report.txt", res.report.render())

    def reference(self) -> None:
        h = self.hierarchy
        pixels = self.tables["pixels"]
        X = pixels[h.proxy_predictors].to_numpy(dtype=float)
        rep = hmb_reference(h.proxy_fit, pd.DataFrame(X, columns=h.proxy_predictors), reference_cov(h))
        self._emit("reference.json", dumps(rep.to_dict()))

    def manifest(self) -> None:
        self._emit(
            "manifest.json",
            dumps(
                {
                    "config_sha256": self.cfg.hash,
                    "config": self.cfg.raw,
                    "mode": self.cfg.mode,
                    "rng_seed": self.cfg.rng_seed,
                    "outputs": sorted(self.written + ["manifest.json"]),
                    "versions": versions(),
                }
            ),
        )


def versions() -> dict[str, str]:
    return {
        "hierlid": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
    }


# -- standalone commands ---------------------------------------------------


def cmd_segment(cfg: RunConfig, args=None) -> None:
    """Photons to ``segments.csv``/``subcells.csv``, plus the segments that
    pass the quality filter in ``segments_filtered.csv``."""
    seg_cfg = dict(cfg.raw.get("segment", {}))
    flt = dict(cfg.raw.get("filter", {}))
    if args is not None:
        for key in ("segment_length", "subcell_length"):
            if getattr(args, key, None) is not None:
                seg_cfg[key] = getattr(args, key)
        for key in ("min_photons", "min_conf"):
            if getattr(args, key, None) is not None:
                flt[key] = getattr(args, key)
    path = cfg.input("photons")
    if not path.is_file():
        raise StageError("segment", InputFileError(f"missing input photons: {path}"))
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        photons = load_table(path, "photons")
        segments, subcells = build_segments(
            photons,
            float(seg_cfg.get("segment_length", 90.0)),
            float(seg_cfg.get("subcell_length", 15.0)),
            skip_empty=bool(seg_cfg.get("skip_empty", False)),
        )
        kept = quality_filter(segments, int(flt.get("min_photons", 100)), float(flt.get("min_conf", 0.6)))
        write_table(segments, cfg.output_dir / "segments.csv", "segments")
        write_table(subcells, cfg.output_dir / "subcells.csv", "subcells")
        write_table(kept, cfg.output_dir / "segments_filtered.csv", "segments")
    except HierlidError as exc:
        raise StageError("segment", exc) from exc
    except OSError as exc:
        raise StageError("segment", InputFileError(str(exc))) from exc


def _world(cfg: RunConfig):
    world_cfg = dict(cfg.raw.get("world", {}))
    world_cfg.setdefault("seed", cfg.rng_seed)
    return generate_world(SyntheticWorldConfig.from_dict(world_cfg))


def cmd_simulate(cfg: RunConfig) -> None:
    """Write a synthetic world as input tables plus a runnable config."""
    try:
        world = _world(cfg)
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        tables = world.tables()
        tables["population_segments"] = tables.pop("segments")
        # The target sample: n_tracks columns drawn with replacement.
        cols = replicate_rng(world.config.seed, 0).integers(0, world.config.n_cols, world.config.n_tracks)
        tables["segments"] = world.column_segments(cols)
        for name, df in tables.items():
            write_table(df, out / f"{name}.csv", SCHEMAS[TABLE_SCHEMA.get(name, "segments")])
        _write(out / "world.json", dumps({"config": world.config.to_dict(), "true_mean": world.true_mean}))
        _write(out / "allometry.json", dumps(world.allometry.to_dict()))
        s = settings_for_world(world.config)
        run_cfg = {
            "mode": "estimate",
            "rng_seed": world.config.seed,
            "output_dir": "run",
            "inputs": {name: f"{name}.csv" for name in world.tables()} | {"allometry": "allometry.json"},
            "world_true_mean": world.true_mean,
            "proxy": {"predictors": s.proxy.predictors, "variance": s.proxy.variance},
            "satellite": {"predictors": s.satellite.predictors, "variance": s.satellite.variance},
        }
        _write(out / "pipeline.json", dumps(run_cfg))
    except HierlidError as exc:
        raise StageError("simulate", exc) from exc


def cmd_mc(cfg: RunConfig) -> None:
    mc_cfg = cfg.raw.get("mc", {})
    try:
        world = _world(cfg)
        res = run_sampling_mc(world, int(mc_cfg.get("replicates", 200)), mc_cfg.get("resample", "tracks_only"))
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        _write(cfg.output_dir / "mc_result.json", res.to_json())
    except HierlidError as exc:
        raise StageError("mc", exc) from exc


def cmd_report(cfg: RunConfig) -> str:
    path = cfg.output_dir / "report.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StageError("report", InputFileError(f"cannot read {path}: {exc}")) from exc
    rep = EstimateReport(
        mu=data["mu"],
        var_design=data["var_design"],
        var_model=data["var_model"],
        n_track=data["n_track"],
        n_tot=data["n_tot"],
        method=data.get("method", "hybrid"),
        decomposition=[(d["config"], d["se"]) for d in data.get("decomposition", [])],
        diagnostics=data.get("diagnostics", {}),
    )
    text = rep.render()
    _write(cfg.output_dir / "report.txt", text)
    return text


def run_mode(cfg: RunConfig) -> None:
    """Run whatever the configuration's ``mode`` asks for."""
    if cfg.mode == "simulate":
        cmd_simulate(cfg)
    elif cfg.mode == "mc":
        cmd_mc(cfg)
    else:
        Run(cfg).run(MODE_STAGE[cfg.mode])


SUBCOMMANDS = ("ingest", "segment", "select", "fit", "predict", "estimate", "reference", "simulate", "mc", "report", "run")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierlid", description="Hierarchical hybrid estimation of mean AGBD.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "segment":
            sp.add_argument("--min-photons", type=int)
            sp.add_argument("--min-conf", type=float)
            sp.add_argument("--segment-length", type=float)
            sp.add_argument("--subcell-length", type=float)
        if name == "select":
            sp.add_argument("--subset-size", type=int)
            sp.add_argument("--seed", type=int)
            sp.add_argument("--cooling-rate", type=float)
            sp.add_argument("--iterations-per-temperature", type=int)
            sp.add_argument("--initial-temperature", type=float)
    return p


def _apply_select_flags(cfg: RunConfig, args) -> None:
    flags = {
        "subset_size": args.subset_size,
        "rng_seed": args.seed,
        "cooling_rate": args.cooling_rate,
        "iterations_per_temperature": args.iterations_per_temperature,
        "initial_temperature": args.initial_temperature,
    }
    flags = {k: v for k, v in flags.items() if v is not None}
    for level in ("proxy", "satellite"):
        block = cfg.raw.setdefault(level, {})
        select = dict(block.get("select") or {})
        select.update(flags)
        block["select"] = select


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cmd = args.command
        if cmd == "select":
            _apply_select_flags(cfg, args)
            Run(cfg).run("fit")
        elif cmd == "ingest":
            run = Run(cfg)
            run.preflight("ingest")
            run._stage("ingest", run.ingest, False, False)
        elif cmd in ("fit", "predict", "estimate", "reference"):
            Run(cfg).run(cmd)
        elif cmd == "segment":
            cmd_segment(cfg, args)
        elif cmd == "simulate":
            cmd_simulate(cfg)
        elif cmd == "mc":
            cmd_mc(cfg)
        elif cmd == "report":
            sys.stdout.write(cmd_report(cfg))
        else:
            run_mode(cfg)
    except HierlidError as exc:
        print(f"hierlid: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hierlid: error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
