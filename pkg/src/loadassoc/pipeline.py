"""
Stage functions and the end-to-end pipeline.

Stages hand off through files under one artifact root::

    data/        dataset dump (channels/*.csv, weather.csv, manifest.json)
    events/      events.csv, exclusion.json, streams.json
    assoc/       q.csv, q_counters.csv
    cluster/     clusters.json
    dcc/         dcc.csv, features.json
    models/      <target>.npz, history.json
    forecasts/   forecast.csv (target, date, slot, value)
    evaluate/    report.json

Each stage directory also gets ``stage_manifest.json`` recording the config
hash, input hashes and stage version; a stage whose manifest still matches
is skipped unless forced.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .association import AssociationConfig, association_matrix, read_matrix, write_matrix
from .clustering import (
    ClusterAssignment,
    aggregate_cluster_loads,
    fixed_k,
    read_assignment,
    resolve_attach,
    select_k,
    write_assignment,
)
from .data import (
    DataError,
    HouseholdDataset,
    IngestSchema,
    TimeGrid,
    align_to_days,
    dump_dataset,
    file_digest,
    ingest_csv,
    load_dataset,
)
from .evaluation import compare_methods, split_day
from .events import ExclusionReport, exclude_low_power, extract_all, read_events, write_events
from .features import DEFAULT_LAGS, FeatureTable, build_feature_table, daily_matrix, select_features
from .forecaster import (
    LARGE,
    SMALL,
    ForecastFrame,
    ForecastModel,
    ModelConfig,
    TrainConfig,
    fit_forecaster,
    predict_day_ahead,
)
from .synthetic import SynthSpec, generate

log = logging.getLogger(__name__)

STAGES = ("ingest", "events", "associate", "cluster", "dcc", "train", "forecast", "evaluate")
STAGE_DIRS = {
    "ingest": "data", "events": "events", "associate": "assoc", "cluster": "cluster",
    "dcc": "dcc", "train": "models", "forecast": "forecasts", "evaluate": "evaluate",
}
STAGE_VERSION = 1
MANIFEST = "stage_manifest.json"
OVERALL = "total"


class ConfigError(ValueError):
    pass


class MissingArtifact(DataError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"stage {stage!r} needs missing artifact {path}")
        self.path = Path(path)
        self.stage = stage


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ------------------------------------------------------------------ config

DEFAULTS: dict[str, Any] = {
    "data": {"paths": [], "schema": None, "synth": None, "align_days": True},
    "events": {"on_threshold": 15.0, "min_duration": 2, "exclude_below": 50.0},
    "association": {"target_window": 1800, "candidate_window": 86400},
    "clustering": {"k": "auto", "seed": 7, "attach_excluded": "smallest"},
    "features": {"lags": list(DEFAULT_LAGS), "threshold": 0.2},
    "split": {"train_months": 23},
    "model": {"cluster": asdict(SMALL), "overall": asdict(LARGE)},
    "train": asdict(TrainConfig()),
}

# config sections each stage depends on (directly or through its inputs)
STAGE_KEYS = {
    "ingest": ["data"],
    "events": ["events"],
    "associate": ["association"],
    "cluster": ["clustering"],
    "dcc": ["features", "split"],
    "train": ["model", "train", "split"],
    "forecast": ["split"],
    "evaluate": [],
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("synth",):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


class PipelineConfig:
    """Validated pipeline settings; ``raw`` is the fully defaulted dict dumped into manifests."""

    def __init__(self, overrides: dict | None = None, base_dir: str | Path = ".", require_data: bool = True):
        self.raw = _merge(DEFAULTS, overrides or {})
        self.base_dir = Path(base_dir)
        self._validate(require_data)

    @classmethod
    def load(cls, path: str | Path, require_data: bool = True) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls(data, path.parent, require_data)

    def _validate(self, require_data: bool):
        r = self.raw
        try:
            d = r["data"]
            if require_data and d["synth"] is None and not (d["paths"] and d["schema"]):
                raise ConfigError("data needs either 'synth' or both 'paths' and 'schema'")
            if d["synth"] is not None:
                SynthSpec.from_dict(d["synth"])
            e = r["events"]
            if e["on_threshold"] <= 0 or e["exclude_below"] <= 0 or int(e["min_duration"]) < 1:
                raise ConfigError("events thresholds must be positive and min_duration >= 1")
            self.association_config()
            k = r["clustering"]["k"]
            if k != "auto" and (not isinstance(k, int) or k < 2):
                raise ConfigError("clustering.k must be 'auto' or an integer >= 2")
            att = r["clustering"]["attach_excluded"]
            if att != "smallest" and not (isinstance(att, int) and att >= 0):
                raise ConfigError("clustering.attach_excluded must be 'smallest' or a cluster index")
            if not r["features"]["lags"] or any(int(L) < 1 for L in r["features"]["lags"]):
                raise ConfigError("features.lags must be positive day counts")
            if r["features"]["threshold"] < 0:
                raise ConfigError("features.threshold must be nonnegative")
            if int(r["split"]["train_months"]) < 1:
                raise ConfigError("split.train_months must be >= 1")
            self.model_config("cluster")
            self.model_config("overall")
            tc = self.train_config()
            if tc.learning_rate <= 0 or tc.batch_size < 1 or tc.max_epochs < 1 or not 0 <= tc.val_fraction < 1:
                raise ConfigError("invalid train settings")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def association_config(self) -> AssociationConfig:
        a = self.raw["association"]
        return AssociationConfig(int(a["target_window"]), int(a["candidate_window"]))

    def model_config(self, which: str) -> ModelConfig:
        return ModelConfig(**self.raw["model"][which])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def section_hash(self, stage: str) -> str:
        sub = {k: self.raw[k] for k in STAGE_KEYS[stage]}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


# ------------------------------------------------------------------ stages

def _require(path: Path, stage: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(path, stage)
    return Path(path)


def run_ingest(out_dir: str | Path, *, paths: Sequence[str | Path] = (), schema: str | Path | None = None,
               synth: dict | SynthSpec | None = None, align: bool = True) -> HouseholdDataset:
    out = Path(out_dir)
    if synth is not None:
        spec = synth if isinstance(synth, SynthSpec) else SynthSpec.from_dict(synth)
        ds, labels, _ = generate(spec)
        out.mkdir(parents=True, exist_ok=True)
        planted = {a.id: int(lab) for a, lab in zip(spec.appliances, labels)}
        (out / "planted.json").write_text(json.dumps(planted, indent=2, sort_keys=True) + "\n")
    else:
        if schema is None or not paths:
            raise ConfigError("ingest needs data paths and a schema")
        for p in paths:
            _require(Path(p), "ingest")
        ds = ingest_csv(list(paths), IngestSchema.load(_require(Path(schema), "ingest")))
        if align:
            ds = align_to_days(ds)
    dump_dataset(ds, out)
    return ds


def run_events(in_dir: str | Path, out_dir: str | Path, on_threshold: float = 15.0, min_duration: int = 2,
               exclude_below: float = 50.0) -> ExclusionReport:
    _require(Path(in_dir) / "manifest.json", "events")
    ds = load_dataset(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = extract_all(ds, on_threshold, min_duration)
    kept, report = exclude_low_power(ds, exclude_below)
    write_events(streams, out / "events.csv")
    (out / "exclusion.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    meta = {"grid": ds.grid.to_dict(), "retained": kept.ids, "days": ds.days,
            "on_threshold": on_threshold, "min_duration": min_duration}
    (out / "streams.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return report


def run_associate(events_dir: str | Path, out_path: str | Path, target_window: int = 1800,
                  candidate_window: int = 86400):
    ev = Path(events_dir)
    meta = json.loads(_require(ev / "streams.json", "associate").read_text())
    grid = TimeGrid(**meta["grid"])
    streams = read_events(_require(ev / "events.csv", "associate"), grid, meta["retained"])
    am = association_matrix(streams, AssociationConfig(target_window, candidate_window), meta["days"])
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_matrix(am, out_path)
    return am


def run_cluster(q_path: str | Path, out_path: str | Path, k: int | str = "auto", seed: int = 7,
                attach: int | str = "smallest", exclusion_path: str | Path | None = None) -> ClusterAssignment:
    am = read_matrix(_require(Path(q_path), "cluster"))
    if len(am) < 3 and k == "auto":
        raise DataError("need at least 3 retained appliances for automatic cluster selection")
    assignment = select_k(am, seed) if k == "auto" else fixed_k(am, int(k), seed)
    excluded: list[str] = []
    if exclusion_path is not None:
        excluded = ExclusionReport.from_dict(json.loads(_require(Path(exclusion_path), "cluster").read_text())).excluded
    target = resolve_attach(assignment, attach)
    members = assignment.members()
    members[target] += excluded
    extra = {"excluded": excluded, "attach_to": target, "members": {f"cluster-{g}": m for g, m in enumerate(members)}}
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_assignment(assignment, out_path, extra)
    return assignment


def _cluster_inputs(clusters_path: Path, stage: str) -> tuple[ClusterAssignment, ExclusionReport, int]:
    assignment, raw = read_assignment(_require(clusters_path, stage))
    report = ExclusionReport(list(raw.get("excluded", [])), 0.0, len(assignment.ids), {})
    return assignment, report, int(raw.get("attach_to", 0))


def run_dcc(data_dir: str | Path, clusters_path: str | Path, out_path: str | Path,
            lags: Sequence[int] = DEFAULT_LAGS, threshold: float = 0.2, train_months: int = 23) -> FeatureTable:
    _require(Path(data_dir) / "manifest.json", "dcc")
    ds = load_dataset(data_dir)
    assignment, report, attach = _cluster_inputs(Path(clusters_path), "dcc")
    loads = aggregate_cluster_loads(ds, assignment, report, attach)
    table = build_feature_table(ds, loads, lags, train_days=split_day(ds, train_months))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write(out)
    selected = select_features(table, threshold)
    out.with_name("features.json").write_text(
        json.dumps({"threshold": threshold, "selected": selected}, indent=2, sort_keys=True) + "\n")
    return table


def _targets(ds: HouseholdDataset, clusters_path: Path, stage: str) -> dict[str, np.ndarray]:
    assignment, report, attach = _cluster_inputs(clusters_path, stage)
    loads = aggregate_cluster_loads(ds, assignment, report, attach)
    targets = {OVERALL: ds.submetered_sum()}
    targets.update({s.id: s.power for s in loads})
    return targets


def run_train(data_dir: str | Path, clusters_path: str | Path, features_path: str | Path, out_dir: str | Path,
              cluster_model: ModelConfig = SMALL, overall_model: ModelConfig = LARGE,
              train_cfg: TrainConfig = TrainConfig(), train_months: int = 23) -> dict[str, dict]:
    _require(Path(data_dir) / "manifest.json", "train")
    ds = load_dataset(data_dir)
    feats_file = Path(features_path)
    if feats_file.suffix == ".csv":
        feats_file = feats_file.with_name("features.json")
    selected = json.loads(_require(feats_file, "train").read_text())["selected"]
    targets = _targets(ds, Path(clusters_path), "train")
    cut = split_day(ds, train_months)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, power in targets.items():
        cfg = overall_model if name == OVERALL else cluster_model
        frame = ForecastFrame.from_dataset(ds, power, cfg.output_slots)
        model, hist = fit_forecaster(frame, selected[name], cfg, train_cfg, cut, name=name)
        model.save(out / f"{name}.npz", extra={"train": asdict(train_cfg), "train_end_day": cut})
        summary[name] = {"features": selected[name], "parameters": model.n_parameters(),
                         "best_epoch": hist.best_epoch, "train_loss": hist.train_loss, "val_loss": hist.val_loss}
    (out / "history.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _load_models(models_dir: Path, stage: str) -> dict[str, ForecastModel]:
    _require(models_dir / "history.json", stage)
    names = sorted(json.loads((models_dir / "history.json").read_text()))
    return {n: ForecastModel.load(_require(models_dir / f"{n}.npz", stage))[0] for n in names}


def run_forecast(models_dir: str | Path, data_dir: str | Path, clusters_path: str | Path, out_path: str | Path,
                 dates: Sequence[str] | None = None, train_months: int = 23) -> list[tuple]:
    """Day-ahead forecasts from every model, for ``dates`` or (default) every test day."""
    _require(Path(data_dir) / "manifest.json", "forecast")
    ds = load_dataset(data_dir)
    models = _load_models(Path(models_dir), "forecast")
    targets = _targets(ds, Path(clusters_path), "forecast")
    if dates:
        days = [ds.day_of_date(d) for d in dates]
        for d, date in zip(days, dates):
            if not 0 <= d < ds.days:
                raise DataError(f"date {date} outside the data")
    else:
        days = list(range(split_day(ds, train_months), ds.days))
    rows = []
    for name in sorted(models):
        if name not in targets:
            raise DataError(f"model {name!r} has no matching target in the cluster assignment")
        model = models[name]
        frame = ForecastFrame.from_dataset(ds, targets[name], model.config.output_slots)
        for d in days:
            pred = predict_day_ahead(model, frame, d)
            date = ds.date_of_day(d).isoformat()
            rows += [(name, date, s, repr(float(v))) for s, v in enumerate(pred)]
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "date", "slot", "value"])
        w.writerows(rows)
    return rows


def read_forecasts(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """target -> date -> per-slot forecast."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["target"], {}).setdefault(r["date"], []).append((int(r["slot"]), float(r["value"])))
    return {t: {d: np.array([v for _, v in sorted(vals)]) for d, vals in by_date.items()} for t, by_date in out.items()}


def run_evaluate(forecasts_path: str | Path, data_dir: str | Path, clusters_path: str | Path,
                 out_path: str | Path) -> dict:
    fc = read_forecasts(_require(Path(forecasts_path), "evaluate"))
    _require(Path(data_dir) / "manifest.json", "evaluate")
    ds = load_dataset(data_dir)
    assignment, raw = read_assignment(_require(Path(clusters_path), "evaluate"))
    targets = _targets(ds, Path(clusters_path), "evaluate")
    if OVERALL not in fc:
        raise DataError("forecasts lack the overall model")
    dates = sorted(fc[OVERALL])
    days = [ds.day_of_date(d) for d in dates]
    slots = len(next(iter(fc[OVERALL].values())))
    cluster_names = [t for t in targets if t != OVERALL]
    missing = [t for t in cluster_names if t not in fc]
    if missing:
        raise DataError(f"forecasts lack cluster models {missing}")

    def daily(power):
        return daily_matrix(power, ds, slots)[days]

    truth = daily(targets[OVERALL])
    report = compare_methods(
        {t: np.stack([fc[t][d] for d in dates]) for t in cluster_names},
        np.stack([fc[OVERALL][d] for d in dates]),
        truth,
        cluster_truths={t: daily(targets[t]) for t in cluster_names},
        members=raw.get("members"),
        appliance_ids=ds.ids,
        period={"first": dates[0], "last": dates[-1], "days": len(dates), "slots_per_day": slots},
    )
    result = report.to_dict()
    result["clusters"] = raw.get("members", {})
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------- pipeline

def _paths(root: Path) -> dict[str, Path]:
    d = {s: root / STAGE_DIRS[s] for s in STAGES}
    return {
        **{f"{s}_dir": p for s, p in d.items()},
        "q": d["associate"] / "q.csv",
        "clusters": d["cluster"] / "clusters.json",
        "dcc": d["dcc"] / "dcc.csv",
        "forecast": d["forecast"] / "forecast.csv",
        "report": d["evaluate"] / "report.json",
    }


def _stage_inputs(stage: str, p: dict[str, Path]) -> list[Path]:
    return {
        "ingest": [],
        "events": [p["ingest_dir"]],
        "associate": [p["events_dir"] / "events.csv", p["events_dir"] / "streams.json"],
        "cluster": [p["q"], p["events_dir"] / "exclusion.json"],
        "dcc": [p["ingest_dir"], p["clusters"]],
        "train": [p["ingest_dir"], p["clusters"], p["dcc_dir"] / "features.json"],
        "forecast": [p["train_dir"], p["ingest_dir"], p["clusters"]],
        "evaluate": [p["forecast"], p["ingest_dir"], p["clusters"]],
    }[stage]


def _hash_inputs(paths: list[Path], stage: str) -> dict[str, str]:
    out = {}
    for path in paths:
        _require(path, stage)
        out[str(path.name if path.is_file() else path.name + "/")] = file_digest(path)
    return out


def run_pipeline(config: PipelineConfig, root: str | Path, start: str | None = None, stop: str | None = None,
                 force: bool = False) -> dict[str, str]:
    """Run stages ``start..stop`` in order; returns stage -> "ran" | "skipped"."""
    start = "ingest" if start in (None, "synth") else start
    stop = stop or "evaluate"
    for s in (start, stop):
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    i0, i1 = STAGES.index(start), STAGES.index(stop)
    if i0 > i1:
        raise ConfigError(f"--from {start} comes after --to {stop}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    p = _paths(root)
    raw = config.raw
    months = int(raw["split"]["train_months"])
    status = {}
    for stage in STAGES[i0:i1 + 1]:
        inputs = _hash_inputs(_stage_inputs(stage, p), stage)
        stage_dir = p[f"{stage}_dir"]
        manifest = {
            "stage": stage,
            "stage_version": STAGE_VERSION,
            "package_version": __version__,
            "config_hash": config.section_hash(stage),
            "input_hashes": inputs,
        }
        mpath = stage_dir / MANIFEST
        if not force and mpath.exists():
            old = json.loads(mpath.read_text())
            if {k: old.get(k) for k in manifest} == manifest:
                log.info("stage %s up to date; skipping", stage)
                status[stage] = "skipped"
                continue
        log.info("running stage %s", stage)
        try:
            _run_stage(stage, config, p, months)
        except (ConfigError, DataError):
            raise
        except Exception as exc:
            raise StageFailure(stage, exc) from exc
        stage_dir.mkdir(parents=True, exist_ok=True)
        manifest["config"] = raw
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        status[stage] = "ran"
    return status


def _run_stage(stage: str, config: PipelineConfig, p: dict[str, Path], months: int) -> None:
    raw = config.raw
    if stage == "ingest":
        d = raw["data"]
        if d["synth"] is not None:
            run_ingest(p["ingest_dir"], synth=d["synth"])
        else:
            run_ingest(p["ingest_dir"], paths=[config.resolve(x) for x in d["paths"]],
                       schema=config.resolve(d["schema"]), align=d["align_days"])
    elif stage == "events":
        e = raw["events"]
        run_events(p["ingest_dir"], p["events_dir"], e["on_threshold"], int(e["min_duration"]), e["exclude_below"])
    elif stage == "associate":
        a = config.association_config()
        run_associate(p["events_dir"], p["q"], a.target_window, a.candidate_window)
    elif stage == "cluster":
        c = raw["clustering"]
        run_cluster(p["q"], p["clusters"], c["k"], int(c["seed"]), c["attach_excluded"],
                    p["events_dir"] / "exclusion.json")
    elif stage == "dcc":
        f = raw["features"]
        run_dcc(p["ingest_dir"], p["clusters"], p["dcc"], [int(x) for x in f["lags"]], float(f["threshold"]), months)
    elif stage == "train":
        run_train(p["ingest_dir"], p["clusters"], p["dcc_dir"] / "features.json", p["train_dir"],
                  config.model_config("cluster"), config.model_config("overall"), config.train_config(), months)
    elif stage == "forecast":
        run_forecast(p["train_dir"], p["ingest_dir"], p["clusters"], p["forecast"], train_months=months)
    elif stage == "evaluate":
        run_evaluate(p["forecast"], p["ingest_dir"], p["clusters"], p["report"])
