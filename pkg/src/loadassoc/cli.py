"""Command-line entry point: ``loadassoc <stage> ...`` or ``loadassoc run --config cfg.json``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import DataError
from .forecaster import LARGE, SMALL, ModelConfig, TrainConfig
from .pipeline import (
    STAGES,
    ConfigError,
    MissingArtifact,
    PipelineConfig,
    StageFailure,
    run_associate,
    run_cluster,
    run_dcc,
    run_evaluate,
    run_events,
    run_forecast,
    run_ingest,
    run_pipeline,
    run_train,
)
from .synthetic import SynthSpec

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4
ROOT_ENV = "LOADASSOC_ROOT"


def _k(value: str):
    return value if value == "auto" else int(value)


def _attach(value: str):
    return value if value == "smallest" else int(value)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loadassoc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="CSV files -> canonical dataset dump")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-align", action="store_true", help="keep the raw grid instead of whole local days")

    p = sub.add_parser("synth", help="generate a synthetic household dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("events", help="extract start-up events and exclude low-power channels")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--on-threshold", type=float, default=15.0)
    p.add_argument("--min-duration", type=int, default=2)
    p.add_argument("--exclude-below", type=float, default=50.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("associate", help="behaviour association matrix")
    p.add_argument("--events", required=True)
    p.add_argument("--te", type=int, default=1800)
    p.add_argument("--ts", type=int, default=86400)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster", help="spectral clustering of the association matrix")
    p.add_argument("--q", required=True)
    p.add_argument("--k", type=_k, default="auto")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--attach-excluded", type=_attach, default="smallest")
    p.add_argument("--exclusion", help="exclusion.json from the events stage")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dcc", help="distance correlation feature table")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--lags", type=int, nargs="+", default=[7, 2, 1])
    p.add_argument("--train-months", type=int, default=23)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model per cluster plus the overall model")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--features", required=True, help="dcc.csv or features.json from the dcc stage")
    p.add_argument("--config", help="pipeline config JSON (model/train/split sections are used)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("forecast", help="day-ahead forecasts from trained models")
    p.add_argument("--models", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--date", nargs="*", help="YYYY-MM-DD; default: every test day")
    p.add_argument("--train-months", type=int, default=23)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="cluster-sum vs. overall comparison report")
    p.add_argument("--forecasts", required=True, help="forecast.csv or the directory holding it")
    p.add_argument("--truth", required=True, help="dataset directory")
    p.add_argument("--clusters", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run the whole pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--root", default=None, help=f"artifact root (default ${ROOT_ENV} or ./artifacts)")
    p.add_argument("--from", dest="start", choices=STAGES + ("synth",))
    p.add_argument("--to", dest="stop", choices=STAGES)
    p.add_argument("--force", action="store_true")
    return ap


def _train_settings(path: str | None) -> tuple[ModelConfig, ModelConfig, TrainConfig, int]:
    if path is None:
        return SMALL, LARGE, TrainConfig(), 23
    cfg = PipelineConfig.load(path, require_data=False)
    return (cfg.model_config("cluster"), cfg.model_config("overall"), cfg.train_config(),
            int(cfg.raw["split"]["train_months"]))


def dispatch(args: argparse.Namespace) -> dict | None:
    cmd = args.command
    if cmd == "ingest":
        ds = run_ingest(args.out, paths=args.data, schema=args.schema, align=not args.no_align)
        return {"grid": ds.grid.to_dict(), "channels": ds.ids, "gaps": len(ds.gap_report)}
    if cmd == "synth":
        try:
            spec = SynthSpec.load(args.spec)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad synth spec {args.spec}: {exc}") from exc
        ds = run_ingest(args.out, synth=spec)
        return {"grid": ds.grid.to_dict(), "channels": ds.ids}
    if cmd == "events":
        return run_events(args.inp, args.out, args.on_threshold, args.min_duration, args.exclude_below).to_dict()
    if cmd == "associate":
        am = run_associate(args.events, args.out, args.te, args.ts)
        return {"ids": am.ids, "days": am.n_days}
    if cmd == "cluster":
        a = run_cluster(args.q, args.out, args.k, args.seed, args.attach_excluded, args.exclusion)
        return {"k": a.k, "labels": dict(zip(a.ids, a.labels.tolist()))}
    if cmd == "dcc":
        t = run_dcc(args.inp, args.clusters, args.out, args.lags, args.threshold, args.train_months)
        return {"targets": t.columns}
    if cmd == "train":
        small, large, tc, months = _train_settings(args.config)
        summary = run_train(args.inp, args.clusters, args.features, args.out, small, large, tc, months)
        return {k: {"parameters": v["parameters"], "best_epoch": v["best_epoch"]} for k, v in summary.items()}
    if cmd == "forecast":
        rows = run_forecast(args.models, args.inp, args.clusters, args.out, args.date, args.train_months)
        return {"rows": len(rows)}
    if cmd == "evaluate":
        fc = Path(args.forecasts)
        if fc.is_dir():
            fc = fc / "forecast.csv"
        rep = run_evaluate(fc, args.truth, args.clusters, args.out)
        return {"metrics": rep["metrics"], "deltas_percent": rep["deltas_percent"]}
    if cmd == "run":
        cfg = PipelineConfig.load(args.config)
        root = args.root or os.environ.get(ROOT_ENV) or "artifacts"
        return run_pipeline(cfg, root, args.start, args.stop, args.force)
    raise ConfigError(f"unknown command {cmd}")


def _fail(code: int, kind: str, exc: BaseException, root: str | None = None) -> int:
    err = {"status": "error", "exit_code": code, "kind": kind, "message": str(exc)}
    if isinstance(exc, MissingArtifact):
        err["missing_artifact"] = str(exc.path)
        err["stage"] = exc.stage
    if isinstance(exc, StageFailure):
        err["stage"] = exc.stage
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    if root:
        try:
            Path(root).mkdir(parents=True, exist_ok=True)
            (Path(root) / "error.json").write_text(json.dumps(err, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = None
    if args.command == "run":
        root = args.root or os.environ.get(ROOT_ENV) or "artifacts"
    try:
        result = dispatch(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, root)
    except (DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc, root)
    except StageFailure as exc:
        return _fail(EXIT_STAGE, "stage", exc, root)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_STAGE, "stage", exc, root)
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
