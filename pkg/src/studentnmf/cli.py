"""Command-line entry point: sessionize, featurize, fit, select-k, report, synth, pipeline.

Every option may also come from a JSON ``--config`` file, either as a
top-level key or inside a section named after the subcommand; explicit
flags win over the section, which wins over top-level keys.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .analysis import cluster_report, membership_distribution, membership_timeseries, write_report
from .errors import StudentNMFError, ValidationError
from .featurizer import (
    FeatureSpec, build_matrix, load_subject_map, parse_feature_ids, read_matrix, write_matrix,
)
from .sessionizer import (
    DEFAULT_GAP, DroppedSessionsWarning, PeriodCalendar, activity_counts, assign_periods,
    build_sessions, parse_events, read_sessions, write_events, write_sessions,
)
from .synthgen import DEFAULT_SUBJECT_MAP, SyntheticSpec, plant_factors, synth_event_log, synth_matrix
from .wnmf import FactorModel, FitOptions, fit, load_model, normalize_clusters, save_model, select_k

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

DEFAULTS: dict[str, Any] = {
    "gap": DEFAULT_GAP,
    "epoch": "2015-01-08",
    "periods": 112,
    "period_length": 7,
    "features": "1-10",
    "timezone": "Europe/Copenhagen",
    "seed": 0,
    "restarts": 5,
    "tol": 1e-6,
    "max_iters": 500,
    "bound": ["f10=1.0"],
    "kmax": 10,
    "tau": 0.01,
    "log": False,
    "raw_bloom": False,
    "threads": os.cpu_count() or 1,
    "students": 500,
    "k": None,
    "noise": 0.0,
    "missing_rate": 0.0,
    "vacation": [],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def derive_seed(seed: int, stage: str) -> int:
    """Stable per-stage sub-seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def parse_bounds(items: Sequence[str]) -> dict[int, float]:
    out = {}
    for item in items:
        try:
            key, value = item.split("=", 1)
            out[int(key.strip().lstrip("f"))] = float(value)
        except ValueError:
            raise ValidationError(f"bound must look like f10=1.0, got {item!r}") from None
    return out


def parse_vacations(items: Sequence[str]) -> dict[int, float]:
    out = {}
    for item in items:
        try:
            period, mult = item.split(":", 1)
            out[int(period)] = float(mult)
        except ValueError:
            raise ValidationError(f"vacation must look like 5:0.2, got {item!r}") from None
    return out


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: str | Path, command: str, options: dict, inputs: Sequence[str], outputs: Sequence[str]) -> None:
    manifest = {
        "tool": "studentnmf",
        "version": __version__,
        "command": command,
        "seed": options.get("seed"),
        "options": {k: v for k, v in sorted(options.items()) if k not in ("config", "command", "func")},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _require(opts: dict, *names: str) -> None:
    missing = [n for n in names if opts.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _fit_options(opts: dict) -> FitOptions:
    return FitOptions(
        max_iters=int(opts["max_iters"]),
        rel_tol=float(opts["tol"]),
        restarts=int(opts["restarts"]),
        bounds=parse_bounds(opts["bound"]),
        threads=int(opts["threads"]),
    )


def _calendar(opts: dict) -> PeriodCalendar:
    try:
        epoch = date.fromisoformat(str(opts["epoch"]))
    except ValueError:
        raise ValidationError(f"epoch must be an ISO date, got {opts['epoch']!r}") from None
    return PeriodCalendar(epoch=epoch, period_count=int(opts["periods"]),
                          period_length=int(opts["period_length"]), timezone=opts["timezone"])


def _subject_map(opts: dict) -> dict[str, str]:
    if isinstance(opts.get("subject_map"), dict):
        return opts["subject_map"]
    if opts.get("subjects"):
        with open(opts["subjects"]) as fh:
            return load_subject_map(fh)
    raise UsageError("missing required option: --subjects")


def _assign(sessions, calendar):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DroppedSessionsWarning)
        entries = assign_periods(sessions, calendar)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return entries


def _activity_from_labels(labels, period_count: int) -> list[tuple[int, int]]:
    active: dict[int, set] = {}
    for sid, p in labels:
        active.setdefault(int(p), set()).add(sid)
    return [(p, len(active.get(p, ()))) for p in range(period_count)]


# --- commands ----------------------------------------------------------------

def cmd_sessionize(opts: dict) -> list[str]:
    _require(opts, "events", "out")
    with open(opts["events"], "rb") as fh:
        events = parse_events(fh, raw_bloom=bool(opts["raw_bloom"]))
    sessions = build_sessions(events, float(opts["gap"]))
    with open(opts["out"], "w", newline="") as fh:
        write_sessions(sessions, fh)
    write_manifest(f"{opts['out']}.manifest.json", "sessionize", opts, [opts["events"]], [opts["out"]])
    return [opts["out"]]


def cmd_featurize(opts: dict) -> list[str]:
    _require(opts, "sessions", "out")
    spec = FeatureSpec(feature_ids=parse_feature_ids(str(opts["features"])), subject_map=_subject_map(opts),
                       timezone=opts["timezone"])
    with open(opts["sessions"], newline="") as fh:
        sessions = read_sessions(fh)
    entries = _assign(sessions, _calendar(opts))
    outputs = list(write_matrix(build_matrix(entries, spec), opts["out"]))
    inputs = [opts["sessions"]] + ([opts["subjects"]] if opts.get("subjects") else [])
    write_manifest(f"{opts['out']}.manifest.json", "featurize", opts, inputs, outputs)
    return outputs


def _load_matrix(opts: dict):
    _require(opts, "matrix")
    return read_matrix(opts["matrix"])


def cmd_fit(opts: dict) -> list[str]:
    _require(opts, "matrix", "out", "k")
    fm = _load_matrix(opts)
    model = fit(fm.X, fm.W, int(opts["k"]), _fit_options(opts), seed=derive_seed(int(opts["seed"]), "fit"),
                row_labels=fm.row_labels, col_labels=fm.col_labels)
    model, _ = normalize_clusters(model)
    with open(opts["out"], "w") as fh:
        save_model(model, fh)
    inputs = [f"{opts['matrix']}.matrix.csv", f"{opts['matrix']}.mask.csv"]
    write_manifest(f"{opts['out']}.manifest.json", "fit", opts, inputs, [opts["out"]])
    return [opts["out"]]


def _write_selection(path: str, k_star: int, models: list[FactorModel]) -> None:
    with open(path, "w") as fh:
        fh.write("k,error,selected\n")
        for m in models:
            fh.write(f"{m.k},{format(m.final_objective, '.17g')},{int(m.k == k_star)}\n")


def cmd_select_k(opts: dict) -> list[str]:
    _require(opts, "matrix", "out")
    fm = _load_matrix(opts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        k_star, models = select_k(fm.X, fm.W, int(opts["kmax"]), float(opts["tau"]), _fit_options(opts),
                                  seed=derive_seed(int(opts["seed"]), "fit"),
                                  row_labels=fm.row_labels, col_labels=fm.col_labels)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    model, _ = normalize_clusters(models[k_star - 1])
    with open(opts["out"], "w") as fh:
        save_model(model, fh)
    sel = f"{opts['out']}.selection.csv"
    _write_selection(sel, k_star, models)
    inputs = [f"{opts['matrix']}.matrix.csv", f"{opts['matrix']}.mask.csv"]
    write_manifest(f"{opts['out']}.manifest.json", "select-k", opts, inputs, [opts["out"], sel])
    print(f"k* = {k_star}")
    return [opts["out"], sel]


def _reports(model: FactorModel, kind: str, prefix: str, period_count: int | None, log: bool) -> list[str]:
    if model.row_labels is not None and period_count is None:
        period_count = max(int(p) for _, p in model.row_labels) + 1
    meta = {"k": model.k, "seed": model.seed}
    if kind == "clusters":
        normalized, _ = normalize_clusters(model)
        return write_report(kind, cluster_report(normalized, scale="log10" if log else "linear"), prefix, meta)
    if kind == "distribution":
        return write_report(kind, membership_distribution(model), prefix, meta)
    if kind == "timeseries":
        return write_report(kind, membership_timeseries(model, period_count=period_count), prefix, meta)
    if kind == "activity":
        if model.row_labels is None:
            raise ValidationError("model has no row labels; activity counts need (student, period) labels")
        return write_report(kind, _activity_from_labels(model.row_labels, period_count), prefix, meta)
    raise UsageError(f"unknown report {kind!r}")


def cmd_report(opts: dict) -> list[str]:
    _require(opts, "model", "out")
    with open(opts["model"]) as fh:
        model = load_model(fh)
    periods = opts.get("report_periods")
    outputs = _reports(model, opts["report"], opts["out"], int(periods) if periods else None, bool(opts["log"]))
    write_manifest(f"{opts['out']}.{opts['report']}.manifest.json", f"report {opts['report']}", opts,
                   [opts["model"]], outputs)
    return outputs


def _synth_spec(opts: dict) -> SyntheticSpec:
    return SyntheticSpec(
        n_students=int(opts["students"]),
        n_periods=int(opts.get("synth_periods") or 20),
        k_true=int(opts["k"] or 3),
        noise_sigma=float(opts["noise"]),
        missing_rate=float(opts["missing_rate"]),
        vacation_periods=parse_vacations(opts["vacation"]),
        seed=derive_seed(int(opts["seed"]), "synth"),
    )


def cmd_synth(opts: dict) -> list[str]:
    _require(opts, "out")
    spec = _synth_spec(opts)
    prefix = opts["out"]
    if opts["what"] == "matrix":
        planted = plant_factors(spec)
        outputs = list(write_matrix(synth_matrix(planted, spec), prefix))
        truth = f"{prefix}.planted.json"
        with open(truth, "w") as fh:
            json.dump({"U": planted.U.tolist(), "V": planted.V.tolist(),
                       "row_labels": [list(r) for r in planted.row_labels]}, fh)
        outputs.append(truth)
    else:
        log = synth_event_log(spec)
        events_path, subjects_path, truth = f"{prefix}.events.csv", f"{prefix}.subjects.json", f"{prefix}.planted.json"
        with open(events_path, "w", newline="") as fh:
            write_events(log.events, fh)
        with open(subjects_path, "w") as fh:
            json.dump(DEFAULT_SUBJECT_MAP, fh, indent=1, sort_keys=True)
        with open(truth, "w") as fh:
            json.dump({"U": log.planted.U.tolist(), "V": log.planted.V.tolist(),
                       "row_labels": [list(r) for r in log.planted.row_labels],
                       "feature_ids": list(log.feature_spec.feature_ids),
                       "templates": [t.name for t in log.templates],
                       "epoch": log.calendar.epoch.isoformat()}, fh)
        outputs = [events_path, subjects_path, truth]
    write_manifest(f"{prefix}.manifest.json", f"synth {opts['what']}", {**opts, "synth_seed": spec.seed}, [], outputs)
    return outputs


@dataclass
class PipelineConfig:
    events: str
    out_dir: str
    subjects: str | None = None
    subject_map: dict | None = None
    epoch: str = DEFAULTS["epoch"]
    periods: int = DEFAULTS["periods"]
    period_length: int = 7
    timezone: str = DEFAULTS["timezone"]
    gap: float = DEFAULT_GAP
    features: str = DEFAULTS["features"]
    k: int | None = None
    kmax: int = 10
    tau: float = 0.01
    seed: int = 0
    restarts: int = 5
    tol: float = 1e-6
    max_iters: int = 500
    bound: list = field(default_factory=lambda: list(DEFAULTS["bound"]))
    threads: int = DEFAULTS["threads"]
    log: bool = False
    raw_bloom: bool = False

    @classmethod
    def from_options(cls, opts: dict) -> "PipelineConfig":
        _require(opts, "events", "out_dir")
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in opts.items() if k in names and v is not None})

    def validate(self) -> None:
        if not Path(self.events).is_file():
            raise FileNotFoundError(f"events file not found: {self.events}")
        if self.gap <= 0:
            raise ValidationError("gap must be positive")
        if self.k is not None and int(self.k) < 1:
            raise ValidationError("k must be >= 1")


def cmd_pipeline(opts: dict) -> list[str]:
    cfg = PipelineConfig.from_options(opts)
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    o = asdict(cfg)

    with open(cfg.events, "rb") as fh:
        events = parse_events(fh, raw_bloom=cfg.raw_bloom)
    sessions = build_sessions(events, float(cfg.gap))
    sessions_path = str(out / "sessions.csv")
    with open(sessions_path, "w", newline="") as fh:
        write_sessions(sessions, fh)

    calendar = _calendar(o)
    entries = _assign(sessions, calendar)
    spec = FeatureSpec(feature_ids=parse_feature_ids(str(cfg.features)), subject_map=_subject_map(o),
                       timezone=cfg.timezone)
    fm = build_matrix(entries, spec)
    outputs = [sessions_path, *write_matrix(fm, str(out / "features"))]

    fit_opts = _fit_options(o)
    fit_seed = derive_seed(int(cfg.seed), "fit")
    if cfg.k:
        model = fit(fm.X, fm.W, int(cfg.k), fit_opts, seed=fit_seed, row_labels=fm.row_labels, col_labels=fm.col_labels)
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            k_star, models = select_k(fm.X, fm.W, int(cfg.kmax), float(cfg.tau), fit_opts, seed=fit_seed,
                                      row_labels=fm.row_labels, col_labels=fm.col_labels)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        model = models[k_star - 1]
        sel = str(out / "selection.csv")
        _write_selection(sel, k_star, models)
        outputs.append(sel)
    model, _ = normalize_clusters(model)
    model_path = str(out / "model.json")
    with open(model_path, "w") as fh:
        save_model(model, fh)
    outputs.append(model_path)

    prefix = str(out / "report")
    for kind in ("clusters", "distribution", "timeseries"):
        outputs += _reports(model, kind, prefix, calendar.period_count, cfg.log)
    outputs += write_report("activity", activity_counts(entries, calendar.period_count), prefix,
                            {"k": model.k, "seed": model.seed})
    inputs = [cfg.events] + ([cfg.subjects] if cfg.subjects else [])
    write_manifest(out / "manifest.json", "pipeline", o, inputs, outputs)
    print(f"k* = {model.k}")
    return outputs


# --- argument parsing -----------------------------------------------------------

def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--matrix", help="matrix prefix (<prefix>.matrix.csv / <prefix>.mask.csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--bound", action="append", help="upper bound for missing values, e.g. f10=1.0")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="studentnmf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--threads", type=int, help="worker threads for restarts (default: all cores)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("sessionize", parents=[common], help="merge raw events into sessions")
    p.add_argument("--events")
    p.add_argument("--gap", type=float)
    p.add_argument("--raw-bloom", action="store_true", default=None, help="bloom column holds taxonomy levels 1-6")
    p.add_argument("--out")

    p = sub.add_parser("featurize", parents=[common], help="build the feature matrix and mask")
    p.add_argument("--sessions")
    p.add_argument("--epoch")
    p.add_argument("--periods", type=int)
    p.add_argument("--period-length", type=int)
    p.add_argument("--features")
    p.add_argument("--subjects")
    p.add_argument("--timezone")
    p.add_argument("--out")

    p = sub.add_parser("fit", parents=[common], help="fit WNMF with a fixed k")
    _add_fit_flags(p)
    p.add_argument("--k", type=int)

    p = sub.add_parser("select-k", parents=[common], help="fit k = 1..kmax and select k")
    _add_fit_flags(p)
    p.add_argument("--kmax", type=int)
    p.add_argument("--tau", type=float)

    p = sub.add_parser("report", parents=[common], help="write report CSVs for a model")
    p.add_argument("report", choices=["clusters", "distribution", "timeseries", "activity"])
    p.add_argument("--model")
    p.add_argument("--periods", dest="report_periods", type=int)
    p.add_argument("--log", action="store_true", default=None, help="log10 cluster matrix")
    p.add_argument("--out")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("what", choices=["matrix", "events"])
    p.add_argument("--students", type=int)
    p.add_argument("--periods", dest="synth_periods", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--vacation", action="append", help="period:multiplier, e.g. 5:0.2")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("pipeline", parents=[common], help="sessionize, featurize, fit and report in one go")
    p.add_argument("--events")
    p.add_argument("--out-dir")
    p.add_argument("--subjects")
    p.add_argument("--epoch")
    p.add_argument("--periods", type=int)
    p.add_argument("--features")
    p.add_argument("--gap", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--kmax", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--bound", action="append")
    p.add_argument("--log", action="store_true", default=None)
    return parser


COMMANDS = {
    "sessionize": cmd_sessionize,
    "featurize": cmd_featurize,
    "fit": cmd_fit,
    "select-k": cmd_select_k,
    "report": cmd_report,
    "synth": cmd_synth,
    "pipeline": cmd_pipeline,
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults < config top level < config section < explicit flags."""
    config: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ValidationError("config file must hold a JSON object")
    flags = {k: v for k, v in vars(args).items() if v is not None}
    section = config.get(args.command, {})
    top = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict) or k == "subject_map"}
    merged = {**DEFAULTS, **top, **{k.replace("-", "_"): v for k, v in section.items()}, **flags}
    if args.command == "synth" and "periods" in {**top, **section} and "synth_periods" not in flags:
        merged["synth_periods"] = {**top, **section}["periods"]
    for key in ("bound", "vacation"):
        if isinstance(merged.get(key), str):
            merged[key] = [merged[key]]
    return merged


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            raise UsageError("studentnmf: error: a subcommand is required")
        opts = resolve_options(args)
        COMMANDS[args.command](opts)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (StudentNMFError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
