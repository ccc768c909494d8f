"""Command-line interface: generate data, train, predict, evaluate, early-sweep.

Every failure exits nonzero with a single ``ERR:<CODE>: message`` line on
stderr. Outputs are deterministic for a fixed config and seed; wall-clock
timings and other run metadata go to separate ``*.meta.json`` files so the
main reports and metric CSVs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from fedrisk.course_data import (
    ClientDataset,
    GradeRecord,
    IngestError,
    ingest_events,
    read_grades_csv,
    read_schedule_csv,
    truncate_events,
    write_events_csv,
    write_grades_csv,
    write_schedule_csv,
)
from fedrisk.features import (
    FeatureSpec,
    external_feature_hash,
    read_features_csv,
    write_features_csv,
)
from fedrisk.federation import run_training
from fedrisk.mlp import LoadedModel, load_model, save_model
from fedrisk.pipeline import (
    build_client_dataset,
    course_span_for,
    early_prediction_sweep,
    evaluate_dataset,
    label_at_risk_from_scores,
    predict_risk_scores,
    rank_dataset,
)
from fedrisk.ranking import METRIC_COLUMNS, MetricsReport, mean_metrics, pr_curve
from fedrisk.runconfig import (
    ConfigError,
    client_entries_from,
    differential_flags_from,
    feature_spec_from,
    federation_config_from,
    load_config,
    log_spec_from,
    mlp_config_from,
    modes_from,
    runs_from,
    synth_spec_from,
    threshold_rank_from,
)
from fedrisk.synth import generate, generate_event_cohort

OUTPUT_DIR_ENV = "FEDRISK_OUTPUT_DIR"

METRICS_CSV_HEADER = ("course", "method", "run") + METRIC_COLUMNS
SWEEP_CSV_HEADER = ("k", "method") + METRIC_COLUMNS


class CliError(Exception):
    """A user-facing failure with a machine-parseable code and exit status."""

    def __init__(self, code: str, message: str, exit_code: int = 2):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _git_blob_sha1(data: bytes) -> str:
    header = f"blob {len(data)}\0".encode("ascii")
    return hashlib.sha1(header + data).hexdigest()


def _hash_file(path: Path) -> str:
    return _git_blob_sha1(path.read_bytes())


def _require_file(path_text: str | Path, what: str) -> Path:
    path = Path(path_text)
    if not path.exists():
        raise CliError("DATA", f"{what} file not found: {path}")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _output_dir(out: str | None) -> Path:
    directory = Path(out or os.environ.get(OUTPUT_DIR_ENV, "."))
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _parse_bool(text: str, flag: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise CliError("USAGE", f"{flag} expects true or false, got {text!r}")


def _diff_tag(use_differential: bool) -> str:
    return "diff" if use_differential else "nodiff"


# ---------------------------------------------------------------- generate


def _cmd_generate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    spec = synth_spec_from(config)
    log_spec = log_spec_from(config)
    out = _output_dir(args.out)
    held_out = int(config["data"]["synthetic"].get("held_out", 0))
    if not 0 <= held_out < spec.n_clients:
        raise CliError("CONFIG", f"held_out must be in 0..{spec.n_clients - 1}, got {held_out}")

    manifest: dict = {"clients": [], "test": []}
    if log_spec is None:
        clients = generate_clients(spec)
        manifest["feature_mode"] = "features"
        manifest["feature_dim"] = spec.feature_dim
        for position, client in enumerate(clients):
            entry = _write_feature_client(client, out)
            bucket = "test" if position >= spec.n_clients - held_out else "clients"
            manifest[bucket].append(entry)
    else:
        courses = generate_event_cohort(spec, log_spec)
        manifest["feature_mode"] = "logs"
        for position, course in enumerate(courses):
            entry = _write_log_client(course, out)
            bucket = "test" if position >= spec.n_clients - held_out else "clients"
            manifest[bucket].append(entry)
    manifest_path = out / "data_manifest.json"
    _write_json(manifest_path, manifest)
    print(f"wrote {len(manifest['clients'])} training and {len(manifest['test'])} test courses to {out}")
    return 0


def _write_feature_client(dataset: ClientDataset, out: Path) -> dict:
    features_name = f"{dataset.client_id}_features.csv"
    grades_name = f"{dataset.client_id}_grades.csv"
    write_features_csv(
        {student: dataset.features[i] for i, student in enumerate(dataset.students)},
        out / features_name,
    )
    _write_scored_grade_letters(dataset, out / grades_name)
    return {"course": dataset.client_id, "features": features_name, "grades": grades_name}


def _write_scored_grade_letters(dataset: ClientDataset, path: Path) -> None:
    # Scored grades are per-client cumulative fractions; ranking them recovers
    # the letter ordinals, which is what the grades CSV stores.
    distinct = sorted(set(dataset.scored_grades))
    if len(distinct) > 5:
        raise CliError("INTERNAL", "more than five distinct grade scores in a synthetic client", exit_code=1)
    to_ordinal = {score: m for m, score in enumerate(distinct, start=1)}
    # Map the lowest observed score to the lowest possible letter consistent
    # with cumulative scoring: ordinals are dense from the bottom by construction.
    records = [
        GradeRecord(student, to_ordinal[score])
        for student, score in zip(dataset.students, dataset.scored_grades)
    ]
    write_grades_csv(records, path)


def _write_log_client(course, out: Path) -> dict:
    events_name = f"{course.course_id}_events.csv"
    schedule_name = f"{course.course_id}_schedule.csv"
    grades_name = f"{course.course_id}_grades.csv"
    write_events_csv(course.events, out / events_name)
    write_schedule_csv(course.schedule, out / schedule_name)
    write_grades_csv(course.grades, out / grades_name)
    return {
        "course": course.course_id,
        "events": events_name,
        "schedule": schedule_name,
        "grades": grades_name,
    }


# ---------------------------------------------------------------- train


def _dataset_from_entry(entry: dict, spec: FeatureSpec) -> tuple[ClientDataset, list[Path]]:
    grades_path = _require_file(entry["grades"], "grades")
    grades = read_grades_csv(grades_path)
    if "features" in entry:
        features_path = _require_file(entry["features"], "features")
        vectors = read_features_csv(features_path)
        missing = [record.student_id for record in grades if record.student_id not in vectors]
        if missing:
            raise CliError("DATA", f"{features_path}: no feature rows for graded students {missing[:5]}")
        from fedrisk.course_data import GradeScoring

        scoring = GradeScoring.from_records(grades)
        dataset = ClientDataset(
            client_id=entry["course"],
            students=[record.student_id for record in grades],
            features=np.stack([vectors[record.student_id] for record in grades]),
            scored_grades=np.array([scoring.score_of(record.grade) for record in grades]),
            lecture_count=1,
        )
        return dataset, [grades_path, features_path]
    events_path = _require_file(entry["events"], "events")
    schedule_path = _require_file(entry["schedule"], "schedule")
    ingest = ingest_events(events_path, vocab=spec.vocab)
    schedule = read_schedule_csv(schedule_path)
    events = truncate_events(ingest.records, schedule, len(schedule))
    if not events:
        raise CliError("DATA", f"{events_path}: no events fall inside the schedule windows")
    dataset, _ = build_client_dataset(
        course_id=entry["course"],
        events=events,
        grades=grades,
        spec=spec,
        course_span=course_span_for(events, schedule),
        lecture_count=len(schedule),
    )
    return dataset, [grades_path, events_path, schedule_path]


def _training_data(config: dict, config_path: Path) -> tuple[list[ClientDataset], FeatureSpec | None, dict]:
    """Training datasets plus the embedded feature spec (None for external features)."""
    input_hashes = {str(config_path): _hash_file(config_path)}
    entries = client_entries_from(config, config_path.parent)
    if entries:
        spec = feature_spec_from(config)
        datasets = []
        embedded: FeatureSpec | None = None
        for entry in entries:
            dataset, paths = _dataset_from_entry(entry, spec)
            if "events" in entry:
                embedded = spec
            for path in paths:
                input_hashes[str(path)] = _hash_file(path)
            datasets.append(dataset)
        if any("events" in entry for entry in entries) and not all(
            "events" in entry for entry in entries
        ):
            raise CliError("CONFIG", "mix of feature-file and event-log clients is not supported")
        return datasets, embedded, input_hashes
    synth = config.get("data", {}).get("synthetic")
    if synth is None:
        raise CliError("CONFIG", "config needs data.clients, data.manifest, or data.synthetic")
    spec = synth_spec_from(config)
    log_spec = log_spec_from(config)
    held_out = int(synth.get("held_out", 0))
    if log_spec is None:
        datasets = generate(spec)[: spec.n_clients - held_out]
        return datasets, None, input_hashes
    feature_spec = feature_spec_from(config)
    courses = generate_event_cohort(spec, log_spec)[: spec.n_clients - held_out]
    datasets = []
    for course in courses:
        span = course_span_for(course.events, course.schedule)
        dataset, _ = build_client_dataset(
            course.course_id, course.events, course.grades, feature_spec, span, len(course.schedule)
        )
        datasets.append(dataset)
    return datasets, feature_spec, input_hashes


def _cmd_train(args: argparse.Namespace) -> int:
    config_path = _require_file(args.config, "config")
    config = load_config(config_path)
    out = _output_dir(args.out)
    modes = [args.mode] if args.mode else modes_from(config)
    flags = [_parse_bool(args.differential, "--differential")] if args.differential else differential_flags_from(config)
    runs = runs_from(config)

    datasets, embedded_spec, input_hashes = _training_data(config, config_path)
    if not datasets:
        raise CliError("CONFIG", "no training clients configured")
    input_dim = datasets[0].feature_dim
    mlp = mlp_config_from(config, input_dim)

    for mode in modes:
        for use_differential in flags:
            for run_index in range(runs):
                fed_config = federation_config_from(config, mode, use_differential, run_index, mlp)
                started = time.perf_counter()
                report = run_training(datasets, fed_config)
                elapsed = time.perf_counter() - started
                stem = f"{mode}_{_diff_tag(use_differential)}_run{run_index}"
                model_name = f"model_{stem}.txt"
                save_model(
                    report.final_params,
                    out / model_name,
                    feature_spec=embedded_spec,
                    extras={"differential": "true" if use_differential else "false"},
                )
                _write_json(
                    out / f"report_{stem}.json",
                    {
                        "run": {
                            "mode": mode,
                            "differential": use_differential,
                            "run_index": run_index,
                            "seed": fed_config.seed,
                        },
                        "model_file": model_name,
                        "config_echo": report.config_echo,
                        "input_hashes": input_hashes,
                        "sample_counts": report.sample_counts,
                        "round_losses": report.losses,
                    },
                )
                _write_json(
                    out / f"report_{stem}.meta.json",
                    {"wall_clock_seconds": elapsed, "unix_time": time.time()},
                )
                print(f"{stem}: final round loss {report.losses[-1]:.6f} -> {out / model_name}")
    return 0


# ---------------------------------------------------------------- shared evaluation input handling


def _load_model_checked(path_text: str) -> LoadedModel:
    path = _require_file(path_text, "model")
    try:
        return load_model(path)
    except ValueError as exc:
        raise CliError("MODEL", str(exc)) from None


def _resolve_differential(args: argparse.Namespace, model: LoadedModel) -> bool:
    if args.differential and args.differential != "auto":
        return _parse_bool(args.differential, "--differential")
    recorded = model.extras.get("differential")
    if recorded is None:
        raise CliError(
            "USAGE",
            "model does not record its differential mode; pass --differential true|false",
        )
    return recorded == "true"


def _test_dataset(args: argparse.Namespace, model: LoadedModel, course: str) -> tuple[ClientDataset, list[Path]]:
    """Build the evaluation dataset from --features or --events/--schedule."""
    grades_path = _require_file(args.grades, "grades")
    grades = read_grades_csv(grades_path)
    input_dim = model.params.config.input_dim
    if args.features:
        features_path = _require_file(args.features, "features")
        vectors = read_features_csv(features_path)
        dimension = len(next(iter(vectors.values())))
        if dimension != input_dim:
            raise CliError(
                "COMPAT",
                f"feature dimension {dimension} does not match model input_dim {input_dim} "
                f"(model feature_hash {model.feature_hash})",
            )
        missing = [record.student_id for record in grades if record.student_id not in vectors]
        if missing:
            raise CliError("DATA", f"{features_path}: no feature rows for graded students {missing[:5]}")
        from fedrisk.course_data import GradeScoring

        scoring = GradeScoring.from_records(grades)
        dataset = ClientDataset(
            client_id=course,
            students=[record.student_id for record in grades],
            features=np.stack([vectors[record.student_id] for record in grades]),
            scored_grades=np.array([scoring.score_of(record.grade) for record in grades]),
            lecture_count=1,
        )
        return dataset, [grades_path, features_path]
    if not args.events or not args.schedule:
        raise CliError("USAGE", "provide either --features or both --events and --schedule")
    if model.feature_spec is None:
        raise CliError(
            "COMPAT",
            f"model was trained on external features (feature_hash {model.feature_hash}); "
            "evaluating from event logs requires a model with an embedded featurizer",
        )
    events_path = _require_file(args.events, "events")
    schedule_path = _require_file(args.schedule, "schedule")
    ingest = ingest_events(events_path, vocab=model.feature_spec.vocab)
    schedule = read_schedule_csv(schedule_path)
    events = truncate_events(ingest.records, schedule, len(schedule))
    if not events:
        raise CliError("DATA", f"{events_path}: no events fall inside the schedule windows")
    dataset, _ = build_client_dataset(
        course_id=course,
        events=events,
        grades=grades,
        spec=model.feature_spec,
        course_span=course_span_for(events, schedule),
        lecture_count=len(schedule),
    )
    return dataset, [grades_path, events_path, schedule_path]


# ---------------------------------------------------------------- predict


def _cmd_predict(args: argparse.Namespace) -> int:
    model = _load_model_checked(args.model)
    use_differential = _resolve_differential(args, model)
    dataset, _ = _test_dataset(args, model, course=args.course)
    ranking = rank_dataset(model.params, dataset, args.threshold_rank, use_differential)
    out_path = Path(args.out) if args.out else _output_dir(None) / "ranking.csv"
    with out_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("rank", "student_id", "score", "at_risk", "grade_score"))
        for position, entry in enumerate(ranking.entries, start=1):
            writer.writerow(
                (position, entry.student_id, repr(entry.score), int(entry.at_risk), repr(entry.grade_score))
            )
    print(f"wrote risk ranking for {len(ranking)} students to {out_path}")
    return 0


# ---------------------------------------------------------------- evaluate


def _cmd_evaluate(args: argparse.Namespace) -> int:
    out = _output_dir(args.out)
    prefix = args.prefix
    reports: list[MetricsReport] = []
    input_hashes: dict[str, str] = {}
    first_differential: bool | None = None
    for model_path in args.model:
        model = _load_model_checked(model_path)
        use_differential = _resolve_differential(args, model)
        if first_differential is None:
            first_differential = use_differential
        elif first_differential != use_differential:
            raise CliError("USAGE", "all models in one evaluation must share the differential mode")
        dataset, data_paths = _test_dataset(args, model, course=args.course)
        reports.append(evaluate_dataset(model.params, dataset, args.threshold_rank, use_differential))
        input_hashes[str(Path(model_path))] = _hash_file(Path(model_path))
        for path in data_paths:
            input_hashes[str(path)] = _hash_file(path)
        if args.pr_curve:
            ranking = rank_dataset(model.params, dataset, args.threshold_rank, use_differential)
            curve_path = out / f"{prefix}pr_curve_run{len(reports) - 1}.csv"
            with curve_path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(("n", "recall", "precision"))
                for n, recall, precision in pr_curve(ranking):
                    writer.writerow((n, repr(recall), repr(precision)))
    mean_report = mean_metrics(reports)

    csv_path = out / f"{prefix}metrics.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_CSV_HEADER)
        for run_index, report in enumerate(reports):
            writer.writerow((args.course, args.method, str(run_index)) + tuple(report.csv_values()))
        writer.writerow((args.course, args.method, "mean") + tuple(mean_report.csv_values()))
    _write_json(
        out / f"{prefix}metrics.json",
        {
            "course": args.course,
            "method": args.method,
            "threshold_rank": args.threshold_rank,
            "differential": first_differential,
            "models": [str(Path(path)) for path in args.model],
            "per_run": [report.to_json_dict() for report in reports],
            "mean": mean_report.to_json_dict(),
            "input_hashes": input_hashes,
        },
    )
    print(
        f"{args.course} [{args.method}] mean over {len(reports)} run(s): "
        f"nDCG {mean_report.ndcg:.4f}, PR-AUC {mean_report.pr_auc:.4f} -> {csv_path}"
    )
    return 0


# ---------------------------------------------------------------- early-sweep


def _cmd_early_sweep(args: argparse.Namespace) -> int:
    model = _load_model_checked(args.model)
    use_differential = _resolve_differential(args, model)
    if model.feature_spec is None:
        raise CliError(
            "COMPAT",
            f"model was trained on external features (feature_hash {model.feature_hash}); "
            "the early sweep featurizes event logs and needs an embedded featurizer",
        )
    events_path = _require_file(args.events, "events")
    schedule_path = _require_file(args.schedule, "schedule")
    grades_path = _require_file(args.grades, "grades")
    ingest = ingest_events(events_path, vocab=model.feature_spec.vocab)
    schedule = read_schedule_csv(schedule_path)
    grades = read_grades_csv(grades_path)
    k_min = args.k_min or 1
    k_max = args.k_max or len(schedule)
    if not 1 <= k_min <= k_max <= len(schedule):
        raise CliError("USAGE", f"need 1 <= k-min <= k-max <= {len(schedule)}")
    rows = early_prediction_sweep(
        params=model.params,
        events=ingest.records,
        schedule=schedule,
        grades=grades,
        spec=model.feature_spec,
        threshold_rank=args.threshold_rank,
        use_differential=use_differential,
        k_range=range(k_min, k_max + 1),
        baseline_shuffles=args.shuffles,
        baseline_seed=args.baseline_seed,
    )
    out_path = Path(args.out) if args.out else _output_dir(None) / "early_sweep.csv"
    with out_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SWEEP_CSV_HEADER)
        for row in rows:
            writer.writerow((row.k, row.method) + tuple(row.metrics.csv_values()))
    print(f"wrote {len(rows)} sweep rows (k {k_min}..{k_max}) to {out_path}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrisk",
        description="At-risk student prediction with federated learning and differential features",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    generate_parser = sub.add_parser("generate", help="materialize a synthetic cohort to CSV files")
    generate_parser.add_argument("--config", required=True)
    generate_parser.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or cwd)")
    generate_parser.set_defaults(handler=_cmd_generate)

    train_parser = sub.add_parser("train", help="train the experiment matrix from a config file")
    train_parser.add_argument("--config", required=True)
    train_parser.add_argument("--mode", choices=("federated", "centralized"))
    train_parser.add_argument("--differential", help="narrow the matrix: true or false")
    train_parser.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or cwd)")
    train_parser.set_defaults(handler=_cmd_train)

    predict_parser = sub.add_parser("predict", help="write the risk ranking for one course")
    _add_eval_inputs(predict_parser)
    predict_parser.add_argument("--model", required=True)
    predict_parser.add_argument("--out", help="output CSV path")
    predict_parser.set_defaults(handler=_cmd_predict)

    evaluate_parser = sub.add_parser("evaluate", help="compute ranking metrics for one or more models")
    _add_eval_inputs(evaluate_parser)
    evaluate_parser.add_argument("--model", required=True, nargs="+")
    evaluate_parser.add_argument("--method", default="model", help="method label for the CSV rows")
    evaluate_parser.add_argument("--prefix", default="eval_", help="output filename prefix")
    evaluate_parser.add_argument("--pr-curve", action="store_true", help="also dump PR-curve points per run")
    evaluate_parser.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or cwd)")
    evaluate_parser.set_defaults(handler=_cmd_evaluate)

    sweep_parser = sub.add_parser("early-sweep", help="evaluate truncated logs at each lecture k")
    sweep_parser.add_argument("--model", required=True)
    sweep_parser.add_argument("--events", required=True)
    sweep_parser.add_argument("--schedule", required=True)
    sweep_parser.add_argument("--grades", required=True)
    sweep_parser.add_argument("--course", default="test")
    sweep_parser.add_argument("--differential", default="auto", help="true, false, or auto (from model)")
    sweep_parser.add_argument("--threshold-rank", type=int, default=15)
    sweep_parser.add_argument("--k-min", type=int)
    sweep_parser.add_argument("--k-max", type=int)
    sweep_parser.add_argument("--shuffles", type=int, default=1000)
    sweep_parser.add_argument("--baseline-seed", type=int, default=0)
    sweep_parser.add_argument("--out", help="output CSV path")
    sweep_parser.set_defaults(handler=_cmd_early_sweep)

    return parser


def _add_eval_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grades", required=True)
    parser.add_argument("--features")
    parser.add_argument("--events")
    parser.add_argument("--schedule")
    parser.add_argument("--course", default="test")
    parser.add_argument("--differential", default="auto", help="true, false, or auto (from model)")
    parser.add_argument("--threshold-rank", type=int, default=15)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return 2
    try:
        return args.handler(args)
    except CliError as error:
        print(f"ERR:{error.code}: {error}", file=sys.stderr)
        return error.exit_code
    except ConfigError as error:
        print(f"ERR:CONFIG: {error}", file=sys.stderr)
        return 2
    except (IngestError, ValueError) as error:
        print(f"ERR:DATA: {error}", file=sys.stderr)
        return 2
    except Exception as error:  # pragma: no cover - safety net
        print(f"ERR:INTERNAL: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
