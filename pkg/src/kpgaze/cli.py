"""Command line entry point: ``kpgaze <command> ...``.

Exit codes: 0 success, 2 invalid input (config, dataset, model file),
3 runtime failure (e.g. non-finite loss, nothing to evaluate), 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dataset import file_digest, load_samples, read_records, write_records
from .errors import ArchMismatch, CorruptModel, GazeError, NonFiniteLoss, ValidationError
from .evaluation import EvalReport, compare_models, evaluate_predictions, format_table
from .network import load_model, save_model
from .predict import predict_records, read_predictions, write_predictions
from .synthetic import SynthParams, generate_dataset
from .training import FINETUNE_LR, TRAIN_LR, TrainConfig, fine_tune, train

log = logging.getLogger("kpgaze")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
ARTIFACT_DIR_ENV = "KPGAZE_ARTIFACT_DIR"


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError("config must be a mapping", str(path))
    return doc


def _resolve_out(path: str | None, default_name: str) -> Path:
    p = Path(path) if path else Path(os.environ.get(ARTIFACT_DIR_ENV, ".")) / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, doc) -> None:
    path = os.fspath(path)
    with open(path + ".tmp", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(path + ".tmp", path)


class Run:
    """Collects what a command read and wrote; dumped as ``<out>.run.json``."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = argv
        self.config: dict = {}
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.seed = None
        self.manifest_path: Path | None = None
        self.start = time.monotonic()

    def add_input(self, path) -> None:
        self.inputs[os.fspath(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.outputs[os.fspath(path)] = file_digest(path)

    def write(self, status: str = "ok", error: str | None = None) -> None:
        if self.manifest_path is None:
            return
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "tool_version": __version__,
            "duration_s": round(time.monotonic() - self.start, 3),
            "status": status,
        }
        if error:
            doc["error"] = error
        _write_json(self.manifest_path, doc)


def verify_manifest(path) -> dict[str, bool]:
    """Recompute the digest of every input/output recorded in a run manifest."""
    with open(path) as fh:
        doc = json.load(fh)
    result = {}
    for p, digest in {**doc.get("inputs", {}), **doc.get("outputs", {})}.items():
        result[p] = os.path.exists(p) and file_digest(p) == digest
    return result


# -- commands ---------------------------------------------------------------

def cmd_synth(args, run: Run) -> int:
    out = _resolve_out(args.out, "synth.jsonl")
    run.manifest_path = Path(str(out) + ".run.json")
    doc = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.n is not None:
        doc["n_samples"] = args.n
    params = SynthParams.from_dict(doc)
    run.config, run.seed = params.to_dict(), params.seed
    manifest_path = Path(str(out) + ".manifest.json")
    manifest = generate_dataset(params, out, manifest_path)
    run.add_output(out)
    run.add_output(manifest_path)
    log.info("wrote %d samples to %s (rejections: %s)", params.n_samples, out, manifest["rejections"])
    return EXIT_OK


def cmd_train(args, run: Run) -> int:
    out = _resolve_out(args.out, "model.json")
    run.manifest_path = Path(str(out) + ".run.json")
    doc = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    overrides = {
        "seed": args.seed,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "max_epochs": args.epochs,
        "patience": args.patience,
        "input_variant": args.variant,
        "augmentation": args.augmentation,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(doc)
    run.seed = config.seed

    base = None
    if args.finetune:
        run.add_input(args.finetune)
        base = load_model(args.finetune)
    train_set, skipped_train = load_samples(args.train)
    val_set, skipped_val = load_samples(args.val)
    run.add_input(args.train)
    run.add_input(args.val)
    log.info("train: %d admitted, %d skipped; val: %d admitted, %d skipped",
             len(train_set), len(skipped_train), len(val_set), len(skipped_val))

    lr = config.learning_rate or (FINETUNE_LR if base is not None else TRAIN_LR)
    resolved = replace(config, learning_rate=lr)
    run.config = resolved.to_dict()
    try:
        if base is not None:
            model, report = fine_tune(base, resolved, train_set, val_set)
        else:
            model, report = train(resolved, train_set, val_set)
    except NonFiniteLoss as exc:
        dump = Path(str(out) + ".nonfinite.json")
        _write_json(dump, exc.dump)
        log.error("diagnostic batch written to %s", dump)
        raise

    save_model(model, out)
    report_path = Path(str(out) + ".report.json")
    config_path = Path(str(out) + ".config.json")
    report_doc = report.to_dict()
    report_doc["final_config"] = resolved.to_dict()
    _write_json(report_path, report_doc)
    _write_json(config_path, resolved.to_dict())
    for p in (out, report_path, config_path):
        run.add_output(p)
    log.info("best epoch %d, val error %.2f deg (%s)", report.best_epoch, report.final_val_error,
             report.stopping_reason)
    return EXIT_OK


def _predict(args, run: Run, baseline: str | None) -> int:
    out = _resolve_out(args.out, "predictions.jsonl")
    run.manifest_path = Path(str(out) + ".run.json")
    run.config = {"baseline": baseline}
    model = None
    if baseline is None:
        run.add_input(args.model)
        model = load_model(args.model)
    run.add_input(args.data)
    records = read_records(args.data)
    preds = predict_records(model, records, baseline=baseline)
    write_predictions(preds, out)
    run.add_output(out)
    n_ok = sum(p["gaze"] is not None for p in preds)
    log.info("%d/%d persons estimated", n_ok, len(preds))
    return EXIT_OK


def cmd_predict(args, run: Run) -> int:
    if args.baseline is None and not args.model:
        raise ValidationError("--model is required unless --baseline is given", "model")
    return _predict(args, run, args.baseline)


def cmd_baseline(args, run: Run) -> int:
    return _predict(args, run, "geom")


def cmd_eval(args, run: Run) -> int:
    out = _resolve_out(args.out, "report.json")
    run.manifest_path = Path(str(out) + ".run.json")
    run.add_input(args.predictions)
    run.add_input(args.data)
    preds = read_predictions(args.predictions)
    records = read_records(args.data)
    report = evaluate_predictions(preds, records, dataset_digest=file_digest(args.data),
                                  model_name=args.name or Path(args.predictions).stem)
    with open(str(out) + ".tmp", "w") as fh:
        fh.write(report.to_json())
    os.replace(str(out) + ".tmp", out)
    run.add_output(out)
    if args.csv:
        Path(args.csv).write_text(report.samples_csv())
        run.add_output(args.csv)
    if report.skipped:
        log.info("skipped: %s", report.skipped)
    if report.unlabeled_keys:
        log.info("%d prediction(s) without a label", len(report.unlabeled_keys))
    rho = "undefined" if report.pearson_rho is None else f"{report.pearson_rho:.3f}"
    print(f"coverage {report.coverage:.1%}  mean error {report.mean_error:.2f} deg  rho {rho}")
    return EXIT_OK


def cmd_compare(args, run: Run) -> int:
    out = _resolve_out(args.out, "comparison.json")
    run.manifest_path = Path(str(out) + ".run.json")
    reports = []
    for p in args.reports:
        with open(p) as fh:
            reports.append(EvalReport.from_dict(json.load(fh)))
        run.add_input(p)
    labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.reports]
    table = compare_models(reports, labels, aggregate=not args.no_aggregate)
    _write_json(out, table)
    run.add_output(out)
    print(format_table(table), end="")
    return EXIT_OK


def split_records(records, fractions=(0.5, 0.2, 0.3), seed: int = 0):
    """Assign whole sequences (or single records without one) to train/val/test.

    Sequences are shuffled and dealt greedily so that each subset's record
    count approaches its requested fraction.
    """
    fractions = np.asarray(fractions, dtype=float)
    if fractions.shape != (3,) or (fractions < 0).any() or not np.isclose(fractions.sum(), 1.0):
        raise ValidationError("need three non-negative fractions summing to 1", "fractions")
    groups = defaultdict(list)
    for rec in records:
        groups[rec.sequence if rec.sequence is not None else "|".join(rec.key)].append(rec)
    names = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(names))
    total = len(records)
    parts = [[], [], []]
    counts = np.zeros(3)
    for i in order:
        recs = groups[names[i]]
        deficit = fractions * total - counts
        j = int(np.argmax(deficit))
        parts[j].extend(recs)
        counts[j] += len(recs)
    return parts


def cmd_split(args, run: Run) -> int:
    records = read_records(args.data)
    run.add_input(args.data)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    seed = args.seed if args.seed is not None else 0
    run.seed = seed
    run.config = {"fractions": list(fractions)}
    out_dir = _resolve_out(args.out, "split")
    out_dir.mkdir(parents=True, exist_ok=True)
    run.manifest_path = out_dir / "split.run.json"
    for name, part in zip(("train", "val", "test"), split_records(records, fractions, seed)):
        path = out_dir / f"{name}.jsonl"
        write_records(part, path)
        run.add_output(path)
        log.info("%s: %d records", name, len(part))
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--out", help=f"output path (default under ${ARTIFACT_DIR_ENV} or .)")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = argparse.ArgumentParser(prog="kpgaze", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kpgaze {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled dataset")
    p.add_argument("--n", type=int, help="number of samples (overrides config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train (or fine-tune) a model")
    p.add_argument("--train", required=True, help="training dataset (JSON lines)")
    p.add_argument("--val", required=True, help="validation dataset (JSON lines)")
    p.add_argument("--finetune", metavar="BASE_MODEL", help="start from this model")
    p.add_argument("--variant", choices=("cgu", "net0", "relu_conf"))
    p.add_argument("--augmentation", choices=("none", "quadrant_balance"))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict gaze for every person in a dataset")
    p.add_argument("--model")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", choices=("geom",), help="use a non-learned baseline instead of --model")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", parents=[common], help="predict with the geometric baseline")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", parents=[common], help="score predictions against labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", help="also write one row per sample (angle, sigma, error, k)")
    p.add_argument("--name", help="model name recorded in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="tabulate several eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", help="comma-separated row labels")
    p.add_argument("--no-aggregate", action="store_true",
                   help="omit the mean +/- spread row (e.g. when rows are different models)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("split", parents=[common], help="sequence-stratified train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.5,0.2,0.3")
    p.set_defaults(func=cmd_split)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    run = Run(args.command, argv)
    try:
        code = args.func(args, run)
    except (ValidationError, ArchMismatch, CorruptModel) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        run.write("error", f"{type(exc).__name__}: {exc}")
        return EXIT_VALIDATION
    except GazeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        run.write("error", f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except OSError as exc:
        log.error("I/O error: %s", exc)
        run.write("error", f"OSError: {exc}")
        return EXIT_IO
    except yaml.YAMLError as exc:
        log.error("config is not valid YAML/JSON: %s", exc)
        return EXIT_VALIDATION
    run.write("ok")
    return code


if __name__ == "__main__":
    sys.exit(main())
