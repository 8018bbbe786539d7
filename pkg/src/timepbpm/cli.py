"""Command-line entry point: ``timepbpm <command> ...``.

Every flag can also be set through an environment variable named
``TIMEPBPM_<DEST>`` (e.g. ``TIMEPBPM_LR=0.001``); explicit flags win over the
environment, the environment over built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .encoding import (
    build_vocabulary,
    compute_class_weights,
    compute_divisors,
    encode_log,
    encode_prefix,
    generate_prefixes,
    max_prefix_length,
    ActivityVocabulary,
    TimeDivisors,
)
from .errors import DataError, EncodingError, NumericError, PBPMError
from .eventlog import (
    CsvSchema,
    EventLog,
    SplitLog,
    format_timestamp,
    parse_csv,
    temporal_split,
    validate_log,
    write_csv,
)
from .evaluate import evaluate, format_rows, format_table, read_rows
from .model import (
    DEFAULT_DROPOUTS,
    DEFAULT_LEARNING_RATES,
    DEFAULT_UNITS,
    EPOCH_LOG_HEADER,
    ModelConfig,
    build_model,
    default_grid,
    format_epoch_line,
    grid_key,
    grid_search,
    load_checkpoint,
    save_checkpoint,
    train,
)

ENV_PREFIX = "TIMEPBPM_"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_FILES = {"train": "train.csv", "validation": "validation.csv", "test": "test.csv"}

log = logging.getLogger("timepbpm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _truthy(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def _apply_env(parser: argparse.ArgumentParser):
    """Turn ``TIMEPBPM_<DEST>`` variables into argument defaults."""
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help", "version"):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            action.default = _truthy(raw)
        elif action.nargs in ("+", "*"):
            conv = action.type or str
            action.default = [conv(x) for x in raw.replace(",", " ").split()]
        else:
            action.default = action.type(raw) if action.type else raw
        action.required = False


def _add_schema(p):
    g = p.add_argument_group("CSV schema")
    g.add_argument("--case-col", default="CaseID")
    g.add_argument("--activity-col", default="ActivityID")
    g.add_argument("--timestamp-col", default="CompleteTimestamp")
    g.add_argument("--timestamp-format", default="%Y-%m-%d %H:%M:%S")


def _schema(args) -> CsvSchema:
    return CsvSchema(args.case_col, args.activity_col, args.timestamp_col, args.timestamp_format)


def _add_common(p):
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS worker threads (1 keeps runs bit-reproducible)")
    p.add_argument("--manifest", default=None, help="where to write the run manifest")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p, grid=False):
    p.add_argument("--data", required=True, help="directory holding train/validation/test CSVs")
    p.add_argument("--cell", choices=("lstm", "tlstm"), default="lstm")
    p.add_argument("--cost-sensitive", action="store_true")
    if grid:
        p.add_argument("--units", type=int, nargs="+", default=list(DEFAULT_UNITS))
        p.add_argument("--dropouts", type=float, nargs="+", default=list(DEFAULT_DROPOUTS))
        p.add_argument("--lrs", type=float, nargs="+", default=list(DEFAULT_LEARNING_RATES))
    else:
        p.add_argument("--units", type=int, default=100)
        p.add_argument("--dropout", type=float, default=0.2)
        p.add_argument("--lr", type=float, default=0.002)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    _add_schema(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="timepbpm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="descriptive statistics and invariant checks for a log")
    p.add_argument("--input", required=True)
    p.add_argument("--json", default=None, help="also write the report as JSON here")
    _add_schema(p)
    _add_common(p)

    p = sub.add_parser("split", help="temporal train/validation/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-frac", type=float, default=2 / 3)
    p.add_argument("--val-frac", type=float, default=0.2)
    _add_schema(p)
    _add_common(p)

    p = sub.add_parser("train", help="train one model variant")
    _add_training(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-epoch log (default: <out>.log.tsv)")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)

    p = sub.add_parser("gridsearch", help="grid search over units, dropout and learning rate")
    _add_training(p, grid=True)
    p.add_argument("--out", required=True, help="output directory (reruns resume from it)")
    p.add_argument("--no-figures", action="store_true")
    _add_common(p)

    p = sub.add_parser("evaluate", help="accuracy and MAE (days) on test prefixes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="split directory; its test.csv is evaluated")
    p.add_argument("--input", default=None, help="evaluate this CSV instead of <data>/test.csv")
    p.add_argument("--dataset", default=None, help="dataset name for the report")
    p.add_argument("--format", choices=("rows", "table"), default="table")
    p.add_argument("--out", default=None, help="file for the delimited report rows")
    p.add_argument("--figures", default=None, help="directory for figures")
    p.add_argument("--clamp-negative", action="store_true",
                   help="clamp negative time predictions to zero")
    _add_schema(p)
    _add_common(p)

    p = sub.add_parser("report", help="combine evaluation rows into a table and figure")
    p.add_argument("--rows", nargs="+", required=True)
    p.add_argument("--format", choices=("rows", "table"), default="table")
    p.add_argument("--figure", default=None)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_common(p)

    p = sub.add_parser("predict", help="next activity and timestamp for every prefix of a log")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None, help="write rows here instead of stdout")
    _add_schema(p)
    _add_common(p)

    for p in sub.choices.values():
        _apply_env(p)
    return parser


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    seed: int | None
    toolkit_version: str
    started: str
    finished: str | None = None

    def write(self, path):
        self.finished = _now()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _manifest(args, inputs) -> RunManifest:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return RunManifest(args.command, cfg, {p: _digest(p) for p in inputs if p and os.path.isfile(p)},
                       getattr(args, "seed", None), __version__, _now())


def _manifest_path(args, beside=None):
    """``--manifest`` if given, else ``beside``, else a file in the working directory."""
    return args.manifest or beside or f"timepbpm-{args.command}.manifest.json"


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return path


def load_split_dir(data_dir, schema) -> SplitLog:
    parts = {}
    for part, fname in SPLIT_FILES.items():
        parts[part] = parse_csv(_require_file(os.path.join(data_dir, fname)), schema)
    return SplitLog(**parts)


@dataclass
class PreparedData:
    vocab: ActivityVocabulary
    divisors: TimeDivisors
    k_max: int
    train: object
    validation: object
    test: object
    class_weights: np.ndarray


def prepare(split: SplitLog) -> PreparedData:
    """Vocabulary, divisors and k_max from the training pool; encode all parts."""
    pool = split.pool
    vocab = build_vocabulary(pool)
    divisors = compute_divisors(pool)
    k_max = max_prefix_length(pool)
    tr = encode_log(split.train, vocab, divisors, k_max)
    va = encode_log(split.validation, vocab, divisors, k_max)
    te = encode_log(split.test, vocab, divisors, k_max)
    if len(tr) < 2 or len(va) < 1:
        raise DataError("training or validation part yields too few prefixes")
    weights = compute_class_weights(tr.next_activity, vocab.size)
    return PreparedData(vocab, divisors, k_max, tr, va, te, weights)


def _config_from(args, **over) -> ModelConfig:
    base = dict(cell_kind=args.cell, cost_sensitive=args.cost_sensitive,
                max_epochs=args.epochs, batch_size=args.batch_size, patience=args.patience,
                seed=args.seed)
    base.update(over)
    return ModelConfig(**base)


def _check_training_args(args, grid=False):
    lrs = args.lrs if grid else [args.lr]
    drops = args.dropouts if grid else [args.dropout]
    units = args.units if grid else [args.units]
    if any(lr <= 0 for lr in lrs):
        raise UsageError("learning rate must be positive")
    if any(not 0 <= d < 1 for d in drops):
        raise UsageError("dropout must lie in [0, 1)")
    if any(u < 1 for u in units):
        raise UsageError("units must be positive")
    for name in ("epochs", "batch_size", "patience"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1")


def cmd_validate(args):
    logd = parse_csv(_require_file(args.input), _schema(args))
    report = validate_log(logd)
    print(report.to_text())
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    _manifest(args, [args.input]).write(
        _manifest_path(args, args.json + ".manifest.json" if args.json else None))
    return EXIT_OK if report.ok else EXIT_DATA


def cmd_split(args):
    man = _manifest(args, [_require_file(args.input)])
    logd = parse_csv(args.input, _schema(args))
    split = temporal_split(logd, args.train_frac, args.val_frac)
    os.makedirs(args.out, exist_ok=True)
    schema = _schema(args)
    counts = {}
    for part, fname in SPLIT_FILES.items():
        part_log: EventLog = getattr(split, part)
        write_csv(part_log, os.path.join(args.out, fname), schema)
        counts[part] = (len(part_log), part_log.num_events)
    for part, (cases, events) in counts.items():
        print(f"{part}\t{cases}\t{events}")
    man.write(args.manifest or os.path.join(args.out, "manifest.json"))
    return EXIT_OK


def _write_epoch_log(path):
    fh = open(path, "w", encoding="utf-8")
    fh.write(EPOCH_LOG_HEADER + "\n")

    def callback(epoch, hist):
        fh.write(format_epoch_line(epoch, hist) + "\n")
        fh.flush()
    return fh, callback


def cmd_train(args):
    _check_training_args(args)
    man = _manifest(args, [os.path.join(args.data, f) for f in SPLIT_FILES.values()])
    data = prepare(load_split_dir(args.data, _schema(args)))
    cfg = _config_from(args, hidden_units=args.units, dropout_rate=args.dropout,
                       learning_rate=args.lr)
    model = build_model(cfg, data.vocab.size, data.train.width, data.class_weights)
    log_path = args.log or args.out + ".log.tsv"
    fh, cb = _write_epoch_log(log_path)
    with fh:
        model, hist = train(model, data.train, data.validation, cfg, cb)
    save_checkpoint(model, args.out, data.vocab, data.divisors, data.k_max,
                    extra={"history": hist.to_dict()})
    if not args.no_figures:
        from .plotting import plot_training_history
        plot_training_history(hist, args.out + ".history.png", cfg.variant)
    print(f"{cfg.variant}\tbest_epoch={hist.best_epoch}\tval_loss={hist.best_val_loss:.6f}"
          f"\tepochs={hist.epochs}\tcheckpoint={args.out}")
    man.write(args.manifest or args.out + ".manifest.json")
    return EXIT_OK


def cmd_gridsearch(args):
    _check_training_args(args, grid=True)
    man = _manifest(args, [os.path.join(args.data, f) for f in SPLIT_FILES.values()])
    data = prepare(load_split_dir(args.data, _schema(args)))
    os.makedirs(os.path.join(args.out, "configs"), exist_ok=True)
    results_path = os.path.join(args.out, "results.jsonl")
    completed = {}
    if os.path.exists(results_path):
        with open(results_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    res = json.loads(line)
                    completed[grid_key(res["point"])] = res
    space = default_grid(args.units, args.dropouts, args.lrs)
    base = _config_from(args)

    def on_result(res, model):
        key = hashlib.sha1(grid_key(res["point"]).encode()).hexdigest()[:12]
        if model is not None:
            ckpt = os.path.join(args.out, "configs", key + ".ckpt")
            save_checkpoint(model, ckpt, data.vocab, data.divisors, data.k_max)
            res["checkpoint"] = ckpt
        with open(results_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(res, sort_keys=True) + "\n")

    result = grid_search(space, data.train, data.validation, base, data.vocab.size,
                         data.class_weights, completed, on_result)
    lines = ["units\tdropout\tlr\tstatus\tval_loss"]
    for r in result.results:
        p = r["point"]
        lines.append(f"{p['hidden_units']}\t{p['dropout_rate']}\t{p['learning_rate']}"
                     f"\t{r['status']}\t{r['val_loss']:.6f}")
    table = "\n".join(lines)
    with open(os.path.join(args.out, "grid.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    man.write(args.manifest or os.path.join(args.out, "manifest.json"))
    if result.best_config is None:
        print("every grid point diverged", file=sys.stderr)
        return EXIT_NUMERIC
    best = next(r for r in result.results if r["config"] == result.best_config.to_dict())
    shutil.copyfile(best["checkpoint"], os.path.join(args.out, "best.ckpt"))
    print(f"best\t{json.dumps(best['point'], sort_keys=True)}\t{best['val_loss']:.6f}")
    return EXIT_OK


def cmd_evaluate(args):
    if not args.data and not args.input:
        raise UsageError("evaluate needs --data or --input")
    path = args.input or os.path.join(args.data, SPLIT_FILES["test"])
    man = _manifest(args, [_require_file(args.checkpoint), _require_file(path)])
    model, meta = load_checkpoint(args.checkpoint)
    vocab = ActivityVocabulary.from_labels(meta["vocabulary"])
    divisors = TimeDivisors(**meta["divisors"])
    test_log = parse_csv(path, _schema(args))
    test = encode_log(test_log, vocab, divisors, meta["k_max"])
    name = args.dataset or os.path.basename(os.path.normpath(args.data or path))
    report = evaluate(model, test, vocab, divisors, name, clamp_negative=args.clamp_negative)
    rows = format_rows([report])
    print(format_table([report]) if args.format == "table" else rows, end="\n" if args.format == "table" else "")
    out = args.out or args.checkpoint + ".eval.tsv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(rows)
    if args.figures:
        from .plotting import plot_activity_distribution, plot_gap_distribution
        os.makedirs(args.figures, exist_ok=True)
        probs, _ = model.predict_dataset(test)
        plot_activity_distribution(test.next_activity, probs.argmax(axis=1), vocab,
                                   os.path.join(args.figures, "test_activity_distribution.png"),
                                   f"{name}: next activity", names=("true", "predicted"))
        plot_gap_distribution(test_log, os.path.join(args.figures, "test_gap_distribution.png"), name)
    man.write(args.manifest or out + ".manifest.json")
    return EXIT_OK


def cmd_report(args):
    reports = []
    for p in args.rows:
        with open(_require_file(p), encoding="utf-8") as fh:
            reports.extend(read_rows(fh.read()))
    if not reports:
        raise DataError("no evaluation rows found")
    print(format_table(reports) if args.format == "table" else format_rows(reports), end="\n" if args.format == "table" else "")
    if args.figure:
        from .plotting import plot_variant_comparison
        plot_variant_comparison(reports, args.figure)
    _manifest(args, args.rows).write(_manifest_path(args))
    return EXIT_OK


def cmd_gradcheck(args):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    from .checks import run_gradchecks
    results = run_gradchecks(args.seed, args.trials)
    ok = True
    for name, err in results.items():
        passed = err <= args.tolerance
        ok &= passed
        print(f"{name:<24} {err:.3e}  {'PASS' if passed else 'FAIL'}")
    _manifest(args, []).write(_manifest_path(args))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_predict(args):
    man = _manifest(args, [_require_file(args.checkpoint), _require_file(args.input)])
    model, meta = load_checkpoint(args.checkpoint)
    vocab = ActivityVocabulary.from_labels(meta["vocabulary"])
    divisors = TimeDivisors(**meta["divisors"])
    k_max = meta["k_max"]
    fmt = args.timestamp_format
    logd = parse_csv(args.input, _schema(args))
    header = "case_id\tprefix_length\tlast_timestamp\tpredicted_activity\tprobability\tpredicted_timestamp"
    lines = [header]
    failed = False
    for trace in logd.traces:
        triples = generate_prefixes(trace)
        if not triples:
            continue
        try:
            enc = [encode_prefix(pre, vocab, divisors, k_max) for pre, _, _ in triples]
        except EncodingError as exc:
            failed = True
            for pre, _, _ in triples:
                lines.append(f"{trace.case_id}\t{len(pre)}\t{format_timestamp(pre[-1].timestamp, fmt)}"
                             f"\tERROR\t\t{exc}")
            continue
        X = np.stack([e.features for e in enc])
        D = np.stack([e.padded_deltas for e in enc])
        M = np.stack([e.mask for e in enc])
        probs, tpred = model.predict(X, D, M)
        for (pre, _, _), p, t in zip(triples, probs, tpred):
            k = int(p.argmax())
            last = pre[-1].timestamp
            nxt = last + int(round(float(t) * divisors.d_between))
            lines.append(f"{trace.case_id}\t{len(pre)}\t{format_timestamp(last, fmt)}"
                         f"\t{vocab.labels[k]}\t{p[k]:.6f}\t{format_timestamp(nxt, fmt)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    man.write(_manifest_path(args, args.out + ".manifest.json" if args.out else None))
    if failed:
        print("some cases contain activities unknown to the model", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "split": cmd_split,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "predict": cmd_predict,
}


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PBPMError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
