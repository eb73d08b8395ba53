"""Command line front end: ``ivimdc simulate|train|fit|sweep|gridsearch|correlate``.

Every flag can also be given in a JSON file passed with ``--config``; keys
are the flag names with dashes replaced by underscores and flags given on
the command line win.  Each run writes a ``<output>.json`` provenance
sidecar next to its primary output.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, evaluation, fitting, io, network
from .errors import (
    ConfigError,
    DegenerateSignalError,
    FormatError,
    IvimError,
    MissingLabelsError,
    NumericFailureError,
    ShapeError,
)
from .model import BValueSchedule, SignalCurve, ivim_model
from .simulate import (
    HIGH_BVALUES,
    LOW_BVALUES,
    ParamRanges,
    SimDatasetConfig,
    generate_dataset,
    subsample_schedule,
)

logger = logging.getLogger("ivimdc")

OUTPUT_DIR_ENV = "IVIMDC_OUTPUT_DIR"
IO_EXIT_CODE = 12

FIT_COLUMNS = ["index", "D", "f", "Dstar", "s0", "residual", "converged", "iterations"]


# -- argument types -----------------------------------------------------------

def _float_list(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _range(text):
    values = _float_list(text)
    if len(values) != 2:
        raise argparse.ArgumentTypeError(f"expected 'min,max', got {text!r}")
    return values


# -- parser -------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="JSON file with default values for any flag")
    p.add_argument("--output-dir", metavar="DIR",
                   help=f"directory for outputs given as bare names (default: ${OUTPUT_DIR_ENV} or .)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes for independent jobs; results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_simulation(p, with_count=True):
    if with_count:
        p.add_argument("--count", type=int, default=1000, help="number of curves (default: 1000)")
    p.add_argument("--snr", type=float, default=10.0,
                   help="s0 / sigma of the Rician noise; 'inf' for noiseless (default: 10)")
    p.add_argument("--factor", type=int, default=1,
                   help="sampling factor k: keep every k-th low b-value (default: 1)")
    p.add_argument("--low-bvalues", type=_float_list, default=list(LOW_BVALUES),
                   help="comma-separated low b-values (default: 0,15,...,175)")
    p.add_argument("--high-bvalues", type=_float_list, default=list(HIGH_BVALUES),
                   help="comma-separated high b-values (default: 200,400,600,800)")
    p.add_argument("--schedule", metavar="FILE",
                   help="text file with one b-value per line; overrides --factor and the b-value lists")
    defaults = ParamRanges()
    p.add_argument("--D-range", type=_range, default=[defaults.D_min, defaults.D_max],
                   help="uniform range for D in mm^2/s (default: %(default)s)")
    p.add_argument("--f-range", type=_range, default=[defaults.f_min, defaults.f_max],
                   help="uniform range for f (default: %(default)s)")
    p.add_argument("--Dstar-range", type=_range, default=[defaults.Dstar_min, defaults.Dstar_max],
                   help="uniform range for D* in mm^2/s (default: %(default)s)")


def _add_training(p, with_mode=True):
    defaults = network.TrainingConfig()
    lw = network.LossWeights()
    if with_mode:
        p.add_argument("--mode", choices=network.MODES, default=defaults.mode,
                       help="training objective (default: %(default)s)")
    p.add_argument("--learning-rate", type=float, default=defaults.learning_rate,
                   help="Adam learning rate (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=defaults.batch_size,
                   help="mini-batch size (default: %(default)s)")
    p.add_argument("--validation-fraction", type=float, default=defaults.validation_fraction,
                   help="fraction of curves held out for validation (default: %(default)s)")
    p.add_argument("--patience", type=int, default=defaults.patience_epochs,
                   help="epochs without validation improvement before stopping (default: %(default)s)")
    p.add_argument("--max-epochs", type=int, default=defaults.max_epochs,
                   help="hard cap on training epochs (default: %(default)s)")
    p.add_argument("--alpha-D", type=float, default=lw.alpha_D, help="weight of the D error term")
    p.add_argument("--alpha-f", type=float, default=lw.alpha_f, help="weight of the f error term")
    p.add_argument("--alpha-Dstar", type=float, default=lw.alpha_Dstar, help="weight of the D* error term")
    p.add_argument("--alpha-dc", type=float, default=lw.alpha_dc, help="weight of the data-consistency term")
    p.add_argument("--hidden-layers", type=int, default=3, help="number of hidden layers (default: 3)")
    p.add_argument("--hidden-width", type=int, default=None,
                   help="hidden layer width (default: number of b-values)")
    p.add_argument("--predict-s0", action="store_true", help="add s0 as a fourth network output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivimdc",
        description="IVIM parameter estimation: simulation, least-squares fitting and "
                    "neural estimators trained with supervised and data-consistency losses.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="generate a labelled noisy dataset CSV")
    _add_common(p)
    _add_simulation(p)
    p.add_argument("--s0", type=float, default=1.0, help="simulated b=0 signal (default: 1)")
    p.add_argument("--out", default="dataset.csv", help="output CSV (default: dataset.csv)")

    p = sub.add_parser("train", help="train a neural estimator on a dataset CSV")
    _add_common(p)
    _add_training(p)
    p.add_argument("--data", required=False, help="training dataset CSV")
    p.add_argument("--out", default="weights.bin", help="output weight file (default: weights.bin)")

    p = sub.add_parser("fit", help="estimate IVIM parameters for every curve in a CSV")
    _add_common(p)
    p.add_argument("--data", help="curve CSV (labels, if present, are ignored)")
    p.add_argument("--method", choices=("seg", "lsq", "net"), default="lsq",
                   help="segmented fit, full bounded least squares, or neural network (default: lsq)")
    p.add_argument("--weights", help="network weight file (required for --method net)")
    p.add_argument("--threshold", type=float, default=fitting.SPLIT_BVALUE,
                   help="b-value split of the segmented fit (default: %(default)s)")
    p.add_argument("--out", default="params.csv", help="output CSV (default: params.csv)")

    p = sub.add_parser("sweep", help="NRMSE of each method as a function of the sampling factor")
    _add_common(p)
    _add_simulation(p, with_count=False)
    _add_training(p, with_mode=False)
    p.add_argument("--factors", type=_int_list, default=[1, 2, 3, 4, 5, 6],
                   help="comma-separated sampling factors (default: 1,...,6)")
    p.add_argument("--methods", type=_str_list, default=["super-dc", "ivimnet"],
                   help=f"comma-separated subset of {','.join(evaluation.METHODS)}")
    p.add_argument("--train-count", type=int, default=100_000, help="training curves (default: 100000)")
    p.add_argument("--test-count", type=int, default=1000, help="test curves (default: 1000)")
    p.add_argument("--out", default="sweep.csv", help="output CSV (default: sweep.csv)")

    p = sub.add_parser("gridsearch", help="one-dimensional grid search over a loss weight")
    _add_common(p)
    _add_simulation(p, with_count=False)
    _add_training(p)
    p.add_argument("--axis", choices=evaluation.AXES, required=False, help="loss weight to vary")
    p.add_argument("--grid", type=_float_list, required=False, help="comma-separated values to try")
    p.add_argument("--data", help="training dataset CSV (default: simulate one)")
    p.add_argument("--eval", dest="eval_data", help="labelled evaluation CSV (default: simulate one)")
    p.add_argument("--train-count", type=int, default=10_000,
                   help="training curves when simulating (default: 10000)")
    p.add_argument("--eval-count", type=int, default=1000,
                   help="evaluation curves when simulating (default: 1000)")
    p.add_argument("--out", default="gridsearch.csv", help="output CSV (default: gridsearch.csv)")

    p = sub.add_parser("correlate", help="per-stage Pearson r between fitted f and a covariate")
    _add_common(p)
    p.add_argument("--fits", help="CSV with a case/id/index column and an f column")
    p.add_argument("--covariate", help="CSV with a case/id/index column and one value column")
    p.add_argument("--covariate-column", help="value column of the covariate CSV (default: first non-id)")
    p.add_argument("--split", type=float, default=evaluation.STAGE_SPLIT_WEEKS,
                   help="covariate value separating the two stages (default: %(default)s)")
    p.add_argument("--out", default="correlation.csv", help="output CSV (default: correlation.csv)")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {unknown}")
        # values from the file go through the same type conversion as flags
        for action in sub._actions:
            if action.dest in cfg and action.type is not None and isinstance(cfg[action.dest], str):
                cfg[action.dest] = action.type(cfg[action.dest])
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


# -- helpers --------------------------------------------------------------------

def _output_path(args, name) -> Path:
    path = Path(name)
    if path.is_absolute() or path.parent != Path("."):
        return path
    base = args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    return Path(base) / path


def _tmp(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.with_name(path.name + ".partial")


def _provenance(args, argv, inputs=(), **extra) -> dict:
    settings = {k: v for k, v in vars(args).items() if k not in ("threads", "verbose")}
    return {
        "tool": "ivimdc",
        "version": __version__,
        "command": args.command,
        "argv": list(argv),
        "settings": settings,
        "inputs": {str(p): io.file_digest(p) for p in inputs if p},
        **extra,
    }


def _write_sidecar(path: Path, payload: dict):
    io.write_json(payload, path.with_name(path.name + ".json"))


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, []):
            raise ConfigError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def _check_threads(args):
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")


def _schedule(args):
    if getattr(args, "schedule", None):
        return io.read_schedule(args.schedule)
    return subsample_schedule(args.low_bvalues, args.high_bvalues, args.factor)


def _ranges(args) -> ParamRanges:
    return ParamRanges(args.D_range[0], args.D_range[1], args.f_range[0], args.f_range[1],
                       args.Dstar_range[0], args.Dstar_range[1])


def _training_config(args, mode=None) -> network.TrainingConfig:
    return network.TrainingConfig(
        mode=mode or args.mode,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        validation_fraction=args.validation_fraction,
        patience_epochs=args.patience,
        max_epochs=args.max_epochs,
        seed=args.seed,
        loss_weights=network.LossWeights(args.alpha_D, args.alpha_f, args.alpha_Dstar, args.alpha_dc),
    )


def _net_kwargs(args) -> dict:
    return {"hidden_layers": args.hidden_layers, "hidden_width": args.hidden_width,
            "predict_s0": args.predict_s0}


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(args, argv):
    try:
        config = SimDatasetConfig(count=args.count, schedule=_schedule(args), snr=args.snr,
                                  seed=args.seed, ranges=_ranges(args), s0=args.s0)
    except IvimError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = generate_dataset(config)
    out = _output_path(args, args.out)
    tmp = _tmp(out)
    io.write_dataset(dataset, tmp)
    os.replace(tmp, out)
    _write_sidecar(out, _provenance(args, argv, simulation=config.to_dict()))
    print(f"wrote {len(dataset)} curves to {out}")
    print(f"schedule: {','.join(io.bvalue_header(config.schedule))}")
    print(f"snr: {config.snr:g}  seed: {config.seed}")
    return 0


def cmd_train(args, argv):
    _require(args, "data")
    dataset, ids = io.read_dataset(args.data)
    tc = _training_config(args)
    if tc.mode != "ivimnet" and dataset.labels is None:
        raise MissingLabelsError(f"{args.data}: mode {tc.mode!r} needs D,f,Dstar label columns")
    net_config = network.NetworkConfig(input_size=len(dataset.schedule), **_net_kwargs(args))
    out = _output_path(args, args.out)
    history_path = out.with_name(out.stem + "_history.csv")
    try:
        weights, history = network.train(dataset, net_config, tc)
    except NumericFailureError as exc:
        if exc.history is not None:
            _write_history(exc.history, history_path)
        raise
    tmp = _tmp(out)
    network.save_weights(weights, tmp)
    os.replace(tmp, out)
    _write_history(history, history_path)
    _write_sidecar(out, _provenance(
        args, argv, inputs=[args.data], training=tc.to_dict(), network=net_config.to_dict(),
        schedule=dataset.schedule.tolist(),
        result={"epochs": len(history.val_loss), "best_epoch": history.best_epoch,
                "best_val_loss": history.best_val_loss, "stopped_early": history.stopped_early},
    ))
    print(f"trained {tc.mode} network for {len(history.val_loss)} epochs "
          f"(best epoch {history.best_epoch}, validation loss {history.best_val_loss:.6g})")
    print(f"wrote {out}")
    return 0


def _write_history(history, path):
    rows = [{"epoch": i, "train_loss": t, "val_loss": v}
            for i, (t, v) in enumerate(zip(history.train_loss, history.val_loss))]
    io.write_rows(path, ["epoch", "train_loss", "val_loss"], rows)


def _fit_row(job):
    index, samples, bvalues, method, threshold = job
    curve = SignalCurve(samples, BValueSchedule(bvalues))
    try:
        if method == "seg":
            res = fitting.fit_segmented(curve, threshold)
        else:
            res = fitting.fit_lsq(curve, b_threshold=threshold)
    except IvimError as exc:
        return {"index": index, "D": math.nan, "f": math.nan, "Dstar": math.nan, "s0": math.nan,
                "residual": math.nan, "converged": False, "iterations": 0,
                "error": f"{type(exc).__name__}: {exc}", "exit_code": exc.exit_code}
    return {"index": index, "D": res.params.D, "f": res.params.f, "Dstar": res.params.Dstar,
            "s0": res.s0_hat, "residual": res.residual_norm, "converged": res.converged,
            "iterations": res.iterations, "error": ""}


def cmd_fit(args, argv):
    _require(args, "data")
    _check_threads(args)
    dataset, ids = io.read_dataset(args.data)
    index = ids if ids is not None else list(range(len(dataset)))
    bvalues = dataset.schedule.values
    if args.method == "net":
        _require(args, "weights")
        weights = network.load_weights(args.weights)
        if weights.config.input_size != len(dataset.schedule):
            raise ShapeError(
                f"weights expect {weights.config.input_size} b-values, "
                f"{args.data} has {len(dataset.schedule)}"
            )
        s_first = dataset.signals[:, 0]
        rows = []
        ok = s_first > 0
        pred = np.full((len(dataset), weights.config.n_outputs), np.nan)
        if ok.any():
            pred[ok] = network.predict_batch(weights, dataset.signals[ok] / s_first[ok, None])
        for i in range(len(dataset)):
            if not ok[i]:
                rows.append({"index": index[i], "D": math.nan, "f": math.nan, "Dstar": math.nan,
                             "s0": math.nan, "residual": math.nan, "converged": False,
                             "iterations": 0, "error": "DegenerateSignalError: b=0 sample is 0",
                             "exit_code": DegenerateSignalError.exit_code})
                continue
            D, f, Dstar = pred[i, :3]
            s0 = s_first[i] * (pred[i, 3] if weights.config.predict_s0 else 1.0)
            r = ivim_model(bvalues, D, f, Dstar, s0) - dataset.signals[i]
            rows.append({"index": index[i], "D": D, "f": f, "Dstar": Dstar, "s0": s0,
                         "residual": float(r @ r), "converged": True, "iterations": 0, "error": ""})
    else:
        jobs = [(index[i], dataset.signals[i], bvalues, args.method, args.threshold)
                for i in range(len(dataset))]
        if args.threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                rows = list(pool.map(_fit_row, jobs, chunksize=64))
        else:
            rows = [_fit_row(job) for job in jobs]
    out = _output_path(args, args.out)
    tmp = _tmp(out)
    io.write_rows(tmp, FIT_COLUMNS, rows)
    failures = [{"index": r["index"], "error": r["error"]} for r in rows if r["error"]]
    if len(failures) == len(rows):
        tmp.unlink()
        first = rows[0]
        raise FitFailure(f"no curve could be fitted; first failure: {first['error']}",
                         first["exit_code"])
    os.replace(tmp, out)
    _write_sidecar(out, _provenance(args, argv, inputs=[args.data, args.weights],
                                    failures=failures))
    print(f"fitted {len(rows) - len(failures)}/{len(rows)} curves with {args.method}; wrote {out}")
    return 0


class FitFailure(IvimError):
    """Every row of a batch fit failed; exits with the first row's error code."""

    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def cmd_sweep(args, argv):
    _check_threads(args)
    config = evaluation.SweepConfig(
        factors=tuple(args.factors), methods=tuple(args.methods), test_count=args.test_count,
        train_count=args.train_count, snr=args.snr, seed=args.seed, ranges=_ranges(args),
        low_bvalues=tuple(args.low_bvalues), high_bvalues=tuple(args.high_bvalues),
        train=_training_config(args, mode="super-dc"), net=_net_kwargs(args),
    )
    result = evaluation.sampling_factor_sweep(config, threads=args.threads)
    out = _output_path(args, args.out)
    tmp = _tmp(out)
    io.write_rows(tmp, ["method", "factor", "parameter", "nrmse"], result.rows)
    os.replace(tmp, out)
    failed = [r for r in result.rows if r["error"]]
    _write_sidecar(out, _provenance(args, argv, sweep=result.provenance,
                                    failed_cells=[{k: r[k] for k in ("method", "factor", "parameter", "error")}
                                                  for r in failed]))
    for r in result.rows:
        print(f"{r['method']:>10s}  k={r['factor']}  {r['parameter']:<6s} {r['nrmse']:.4g}")
    print(f"wrote {out}")
    return 0


def cmd_gridsearch(args, argv):
    _require(args, "axis", "grid")
    base = _training_config(args)
    if args.data:
        train_set, _ = io.read_dataset(args.data)
    else:
        train_set = generate_dataset(SimDatasetConfig(
            count=args.train_count, schedule=_schedule(args), snr=args.snr,
            seed=evaluation.derive_seed(args.seed, 0), ranges=_ranges(args)))
    if args.eval_data:
        eval_set, _ = io.read_dataset(args.eval_data)
    else:
        eval_set = generate_dataset(SimDatasetConfig(
            count=args.eval_count, schedule=train_set.schedule, snr=args.snr,
            seed=evaluation.derive_seed(args.seed, 1), ranges=_ranges(args)))
    if eval_set.labels is None:
        raise MissingLabelsError("grid search needs a labelled evaluation set")
    net_config = network.NetworkConfig(input_size=len(train_set.schedule), **_net_kwargs(args))
    result = evaluation.grid_search(base, args.axis, args.grid, train_set, eval_set, net_config)
    out = _output_path(args, args.out)
    tmp = _tmp(out)
    rows = [{"value": r["value"], "score": r["score"], "D": r.get("D", math.nan),
             "f": r.get("f", math.nan), "Dstar": r.get("Dstar", math.nan), "error": r["error"]}
            for r in result.table]
    io.write_rows(tmp, ["value", "score", "D", "f", "Dstar", "error"], rows)
    os.replace(tmp, out)
    _write_sidecar(out, _provenance(args, argv, inputs=[args.data, args.eval_data],
                                    axis=args.axis, best=result.best))
    if result.best is None:
        print(f"every grid cell failed; see {out}")
        return NumericFailureError.exit_code
    print(f"best {args.axis} = {io.format_number(result.best)}")
    print(f"wrote {out}")
    return 0


def _read_keyed(path, value_column=None):
    header, rows = io.read_table(path)
    id_col = next((c for c in io.ID_COLUMNS if c in header), None)
    if id_col is None:
        raise FormatError(f"{path}: needs one of the id columns {io.ID_COLUMNS}")
    if value_column is None:
        candidates = [h for h in header if h != id_col]
        if not candidates:
            raise FormatError(f"{path}: no value column")
        value_column = candidates[0]
    if value_column not in header:
        raise FormatError(f"{path}: no column {value_column!r}")
    table = {}
    for row in rows:
        key = row[id_col]
        if key in table:
            raise FormatError(f"{path}: duplicate id {key!r}")
        try:
            table[key] = float(row[value_column])
        except ValueError:
            raise FormatError(f"{path}: non-numeric {value_column} for id {key!r}") from None
    return table


def cmd_correlate(args, argv):
    _require(args, "fits", "covariate")
    fits = _read_keyed(args.fits, "f")
    cov = _read_keyed(args.covariate, args.covariate_column)
    stages = evaluation.correlate_fraction_with_covariate(fits, cov, args.split)
    out = _output_path(args, args.out)
    tmp = _tmp(out)
    io.write_rows(tmp, ["stage", "n", "r"], [asdict(s) for s in stages])
    os.replace(tmp, out)
    _write_sidecar(out, _provenance(args, argv, inputs=[args.fits, args.covariate]))
    for s in stages:
        print(f"{s.stage:<12s} n={s.n:<4d} r={s.r:.4f}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "gridsearch": cmd_gridsearch,
    "correlate": cmd_correlate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except IvimError as exc:
        print(f"ivimdc: error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except IvimError as exc:
        print(f"ivimdc: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ivimdc: I/O error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
