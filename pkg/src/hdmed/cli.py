"""Command-line interface: ``hdmed <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical
failure (collapsed component, degenerate input).
"""
import argparse
import os
import sys

import numpy as np

from . import __version__
from .dictionary_io import (
    CompressedDictionary,
    DictionaryStore,
    SyntheticSpec,
    as_store,
    compress,
    generate_synthetic,
    load_model,
    load_signals,
    save_model,
)
from .exceptions import CollapseError, DegenerateInputError, DimensionError, FormatError, HDMEDError
from .matching import METRICS, full_match, mae, match_compressed, read_match_table
from .online_em import LearningRateSchedule
from .projection import reconstruction_rmse
from .selection import fit_model, select_k

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _log(msg):
    print(msg, file=sys.stderr)


def _need_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return path


def _need_outdir(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _k_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return values


def _write_table(path, header, rows, delimiter="\t"):
    lines = [delimiter.join(header)] + [delimiter.join(str(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _add_fit_options(p):
    p.add_argument("--family", choices=("gaussian", "student"), default="gaussian")
    p.add_argument("--batch", type=_positive_int, default=2048, help="mini-batch size (rows)")
    p.add_argument("--kappa", type=float, default=0.6, help="learning-rate exponent, in (0.5, 1]")
    p.add_argument("--i0", type=float, default=2.0, help="learning-rate offset")
    p.add_argument("--passes", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-rows", type=_positive_int, default=10000, help="subsample size for initialisation")
    p.add_argument("--sensitivity", type=float, default=1.0, help="knee detector sensitivity")
    p.add_argument("--d-max", type=_positive_int, default=None, help="cap on intrinsic dimensions")
    p.add_argument("--on-collapse", choices=("raise", "reseed"), default="raise")
    p.add_argument("--no-shuffle", action="store_true", help="visit dictionary rows in storage order")


def _fit_kwargs(args):
    from .online_em import InitSpec

    return dict(
        family=args.family,
        init_spec=InitSpec(rows=args.init_rows, sensitivity=args.sensitivity, d_max=args.d_max),
        seed=args.seed,
        batch_size=args.batch,
        passes=args.passes,
        schedule=LearningRateSchedule(args.kappa, args.i0),
        on_collapse=args.on_collapse,
        shuffle=not args.no_shuffle,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="hdmed", description="High-dimensional mixture compression and dictionary matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="threads for numerical kernels (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic dictionary from a TOML spec")
    p.add_argument("--spec", required=True, help="TOML file with M, noise_sd, seed, kind and [[params]] tables")
    p.add_argument("--out", required=True, help="output dictionary (.hdmd)")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")

    p = sub.add_parser("fit", help="fit a mixture to a dictionary")
    p.add_argument("--dict", required=True, help="dictionary (.hdmd or .csv)")
    p.add_argument("--k", type=_positive_int, required=True, help="number of components")
    _add_fit_options(p)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--report", default=None, help="write the fit report table here as well")

    p = sub.add_parser("select", help="BIC sweep over the number of components")
    p.add_argument("--dict", required=True)
    p.add_argument("--k-list", type=_k_list, required=True, help="comma-separated K values, e.g. 2,4,8")
    _add_fit_options(p)
    p.add_argument("--out", default=None, help="BIC table (default: standard output)")

    p = sub.add_parser("compress", help="cluster-wise reduction of a dictionary")
    p.add_argument("--dict", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="compressed dictionary (.npz)")
    p.add_argument("--normalize", action="store_true", help="l2-normalise signals before reduction")

    p = sub.add_parser("match", help="match queries against a compressed dictionary")
    p.add_argument("--compressed", required=True)
    p.add_argument("--queries", required=True, help="query signals (.hdmd, .csv or .npy)")
    p.add_argument("--out", required=True, help="match table")
    p.add_argument("--top-p", type=_positive_int, default=1, help="search the p most probable clusters")
    p.add_argument("--metric", choices=METRICS, default="reduced")

    p = sub.add_parser("full-match", help="exhaustive matching against the full dictionary")
    p.add_argument("--dict", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("eval", help="parameter MAE of match tables and reconstruction RMSE")
    p.add_argument("--matched", action="append", default=[], help="match table; give once with --ref or twice")
    p.add_argument("--ref", default=None, help="reference parameters (.hdmd, .csv with t_* columns or .npy)")
    p.add_argument("--dict", default=None, help="dictionary for the reconstruction RMSE")
    p.add_argument("--model", default=None, help="model for the reconstruction RMSE")
    p.add_argument("--out", default=None, help="table output (default: standard output)")

    p = sub.add_parser("info", help="describe a dictionary, model or compressed dictionary")
    p.add_argument("path", help="file to describe")
    return parser


def cmd_gen(args):
    _need_file(args.spec)
    _need_outdir(args.out)
    spec = SyntheticSpec.from_toml(args.spec)
    store = generate_synthetic(spec, args.out, dtype=args.dtype)
    _log(f"wrote {store.N} x {store.M} signals with {store.L} parameters to {args.out}")


def cmd_fit(args):
    _need_file(args.dict)
    _need_outdir(args.out)
    if args.report:
        _need_outdir(args.report)
    store = as_store(args.dict)
    model, report = fit_model(store, args.k, **_fit_kwargs(args))
    save_model(args.out, model)
    text = report.to_text()
    sys.stderr.write(text)
    for step, event in report.events:
        _log(f"event at step {step}: {event}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    _log(f"dims {list(map(int, model.dims))} weights {np.round(model.weights, 4).tolist()}")


def cmd_select(args):
    _need_file(args.dict)
    if args.out:
        _need_outdir(args.out)
    store = as_store(args.dict)
    result = select_k(store, args.k_list, **_fit_kwargs(args))
    text = result.to_text()
    text += f"# minimum\t{result.best_K}\n# elbow\t{result.elbow_K}\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_compress(args):
    _need_file(args.dict)
    _need_file(args.model)
    _need_outdir(args.out)
    cd = compress(as_store(args.dict), load_model(args.model), normalize=args.normalize)
    cd.save(args.out)
    _log(f"clusters {cd.counts.tolist()} compression ratio {cd.compression_ratio():.3f}")


def _queries(path):
    signals, _ = load_signals(_need_file(path))
    return signals


def cmd_match(args):
    _need_file(args.compressed)
    _need_outdir(args.out)
    cd = CompressedDictionary.load(args.compressed)
    result = match_compressed(cd, _queries(args.queries), top_p=args.top_p, metric=args.metric)
    result.write(args.out)
    _log(f"matched {len(result)} queries, {int(result.fallback.sum())} fallbacks, "
         f"{result.madds} search multiply-adds")


def cmd_full_match(args):
    _need_file(args.dict)
    _need_outdir(args.out)
    result = full_match(as_store(args.dict), _queries(args.queries), normalize=args.normalize)
    result.write(args.out)
    _log(f"matched {len(result)} queries, {result.madds} multiply-adds")


def _ref_params(path):
    _need_file(path)
    if path.endswith(".npy"):
        return np.atleast_2d(np.load(path).T).T
    _, params = load_signals(path)
    if params is None or params.shape[1] == 0:
        raise FormatError(f"{path}: no parameter columns")
    return params


def cmd_eval(args):
    if args.out:
        _need_outdir(args.out)
    rows = []
    if args.matched:
        if len(args.matched) == 2 and args.ref is None:
            a, b = (read_match_table(_need_file(p)).params for p in args.matched)
            label = "matched_vs_matched"
        elif len(args.matched) == 1 and args.ref is not None:
            a, b = read_match_table(_need_file(args.matched[0])).params, _ref_params(args.ref)
            label = "matched_vs_ref"
        else:
            raise UsageError("eval needs --matched twice, or --matched once with --ref")
        for j, v in enumerate(mae(a, b)):
            rows.append((label, f"mae_t_{j}", repr(float(v))))
    if args.dict or args.model:
        if not (args.dict and args.model):
            raise UsageError("reconstruction RMSE needs both --dict and --model")
        store = as_store(_need_file(args.dict))
        rmse = reconstruction_rmse(load_model(_need_file(args.model)), store)
        rows.append(("reconstruction", "rmse", repr(float(rmse))))
    if not rows:
        raise UsageError("nothing to evaluate")
    _write_table(args.out, ("comparison", "metric", "value"), rows)


def _dims_histogram(dims):
    values, counts = np.unique(np.asarray(dims), return_counts=True)
    return [(f"dim_{int(v)}", int(c)) for v, c in zip(values, counts)]


def cmd_info(args):
    path = _need_file(args.path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    rows = []
    if magic == b"HDMD":
        store = DictionaryStore(path)
        rows += [("kind", "dictionary"), ("N", store.N), ("M", store.M), ("L", store.L), ("dtype", store.dtype.name)]
    elif magic == b"HDMM":
        model = load_model(path)
        rows += [("kind", "model"), ("family", model.family), ("K", model.K), ("M", model.M)]
        rows += [(f"weight_{k}", repr(float(w))) for k, w in enumerate(model.weights)]
        rows += _dims_histogram(model.dims)
        rows.append(("mean_dim", repr(float(np.mean(model.dims)))))
    elif magic[:2] == b"PK":
        cd = CompressedDictionary.load(path)
        model = cd.model
        rows += [("kind", "compressed"), ("family", model.family), ("K", model.K), ("M", model.M), ("N", cd.N)]
        rows += [(f"count_{k}", int(c)) for k, c in enumerate(cd.counts)]
        rows += _dims_histogram(model.dims)
        rows.append(("compression_ratio", repr(float(cd.compression_ratio()))))
    else:
        raise FormatError(f"{path}: unrecognised file type")
    _write_table(None, ("field", "value"), rows)


COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "select": cmd_select,
    "compress": cmd_compress,
    "match": cmd_match,
    "full-match": cmd_full_match,
    "eval": cmd_eval,
    "info": cmd_info,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args)
    except UsageError as err:
        _log(f"usage error: {err}")
        return EXIT_USAGE
    except (CollapseError, DegenerateInputError) as err:
        _log(f"numerical error: {err}")
        return EXIT_NUMERIC
    except (FormatError, DimensionError) as err:
        _log(f"data error: {err}")
        return EXIT_DATA
    except (OSError, ValueError, HDMEDError) as err:
        _log(f"data error: {err}")
        return EXIT_DATA
    return EXIT_OK


run = main


if __name__ == "__main__":
    sys.exit(main())
