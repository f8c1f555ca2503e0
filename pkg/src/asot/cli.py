"""
Command-line front end.

    asot train     fit an anchor model and write its artifact
    asot dist      pairwise distance matrix (CSV) with a JSON sidecar
    asot rmse      compare two distance matrices
    asot ablate-k  sweep the number of anchors
    asot bench     timing comparison across methods

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import numpy as np  # noqa: E402

from . import pipeline  # noqa: E402
from .anchor import load_anchor_space, save_anchor_space  # noqa: E402
from .errors import AsotError, InvalidArgumentError, NumericalError  # noqa: E402

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_flags(p):
    """Flags mirroring :class:`pipeline.RunConfig`; unset flags defer to the config file."""
    p.add_argument("--config", help="JSON or TOML file supplying any of the flags below")
    p.add_argument("--dataset", help="TUDataset name, blobs:opts or dataset cache (.bin)")
    p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--k", type=int, help="number of anchors (default: max node count)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-graphs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--fit-on", choices=("train", "all"))
    p.add_argument("--scale", choices=("maxabs", "none"))
    p.add_argument("--gin-iters", type=int)
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--data-root", help=f"dataset directory (default: ${pipeline.DATA_ROOT_ENV} or ./data)")
    p.add_argument("--out", help="output path")
    p.add_argument("--anchors", help="anchor artifact written by 'train'")


def read_config_file(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a table/object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def build_config(args, **overrides):
    values = {"threads": os.cpu_count() or 1}
    if args.config:
        try:
            values.update(read_config_file(args.config))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    for f in fields(pipeline.RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    values.update(overrides)
    try:
        return pipeline.RunConfig.from_mapping(values)
    except (InvalidArgumentError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_matrix(path, values):
    np.savetxt(path, values, fmt="%.12g", delimiter=",")


def read_matrix(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_meta(path, record):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load(cfg):
    return pipeline.prepare_dataset(pipeline.load_dataset(cfg.dataset, pipeline.data_root(cfg)), cfg)


def _need_learning(cfg):
    if cfg.family is None:
        raise UsageError(f"method {cfg.method!r} does not learn anchors")


def cmd_train(args):
    cfg = build_config(args)
    _need_learning(cfg)
    out = Path(cfg.out or f"{cfg.method}-anchors")
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load(cfg)
    fitted = pipeline.fit_anchors(dataset, cfg)
    artifact = out / "anchors.json"
    save_anchor_space(fitted.space, artifact, fitted.model_record())
    trace_path = out / "loss_trace.csv"
    np.savetxt(trace_path, np.column_stack([np.arange(len(fitted.trace)), fitted.trace]).reshape(-1, 2),
               fmt=["%d", "%.12g"], delimiter=",")
    write_meta(out / "meta.json", {
        "command": "train",
        "config": cfg.to_dict(),
        "train_time": fitted.train_time,
        "artifacts": {p.name: _sha256(p) for p in (artifact, trace_path)},
    })
    print(f"wrote {artifact} (k={fitted.space.k}, train {fitted.train_time:.3f}s)")
    return EXIT_OK


def cmd_dist(args):
    cfg = build_config(args)
    fitted = None
    if cfg.family is not None:
        if not cfg.anchors:
            raise UsageError(f"method {cfg.method!r} needs --anchors (run 'train' first)")
        if not Path(cfg.anchors).exists():
            raise FileNotFoundError(f"anchor artifact {cfg.anchors} does not exist")
        space, record = load_anchor_space(cfg.anchors)
        fitted = pipeline.FittedAnchors.from_artifact(space, record)
        expected = "k" if fitted.family == "k" else fitted.family
        if expected != cfg.family:
            raise UsageError(f"artifact holds a {fitted.family!r} model, method is {cfg.method!r}")
    dataset = _load(cfg)
    dm, dist_time = pipeline.distance_matrix(dataset, cfg, fitted)
    out = Path(cfg.out or f"{cfg.method}.csv")
    write_matrix(out, dm.to_dense(np.nan))
    train_time = fitted.train_time if fitted else 0.0
    meta = {
        "command": "dist",
        "config": cfg.to_dict(),
        "n": len(dataset),
        "train_time": train_time,
        "dist_time": dist_time,
        "total_time": train_time + dist_time,
        "failed_pairs": [list(p) for p in dm.errors],
        "artifacts": {out.name: _sha256(out)},
    }
    if cfg.anchors:
        meta["artifacts"][Path(cfg.anchors).name] = _sha256(cfg.anchors)
    write_meta(str(out) + ".json", meta)
    print(f"wrote {out} ({len(dataset)} x {len(dataset)}, distances {dist_time:.3f}s)")
    return EXIT_NUMERIC if dm.errors else EXIT_OK


def cmd_rmse(args):
    approx, truth = read_matrix(args.approx), read_matrix(args.truth)
    if approx.shape != truth.shape:
        raise UsageError(f"shape mismatch: {approx.shape} vs {truth.shape}")
    report = pipeline.evaluate(approx, truth)
    record = {
        "rmse": report.rmse,
        "mean_abs_error": report.mean_abs_error,
        "max_abs_error": report.max_abs_error,
        "n_pairs": report.n_pairs,
        "artifacts": {str(args.approx): _sha256(args.approx), str(args.truth): _sha256(args.truth)},
    }
    for side in (args.approx, args.truth):
        sidecar = Path(str(side) + ".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            key = "approx" if side == args.approx else "truth"
            record[f"{key}_train_time"] = meta.get("train_time", 0.0)
            record[f"{key}_dist_time"] = meta.get("dist_time", 0.0)
    if args.out:
        write_meta(args.out, record)
    print(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


def _int_list(text):
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return values


def cmd_ablate_k(args):
    cfg = build_config(args)
    _need_learning(cfg)
    dataset = _load(cfg)
    truth = pipeline.distance_matrix(dataset, pipeline.RunConfig(**{**cfg.to_dict(), "method": "ot-emd"}))[0]
    truth = truth.to_dense(np.nan)
    rows, failures = [], {}
    previous = None
    for k in args.k_list:
        try:
            run_cfg = pipeline.RunConfig(**{**cfg.to_dict(), "k": k})
            init = None
            if cfg.family == "k" and args.nested and previous is not None and previous.space.k <= k:
                init = previous.space
            fitted = pipeline.fit_anchors(dataset, run_cfg, k=k, init=init)
            previous = fitted
            report, *_ = pipeline.run(run_cfg, dataset, truth, fitted)
            rows.append((k, report.rmse, report.train_time, report.dist_time))
        except AsotError as exc:
            failures[str(k)] = f"{type(exc).__name__}: {exc}"
            rows.append((k, float("nan"), float("nan"), float("nan")))
        print(f"k={rows[-1][0]} rmse={rows[-1][1]:.6g} train={rows[-1][2]:.3f}s dist={rows[-1][3]:.3f}s")
    out = Path(cfg.out or f"ablate-{cfg.method}.csv")
    with open(out, "w") as fh:
        for k, r, tt, dt in rows:
            fh.write(f"{k},{r:.12g},{tt:.12g},{dt:.12g}\n")
    write_meta(str(out) + ".json", {
        "command": "ablate-k",
        "config": cfg.to_dict(),
        "k_list": args.k_list,
        "nested": args.nested,
        "columns": ["k", "rmse", "train_time", "dist_time"],
        "failures": failures,
        "artifacts": {out.name: _sha256(out)},
    })
    return EXIT_OK


def cmd_bench(args):
    cfg = build_config(args)
    unknown = [m for m in args.methods if m not in pipeline.METHODS]
    if unknown:
        raise UsageError(f"unknown methods {unknown}; expected some of {pipeline.METHODS}")
    dataset = _load(cfg)
    exact_cfg = pipeline.RunConfig(**{**cfg.to_dict(), "method": "ot-emd"})
    dm, exact_time = pipeline.distance_matrix(dataset, exact_cfg)
    truth = dm.to_dense(np.nan)
    rows = [("ot-emd", 0.0, exact_time, 0.0)]
    for method in args.methods:
        if method == "ot-emd":
            continue
        run_cfg = pipeline.RunConfig(**{**cfg.to_dict(), "method": method})
        report, *_ = pipeline.run(run_cfg, dataset, truth)
        rows.append((method, report.train_time, report.dist_time, report.rmse))
    reference = {m: dt for m, _, dt, _ in rows}
    base = reference.get("eot")
    out = Path(cfg.out or "bench.csv")
    with open(out, "w") as fh:
        for method, tt, dt, r in rows:
            ratio = dt / base if base else float("nan")
            fh.write(f"{method},{tt:.12g},{dt:.12g},{r:.12g},{ratio:.12g}\n")
            print(f"{method:10s} train {tt:8.3f}s  dist {dt:8.3f}s  rmse {r:.4g}  dist/eot {ratio:.3g}")
    write_meta(str(out) + ".json", {
        "command": "bench",
        "config": cfg.to_dict(),
        "methods": args.methods,
        "columns": ["method", "train_time", "dist_time", "rmse", "dist_time_over_eot"],
        "artifacts": {out.name: _sha256(out)},
    })
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="asot", description="Anchor-space optimal transport toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit anchors for asot-*/easot-* methods")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dist", help="pairwise distance matrix")
    _run_flags(p)
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("rmse", help="RMSE between two distance matrices")
    p.add_argument("approx")
    p.add_argument("truth")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_rmse)

    p = sub.add_parser("ablate-k", help="sweep the number of anchors")
    _run_flags(p)
    p.add_argument("--k-list", type=_int_list, required=True, help="comma-separated k values")
    p.add_argument("--nested", action="store_true", help="warm start each k-means fit from the previous k")
    p.set_defaults(func=cmd_ablate_k)

    p = sub.add_parser("bench", help="timing comparison across methods")
    _run_flags(p)
    p.add_argument("--methods", type=lambda s: s.split(","), default=["eot", "bds-eot", "asot-k", "easot-k"],
                   help="comma-separated methods (default: eot,bds-eot,asot-k,easot-k)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"asot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"asot: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AsotError, OSError, ValueError) as exc:
        print(f"asot: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
