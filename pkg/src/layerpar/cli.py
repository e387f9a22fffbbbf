"""Command line: ``layerpar train|grad-check|bench|eval --config FILE [--key value ...]``.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 I/O or data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import logging
import os
import sys
import time
import typing

import numpy as np

from . import adjoint, mgrit
from .config import RunConfig, mnist_config, peaks_config, toy_config
from .data import DataFormatError, generate_peaks, load_csv, load_mnist, make_toy
from .mgrit import ConfigurationError
from .network import DimensionError
from .optimizer import (
    HISTORY_COLUMNS,
    NumericalError,
    assemble_reduced_gradient,
    gradient_check,
    train,
    training_batch,
    validation_accuracy,
)
from .serialization import load_controls, save_controls

log = logging.getLogger("layerpar")

LOG_DIR_ENV = "LAYERPAR_LOG_DIR"
BENCH_COLUMNS = ("N", "workers", "serial_seconds", "parallel_seconds",
                 "mgrit_state_iters", "mgrit_adjoint_iters")
PRESETS = {"peaks": peaks_config, "mnist": mnist_config, "toy": toy_config,
           "csv": lambda **kw: RunConfig(**{"test_case": "csv", **kw})}
COMMAND_DEFAULT_CASE = {"train": "peaks", "grad-check": "toy", "bench": "peaks", "eval": "peaks"}

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class BenchGuardError(RuntimeError):
    """MGRIT and serial solutions disagree by more than the bench tolerance allows."""


# --------------------------------------------------------------------------
# configuration


_FIELD_TYPES = typing.get_type_hints(RunConfig)


def _coerce(key, text):
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is list:
            return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs[key.replace("-", "_")] = value
    return pairs


def parse_overrides(tokens):
    pairs = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens):
            value = tokens[i + 1]
            i += 2
        else:
            raise ConfigurationError(f"option {tok} needs a value")
        pairs[key.replace("-", "_")] = value
    return pairs


def resolve_config(command, file_pairs, overrides):
    pairs = {**file_pairs, **overrides}
    values = {k: _coerce(k, v) for k, v in pairs.items()}
    case = values.get("test_case", COMMAND_DEFAULT_CASE[command])
    if case not in PRESETS:
        raise ConfigurationError(f"unknown test case {case!r}")
    try:
        return PRESETS[case](**values)
    except TypeError as err:
        raise ConfigurationError(str(err)) from None


def format_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def make_run_dir(cfg, command):
    base = os.environ.get(LOG_DIR_ENV) or cfg.log_dir or "runs"
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = os.path.join(base, f"{command}-{stamp}")
    os.makedirs(path, exist_ok=False)
    with open(os.path.join(path, "config.resolved"), "w") as fh:
        fh.write(format_config(cfg))
    return path


# --------------------------------------------------------------------------
# data


def load_dataset(cfg):
    if cfg.test_case == "peaks":
        return generate_peaks(cfg.samples, cfg.seed, val_fraction=cfg.val_fraction)
    if cfg.test_case == "toy":
        return make_toy(cfg.samples, seed=cfg.seed, val_fraction=cfg.val_fraction)
    if cfg.test_case == "mnist":
        if not cfg.images_path or not cfg.labels_path:
            raise ConfigurationError("mnist needs images_path and labels_path")
        return load_mnist(cfg.images_path, cfg.labels_path, cfg.limit, cfg.seed, cfg.val_fraction)
    if not cfg.csv_path:
        raise ConfigurationError("csv needs csv_path")
    return load_csv(cfg.csv_path, cfg.csv_classes, cfg.csv_header, cfg.standardize,
                    cfg.seed, cfg.val_fraction)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg, out=sys.stdout):
    dataset = load_dataset(cfg)
    run_dir = make_run_dir(cfg, "train")
    state = train(cfg, dataset)
    write_csv(os.path.join(run_dir, "history.csv"), HISTORY_COLUMNS, state.history)
    save_controls(os.path.join(run_dir, "controls.bin"), state.net, state.controls)
    Y, C = training_batch(cfg, dataset)
    Yv, Cv = dataset.validation()
    train_acc = validation_accuracy(state.net, state.controls, Y, C)
    val_acc = validation_accuracy(state.net, state.controls, Yv, Cv)
    print(f"run directory: {run_dir}", file=out)
    print(f"iterations: {len(state.history)}  stop: {state.stop_reason}", file=out)
    print(f"train accuracy: {train_acc:.4f}", file=out)
    print(f"validation accuracy: {val_acc:.4f}", file=out)
    return EXIT_OK


def cmd_grad_check(cfg, out=sys.stdout):
    dataset = load_dataset(cfg)
    run_dir = make_run_dir(cfg, "grad-check")
    report = gradient_check(cfg, dataset, seed=cfg.seed, corrupt=cfg.debug_corrupt_vjp)
    verdict = "PASS" if report.passed else "FAIL"
    text = f"{verdict}: max relative error {report.max_rel_error:.3e} over {report.n_params} parameters"
    with open(os.path.join(run_dir, "grad_check.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text, file=out)
    return EXIT_OK if report.passed else EXIT_FAIL


def _rel_diff(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def _best_time(fn, repeats):
    best, result = np.inf, None
    for _ in range(repeats):
        t = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t)
    return best, result


def bench_rows(cfg, dataset):
    """Time one objective-plus-gradient evaluation, serial versus MGRIT, per (N, workers)."""
    Y, C = training_batch(cfg, dataset)
    reg = cfg.regularization
    rows = []
    for N in cfg.bench_layers:
        net = cfg.network(dataset.n_features, dataset.n_classes, N)
        hier = cfg.hierarchy(N)
        rng = np.random.default_rng(cfg.seed)
        controls = net.init_controls(rng, cfg.init_std, cfg.opening_std)
        controls.W[:] = rng.standard_normal(controls.W.shape)

        def serial():
            U = mgrit.serial_propagate(net, controls, Y)
            system = adjoint.AdjointSystem(net, controls, U, hier, C)
            Ubar = adjoint.serial_backprop(system)
            return U, Ubar, assemble_reduced_gradient(net, controls, U, Ubar, Y, C, reg)

        serial_seconds, (U_ref, Ubar_ref, _) = _best_time(serial, cfg.bench_repeats)

        for workers in cfg.bench_workers:
            def parallel():
                prop = mgrit.ForwardPropagator(net, controls, hier, net.opening_state(Y, controls))
                st = mgrit.mgrit_solve(None, prop, cfg.bench_tol, cfg.mgrit_max_iter,
                                       cfg.relaxation, workers)
                system = adjoint.AdjointSystem(net, controls, st.trajectory, hier, C)
                ad = adjoint.adjoint_mgrit_solve(None, system, cfg.bench_tol, cfg.mgrit_max_iter,
                                                 cfg.relaxation, workers)
                assemble_reduced_gradient(net, controls, st.trajectory, ad.trajectory, Y, C, reg)
                return st, ad

            parallel_seconds, (st, ad) = _best_time(parallel, cfg.bench_repeats)
            for name, got, ref in (("state", st.trajectory, U_ref), ("adjoint", ad.trajectory, Ubar_ref)):
                err = _rel_diff(got, ref)
                if not err <= 10 * cfg.bench_tol:
                    raise BenchGuardError(
                        f"N={N} workers={workers}: {name} MGRIT differs from serial by {err:.3e}")
            rows.append(dict(N=N, workers=workers, serial_seconds=serial_seconds,
                             parallel_seconds=parallel_seconds,
                             mgrit_state_iters=st.iterations, mgrit_adjoint_iters=ad.iterations))
    return rows


def cmd_bench(cfg, out=sys.stdout):
    if 1 not in cfg.bench_workers:
        cfg = cfg.replace(bench_workers=[1] + list(cfg.bench_workers))
    dataset = load_dataset(cfg)
    run_dir = make_run_dir(cfg, "bench")
    rows = bench_rows(cfg, dataset)
    path = os.path.join(run_dir, "bench.csv")
    write_csv(path, BENCH_COLUMNS, rows)
    print(f"run directory: {run_dir}", file=out)
    print(",".join(BENCH_COLUMNS), file=out)
    for r in rows:
        print(f"{r['N']},{r['workers']},{r['serial_seconds']:.4f},{r['parallel_seconds']:.4f},"
              f"{r['mgrit_state_iters']},{r['mgrit_adjoint_iters']}", file=out)
    return EXIT_OK


def cmd_eval(cfg, out=sys.stdout):
    if not cfg.weights:
        raise ConfigurationError("eval needs --weights PATH")
    dataset = load_dataset(cfg)
    net = cfg.network(dataset.n_features, dataset.n_classes)
    controls = load_controls(cfg.weights, net)
    Yv, Cv = dataset.validation()
    acc = validation_accuracy(net, controls, Yv, Cv)
    print(f"validation accuracy: {acc:.4f}", file=out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "grad-check": cmd_grad_check, "bench": cmd_bench, "eval": cmd_eval}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="layerpar", description="Layer-parallel residual network training.",
        epilog="Any configuration key can be overridden with --key value.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    args, rest = build_parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_pairs = read_config_file(args.config) if args.config else {}
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, file_pairs, parse_overrides(rest))
        return COMMANDS[args.command](cfg, out)
    except (ConfigurationError, DimensionError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure at iteration {err.iteration}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except BenchGuardError as err:
        print(f"bench guard failed: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
