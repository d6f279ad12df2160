"""Command-line entry point: gen, featurize, train, encode, estimate, identify, tune.

Settings resolve in three layers: built-in defaults, then an optional
``--config`` file of key=value lines, then command-line flags (``--set
key=value`` or the dedicated flags). Exit codes: 0 success, 1 validation
failure, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, fields

log = logging.getLogger("stylemetry")

SEED_ENV = "STYLEMETRY_SEED"
THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(ValueError):
    """Validation failure: exit code 1."""


@dataclass
class RunConfig:
    # network and training
    gru1_units: int = 256
    gru2_units: int = 256
    bottleneck_units: int = 50
    dropout_p: float = 0.5
    lam: float = 1e-5
    mode: str = "arnet"
    batch_size: int = 2560
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    standardize: bool = True
    # data
    segment_len: int = 256
    frame_len: int = 4
    max_gap: int = 3
    val_fraction: float = 0.2
    # estimation
    groups: int = 10
    repeats: int = 25
    preference: float | None = None
    trips_per_driver: int | None = None
    damping: float = 0.5
    max_iter: int = 200
    convergence_iter: int = 15
    grid_size: int = 25
    layer: str | None = None


_HELP = {
    "gru1_units": "hidden units of the first GRU",
    "gru2_units": "hidden units of the second GRU",
    "bottleneck_units": "code size k",
    "dropout_p": "dropout probability on the shared feature",
    "lam": "l1 weight on the code",
    "mode": "arnet | ronet | conet",
    "batch_size": "mini-batch size",
    "lr": "ADADELTA learning rate",
    "rho": "ADADELTA decay",
    "eps": "ADADELTA epsilon",
    "max_epochs": "epoch cap",
    "patience": "epochs without validation improvement before stopping",
    "seed": f"master seed (falls back to ${SEED_ENV})",
    "standardize": "per-row input standardization",
    "segment_len": "segment length L_s in seconds",
    "frame_len": "frame length L_f in seconds",
    "max_gap": "largest timestamp gap bridged by interpolation",
    "val_fraction": "held-out trip fraction per driver",
    "groups": "largest estimation group size",
    "repeats": "random groups per size",
    "preference": "AP preference (default: median similarity of the vectors)",
    "trips_per_driver": "cap on trips per sampled driver (default: all)",
    "damping": "AP damping",
    "max_iter": "AP iteration cap",
    "convergence_iter": "AP stable-iteration count for convergence",
    "grid_size": "points in the automatic preference grid",
    "layer": "trip2vec layer: code | shared (default: code, shared for conet)",
}

DESK = dict(gru1_units=32, gru2_units=32, bottleneck_units=16, batch_size=256)


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise UsageError(f"unknown config key {key!r}")
    t = types[key]
    if raw.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("bool"):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None


def parse_pairs(lines, source: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = _coerce(k, v)
        except UsageError as exc:
            raise UsageError(f"{source}:{lineno}: {exc}") from None
    return out


def resolve_config(args) -> RunConfig:
    values = {}
    if os.environ.get(SEED_ENV):
        values["seed"] = _coerce("seed", os.environ[SEED_ENV])
    if getattr(args, "preset", None) == "desk":
        values.update(DESK)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_pairs(fh, args.config))
    values.update(parse_pairs(args.set or [], "--set"))
    for key in ("mode", "seed", "max_epochs", "preference", "layer"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return dataclasses.replace(RunConfig(), **values)


def _arnet_config(rc: RunConfig):
    from . import arnet

    names = {f.name for f in fields(arnet.ArnetConfig)}
    return arnet.ArnetConfig(**{k: v for k, v in dataclasses.asdict(rc).items() if k in names})


def _featurize_config(rc: RunConfig):
    from .featurize import FeaturizeConfig

    return FeaturizeConfig(rc.segment_len, rc.frame_len)


def _read(reader, path: str):
    """Call reader(path), prefixing parse errors with the file name."""
    try:
        return reader(path)
    except OSError:
        raise
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args, rc: RunConfig) -> int:
    from .experiments.synth import generate_synthetic
    from .ingest import write_trips

    if args.seconds < 3:
        raise UsageError(f"--seconds must be at least 3, got {args.seconds}")
    if args.seconds < rc.segment_len:
        log.warning("--seconds %d is below segment_len %d: trips yield zero segments", args.seconds, rc.segment_len)
    trips = generate_synthetic(args.drivers, args.trips, args.seconds, seed=rc.seed, first_driver=args.first_driver)
    write_trips(trips, args.out)
    print(f"drivers={args.drivers} trips={len(trips)} points={sum(len(t) for t in trips)}")
    return 0


def cmd_featurize(args, rc: RunConfig) -> int:
    from .featurize import featurize_trips, write_feature_file
    from .ingest import read_trips, validate_trips

    trips = _read(lambda p: validate_trips(read_trips(p), rc.max_gap), args.input)
    mats = featurize_trips(trips, _featurize_config(rc))
    if not mats:
        log.warning("%s: no trip is long enough for one segment", args.input)
    write_feature_file(mats, args.out)
    print(f"trips={len(trips)} segments={len(mats)}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    from . import arnet
    from .experiments.benchmarks import split_trips
    from .featurize import read_feature_file, write_feature_file

    mats = _read(read_feature_file, args.features)
    if not mats:
        raise UsageError(f"{args.features}: no feature matrices")
    train_set, held_out = split_trips(mats, rc.val_fraction, rc.seed)
    model, history = arnet.fit(train_set, held_out, _arnet_config(rc))
    arnet.save_model(model, args.out)
    _write_text(args.history or args.out + ".history.csv", history.to_csv())
    if args.heldout:
        write_feature_file(held_out, args.heldout)
    best = history.records[history.best_epoch - 1] if history.best_epoch else None
    if best is not None:
        print(f"epochs={len(history.records)} best_epoch={best.epoch} val_accuracy={best.val_accuracy:.4f} "
              f"val_J_r={best.val_J_r:.5f}")
    else:
        print("epochs=0")
    return 0


def cmd_encode(args, rc: RunConfig) -> int:
    from . import arnet, trip2vec
    from .featurize import read_feature_file

    model = _read(arnet.load_model, args.model)
    vectors = trip2vec.encode_trips(model, _read(read_feature_file, args.features), rc.layer)
    trip2vec.write_trip_vectors(vectors, args.out)
    print(f"trips={len(vectors)} dim={len(vectors[0].values) if vectors else 0}")
    return 0


def _default_preference(vectors) -> float:
    from .experiments.benchmarks import preference_grid

    return float(preference_grid(vectors, n=1, low=1.0, high=1.0)[0])


def cmd_estimate(args, rc: RunConfig) -> int:
    from .experiments.benchmarks import estimation_benchmark
    from .trip2vec import read_trip_vectors

    vectors = _read(read_trip_vectors, args.vectors)
    if not vectors:
        raise UsageError(f"{args.vectors}: no trip vectors")
    pref = rc.preference if rc.preference is not None else _default_preference(vectors)
    report = estimation_benchmark(
        vectors, pref, rc.groups, rc.repeats, rc.seed, rc.trips_per_driver,
        damping=rc.damping, max_iter=rc.max_iter, convergence_iter=rc.convergence_iter,
    )
    _write_text(args.out, report.to_table() + "\n" + report.to_keyvalue())
    if args.runs:
        _write_text(args.runs, report.runs_csv())
    print(report.summary_line())
    return 0


def cmd_identify(args, rc: RunConfig) -> int:
    from . import arnet
    from .experiments.benchmarks import run_identification_benchmark
    from .featurize import read_feature_file

    model = _read(arnet.load_model, args.model)
    if not model.config.uses_classifier:
        raise UsageError(f"{args.model}: ronet model has no classifier head")
    report = run_identification_benchmark(model, _read(read_feature_file, args.features))
    _write_text(args.out, report.to_table() + "\n" + report.to_keyvalue())
    print(report.summary_line())
    return 0


def cmd_tune(args, rc: RunConfig) -> int:
    from .experiments.benchmarks import preference_grid, tune_preference
    from .trip2vec import read_trip_vectors

    vectors = _read(read_trip_vectors, args.vectors)
    if not vectors:
        raise UsageError(f"{args.vectors}: no trip vectors")
    if args.grid:
        try:
            grid = [float(v) for v in args.grid.split(",")]
        except ValueError:
            raise UsageError(f"--grid: cannot parse {args.grid!r}") from None
    else:
        grid = list(preference_grid(vectors, rc.grid_size))
    best, curve = tune_preference(
        vectors, grid, rc.groups, rc.repeats, rc.seed, trips_per_driver=rc.trips_per_driver,
        damping=rc.damping, max_iter=rc.max_iter, convergence_iter=rc.convergence_iter,
    )
    lines = ["preference,mean_abs_error"] + [f"{p!r},{float(e)!r}" for p, e in zip(grid, curve)]
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"best preference={float(best)!r} mean_abs_error={min(curve):.4f}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "encode": cmd_encode,
    "estimate": cmd_estimate,
    "identify": cmd_identify,
    "tune": cmd_tune,
}


def _config_epilog() -> str:
    rows = [f"  {f.name}={f.default!r}  {_HELP[f.name]}" for f in fields(RunConfig)]
    return "config keys (--set key=value or --config file):\n" + "\n".join(rows)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value config file (default: none)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--preset", choices=["full", "desk"], default="full",
                        help="full: 256/256 GRUs, k=50, batch 2560; desk: 32/32, k=16, batch 256 (default: full)")
    common.add_argument("--mode", choices=["arnet", "ronet", "conet"], help="network mode (default: arnet)")
    common.add_argument("--seed", type=int, help=f"master seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=int, metavar="N", help="cap on BLAS worker threads (default: library default)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress (default: off)")

    parser = argparse.ArgumentParser(prog="stylemetry", description=__doc__, epilog=_config_epilog(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              epilog=_config_epilog(), formatter_class=fmt)

    p = add("gen", "generate synthetic trips")
    p.add_argument("--drivers", type=int, required=True, help="number of drivers")
    p.add_argument("--trips", type=int, required=True, help="trips per driver")
    p.add_argument("--seconds", type=int, required=True, help="trip length in seconds")
    p.add_argument("--first-driver", type=int, default=0, help="index of the first driver (default: 0)")
    p.add_argument("--out", required=True, help="output trip CSV")

    p = add("featurize", "validate trips and write feature matrices")
    p.add_argument("--in", dest="input", required=True, help="input trip CSV")
    p.add_argument("--out", required=True, help="output feature file")

    p = add("train", "train a network on a feature file")
    p.add_argument("--features", required=True, help="input feature file")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--epochs", dest="max_epochs", type=int, help="epoch cap (default: 200)")
    p.add_argument("--history", help="per-epoch CSV (default: <out>.history.csv)")
    p.add_argument("--heldout", help="write the held-out trips' features here (default: not written)")

    p = add("encode", "write trip vectors")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--features", required=True, help="input feature file")
    p.add_argument("--layer", choices=["code", "shared"], help="layer to pool (default: by mode)")
    p.add_argument("--out", required=True, help="output trip-vector CSV")

    p = add("estimate", "driver-count estimation benchmark on trip vectors")
    p.add_argument("--vectors", required=True, help="trip-vector CSV of unseen drivers")
    p.add_argument("--preference", type=float, help="AP preference (default: median similarity)")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--runs", help="per-run CSV (default: not written)")

    p = add("identify", "driver identification on held-out trips")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--features", required=True, help="held-out feature file")
    p.add_argument("--out", required=True, help="report file")

    p = add("tune", "scan AP preferences on a tuning pool")
    p.add_argument("--vectors", required=True, help="trip-vector CSV of tuning drivers")
    p.add_argument("--grid", help="comma-separated preferences (default: automatic grid)")
    p.add_argument("--out", required=True, help="curve CSV")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 1
        for var in THREAD_ENV:
            os.environ[var] = str(args.threads)
    try:
        rc = resolve_config(args)
        log.info("config: %s", " ".join(f"{k}={v!r}" for k, v in dataclasses.asdict(rc).items()))
        return COMMANDS[args.command](args, rc)
    except OSError as exc:
        name = exc.filename or ""
        print(f"error: {name}: {exc.strerror or exc}" if name else f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
