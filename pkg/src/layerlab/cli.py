"""Command-line entry point.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 run failure. Progress
goes to stderr; stdout carries machine-readable results only.
"""

import argparse
import json
import os
import sys

from .data import (
    DataFormatError,
    SubsetError,
    SubsetSpec,
    build_subset,
    load_cifar_bin,
    load_idx,
    load_llds,
    save_llds,
)
from .models import SpecError
from .mutations import generate_grid
from .orchestrator import (
    DatasetJob,
    ExperimentPlan,
    RunStore,
    StoreError,
    aggregate,
    load_plan,
    run_plan,
    trend_alignment,
)
from .pipeline import ImagePipeline, PipelineError, default_pipeline
from .reports import alignment_json, render_report
from .training import TrainConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUN = 3

WORKERS_ENV = "LAYERLAB_WORKERS"


class CliDataError(Exception):
    pass


class CliRunError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# dataset-build

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "t10k": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx_pair(directory: str, images_name: str, labels_name: str):
    for img in (images_name, images_name.replace("-idx", ".idx")):
        for lab in (labels_name, labels_name.replace("-idx", ".idx")):
            ip, lp = os.path.join(directory, img), os.path.join(directory, lab)
            if os.path.exists(ip) and os.path.exists(lp):
                return ip, lp
    return None


def _load_source(source: str, directory: str):
    import numpy as np

    from .data import Dataset

    if source in ("mnist-idx", "fmnist-idx"):
        tag = "mnist" if source == "mnist-idx" else "fmnist"
        parts = []
        for split in ("train", "t10k"):
            pair = _find_idx_pair(directory, *_IDX_NAMES[split])
            if pair:
                parts.append(load_idx(*pair, source=tag))
        if not parts:
            raise CliDataError(
                f"no IDX files found in {directory} "
                f"(expected {_IDX_NAMES['train'][0]} [+ t10k files])"
            )
        if len(parts) == 1:
            return parts[0]
        # Table-1 "All" counts pool the train and test corpora
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            1, tag, parts[0].class_names,
        )
    if source == "cifar-bin":
        batches = sorted(
            os.path.join(directory, f)
            for f in os.listdir(directory)
            if f.endswith(".bin")
        )
        if not batches:
            raise CliDataError(f"no .bin batches found in {directory}")
        return load_cifar_bin(batches)
    if source == "llds":
        path = directory
        if os.path.isdir(directory):
            candidates = sorted(f for f in os.listdir(directory) if f.endswith(".llds"))
            if len(candidates) != 1:
                raise CliDataError(
                    f"--source llds wants one .llds file, found {len(candidates)} in {directory}"
                )
            path = os.path.join(directory, candidates[0])
        return load_llds(path)
    raise CliDataError(f"unknown source {source!r}")


_PRETTY_SOURCE = {"mnist": "MNIST", "fmnist": "FMNIST", "cifar10": "Cifar10"}


def cmd_dataset_build(args) -> int:
    full = _load_source(args.source, args.dir)
    pair = args.pair.split(",")
    if len(pair) != 2:
        raise CliDataError(f"--pair wants two comma-separated classes, got {args.pair!r}")
    if args.size.lower() == "all":
        size = "all"
    elif args.size.isdigit():
        size = int(args.size)
    else:
        raise CliDataError(f"--size wants an even integer or 'all', got {args.size!r}")
    base_name = _PRETTY_SOURCE.get(full.source, full.source)
    spec = SubsetSpec(base=base_name, class_a=pair[0].strip(), class_b=pair[1].strip(),
                      sample_size=size, tag=args.tag, seed=args.seed)
    subset = build_subset(full, spec)
    sidecar = {
        "spec": {"base": spec.base, "pair": list(subset.class_names),
                 "size": size, "tag": spec.tag},
        "seed": spec.seed,
        "n": len(subset),
        "dataset_id": spec.dataset_id(),
    }
    save_llds(subset, args.out, sidecar=sidecar)
    _say(f"wrote {args.out}: n={len(subset)} classes={subset.class_names}")
    print(json.dumps({"out": args.out, "n": len(subset),
                      "classes": subset.class_names}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# grid

def cmd_grid(args) -> int:
    recipe = {"base": args.base, "ops": args.ops or [], "num_classes": args.classes,
              "schedule": args.schedule}
    grid = generate_grid(recipe)
    from .data import _atomic_write

    with _atomic_write(args.out, "w") as f:
        json.dump(grid.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    n_invalid = sum(1 for e in grid.entries if not e.valid)
    _say(f"wrote {args.out}: {len(grid.entries)} entries ({n_invalid} invalid)")
    print(json.dumps({"out": args.out, "entries": grid.variant_ids}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run

def _build_plan_from_flags(args) -> ExperimentPlan:
    from .mutations import VariantGrid

    with open(args.grid) as f:
        grid = VariantGrid.from_json(json.load(f))
    cfg = TrainConfig(seed=args.seed) if args.config is None else TrainConfig.from_json(
        json.load(open(args.config))
    )
    from .orchestrator import dataset_id_for

    datasets = []
    for path in args.data:
        subset = load_llds(path)
        if args.pipeline is not None:
            pipeline = ImagePipeline.parse(args.pipeline)
        else:
            pipeline = default_pipeline(subset.channels)
        datasets.append(DatasetJob(dataset_id_for(path), [path], pipeline))
    return ExperimentPlan(grid=grid, datasets=datasets, train_config=cfg,
                          runs_per_variant=args.runs, workers=args.workers)


def cmd_run(args) -> int:
    if args.plan:
        plan = load_plan(args.plan)
        if getattr(args, "workers_given", False):
            plan.workers = args.workers
    else:
        if not args.grid or not args.data:
            raise CliDataError("either --plan or both --grid and --data are required")
        plan = _build_plan_from_flags(args)
    store = RunStore(args.store)
    summary = run_plan(plan, store, progress=_say)
    _say(f"{summary['skipped']} skipped, {summary['trained']} trained, "
         f"{summary['invalid']} invalid, {summary['aborted']} aborted")
    print(json.dumps(summary))
    return EXIT_RUN if summary["aborted"] else EXIT_OK


# ---------------------------------------------------------------------------
# report / align

def cmd_report(args) -> int:
    store = RunStore(args.store)
    table = aggregate(store)
    paths = render_report(table, args.format, args.out, name=args.name)
    for p in paths:
        _say(f"wrote {p}")
    print(json.dumps({"files": paths}))
    return EXIT_OK


def cmd_align(args) -> int:
    try:
        report = trend_alignment(RunStore(args.store_a), RunStore(args.store_b),
                                 tau=args.tau, control=args.control)
    except ValueError as exc:
        raise CliDataError(str(exc))
    print(alignment_json(report))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    return EXIT_OK if run_all(printer=print) else EXIT_RUN


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="layerlab",
                     description="mutate small image classifiers, train at desk "
                                 "scale, compare subset trends against full runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-build", parents=[], help="materialize a two-class subset as LLDS")
    p.add_argument("--source", required=True, choices=["mnist-idx", "fmnist-idx", "cifar-bin", "llds"])
    p.add_argument("--dir", required=True, help="directory with source files (or an .llds path)")
    p.add_argument("--pair", required=True, help="two classes, comma separated (names or label ints)")
    p.add_argument("--size", required=True, help="per-pair sample count (even) or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag", default="", help="hard/easy tag recorded in the sidecar")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset_build)

    p = sub.add_parser("grid", help="generate a variant grid JSON")
    p.add_argument("--base", required=True, help="base0 | baseseq | baseres18")
    p.add_argument("--ops", nargs="*", default=[],
                   help="lolo | sare:adjacent | sare:A,B | pap:LAYER[:ARG] | "
                        "filterplacement[:NAME] | repeat:N[:dropout]")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--schedule", default="Res64to512", help="base schedule for baseres18")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("run", help="execute a grid across datasets and seeds")
    p.add_argument("--grid", help="variant grid JSON (from `layerlab grid`)")
    p.add_argument("--data", nargs="*", default=[], help="LLDS subset files")
    p.add_argument("--plan", help="plan JSON; alternative to --grid/--data")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get(WORKERS_ENV, "1")))
    p.add_argument("--store", required=True, help="JSON-lines run store (appended)")
    p.add_argument("--pipeline", default=None,
                   help="comma-separated steps, e.g. sharpen,preprocess "
                        "(default: scale01 for grayscale, preprocess for RGB)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="TrainConfig JSON file (defaults are the protocol values)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="render aggregate tables from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--format", required=True, choices=["csv", "md", "svg"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--name", default="report")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("align", help="subset-vs-full trend alignment of two stores")
    p.add_argument("--store-a", required=True)
    p.add_argument("--store-b", required=True)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--control", default=None,
                   help="control variant id for binary change flags")
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("selfcheck", help="run the numeric trust suite")
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.workers_given = any(a.startswith("--workers") for a in argv)
    try:
        return args.fn(args)
    except SpecError as exc:  # before ValueError: unknown op/family names are usage
        _say(f"error: {exc}")
        return EXIT_USAGE
    except (CliDataError, DataFormatError, SubsetError, PipelineError, StoreError,
            FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        _say(f"error: {exc}")
        return EXIT_DATA
    except CliRunError as exc:
        _say(f"error: {exc}")
        return EXIT_RUN
    except KeyboardInterrupt:
        _say("interrupted; store is consistent up to the last completed run")
        return EXIT_RUN


def entrypoint() -> None:
    sys.exit(main())
