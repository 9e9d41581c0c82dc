"""Grid execution across datasets and seeds, the append-only run store,
aggregation, fluctuation stats, and subset-vs-full trend alignment.

The store is JSON-lines, one RunRecord per line, append-only and
resumable: a (variant, dataset, run_index, config_hash) key already on
disk is never trained again. Store identity for determinism checks is the
canonical export: records sorted by key with wall-clock fields dropped.
"""

import hashlib
import json
import math
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .data import load_llds, split_dataset
from .models import SpecError, infer_shapes
from .mutations import VariantGrid
from .pipeline import ImagePipeline, run_pipeline
from .training import VOLATILE_FIELDS, RunRecord, TrainConfig, train


class StoreError(RuntimeError):
    pass


class RunStore:
    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def append(self, record: RunRecord) -> None:
        line = json.dumps(record.to_json_obj(), sort_keys=True, separators=(",", ":"))
        with self._lock:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, "a") as f:
                f.write(line + "\n")
                f.flush()
                os.fsync(f.fileno())

    def read(self) -> list:
        if not os.path.exists(self.path):
            return []
        records = []
        with open(self.path) as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for i, line in enumerate(lines):
            try:
                records.append(RunRecord.from_json_obj(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                if i == len(lines) - 1:
                    warnings.warn(f"{self.path}: discarding truncated final line")
                    continue
                raise StoreError(f"{self.path}: corrupt record on line {i + 1}: {exc}")
        return records

    def keys(self) -> set:
        return {r.key() for r in self.read()}

    def canonical_bytes(self) -> bytes:
        """Deterministic export: sorted records, volatile timing fields dropped."""
        rows = []
        for r in self.read():
            obj = r.to_json_obj()
            for f_ in VOLATILE_FIELDS:
                obj.pop(f_, None)
            rows.append(obj)
        rows.sort(key=lambda o: (o["variant_id"], o["dataset_id"], o["run_index"]))
        return json.dumps(rows, sort_keys=True, separators=(",", ":")).encode()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# plans

@dataclass
class DatasetJob:
    dataset_id: str
    paths: list  # one fixed LLDS path, or one per run_index (resample policy)
    pipeline: ImagePipeline

    def path_for_run(self, run_index: int) -> str:
        return self.paths[run_index % len(self.paths)]


@dataclass
class ExperimentPlan:
    grid: VariantGrid
    datasets: list
    train_config: TrainConfig
    runs_per_variant: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.runs_per_variant < 1:
            raise ValueError("runs_per_variant must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.datasets:
            raise ValueError("plan needs at least one dataset")


def dataset_id_for(path: str) -> str:
    """Sidecar dataset_id when present, else the filename stem."""
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            meta = json.load(f)
        if meta.get("dataset_id"):
            return meta["dataset_id"]
    return os.path.splitext(os.path.basename(path))[0]


def _dataset_job(entry, shared_pipeline: ImagePipeline, base_dir: str) -> DatasetJob:
    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    if isinstance(entry, str):
        path = resolve(entry)
        return DatasetJob(dataset_id_for(path), [path], shared_pipeline)
    pipeline = (ImagePipeline(tuple(entry["pipeline"]))
                if "pipeline" in entry else shared_pipeline)
    if "paths_per_run" in entry:
        paths = [resolve(p) for p in entry["paths_per_run"]]
    else:
        paths = [resolve(entry["path"])]
    ds_id = entry.get("id") or dataset_id_for(paths[0])
    return DatasetJob(ds_id, paths, pipeline)


def load_plan(path: str) -> ExperimentPlan:
    """Plan file: {grid_path, datasets[], pipeline[], runs_per_variant,
    train_config, workers}; relative paths resolve against the plan file."""
    with open(path) as f:
        obj = json.load(f)
    base_dir = os.path.dirname(os.path.abspath(path))
    grid_path = obj["grid_path"]
    if not os.path.isabs(grid_path):
        grid_path = os.path.join(base_dir, grid_path)
    with open(grid_path) as f:
        grid = VariantGrid.from_json(json.load(f))
    shared = ImagePipeline(tuple(obj.get("pipeline", [])))
    datasets = [_dataset_job(e, shared, base_dir) for e in obj.get("datasets", [])]
    cfg = TrainConfig.from_json(obj.get("train_config", {})) if obj.get("train_config") else TrainConfig()
    return ExperimentPlan(
        grid=grid,
        datasets=datasets,
        train_config=cfg,
        runs_per_variant=int(obj.get("runs_per_variant", 3)),
        workers=int(obj.get("workers", 1)),
    )


# ---------------------------------------------------------------------------
# execution

def _invalid_record(entry, ds: DatasetJob, cfg: TrainConfig, reason: str) -> RunRecord:
    from datetime import datetime, timezone

    from . import engine_version

    return RunRecord(
        variant_id=entry.variant_id,
        dataset_id=ds.dataset_id,
        seed=cfg.seed,
        run_index=0,
        status="invalid",
        test_accuracy=None,
        epochs_completed=0,
        best_val_loss=None,
        wall_time_s=0.0,
        config_hash=cfg.config_hash(ds.pipeline.pipeline_id()),
        engine_version=engine_version(),
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        optimizer=f"adam(lr={cfg.lr},beta1={cfg.beta1},beta2={cfg.beta2},eps={cfg.eps_opt})",
        reason=reason,
    )


def run_plan(plan: ExperimentPlan, store: RunStore,
             progress: Optional[Callable[[str], None]] = None) -> dict:
    """Train every (valid variant x dataset x run) not already in the store."""
    say = progress or (lambda msg: None)
    cfg = plan.train_config
    existing = store.keys()
    summary = {"trained": 0, "skipped": 0, "invalid": 0, "aborted": 0}

    # materialize splits once per (dataset, path); read-only under the pool
    prepared = {}
    for ds in plan.datasets:
        for path in dict.fromkeys(ds.paths):
            subset = load_llds(path)
            splits = split_dataset(subset, cfg.split_config())
            prepared[(ds.dataset_id, path)] = tuple(
                run_pipeline(part, ds.pipeline) for part in splits
            )

    tasks = []
    for ds in plan.datasets:
        chash = cfg.config_hash(ds.pipeline.pipeline_id())
        shape = prepared[(ds.dataset_id, ds.paths[0])][0].image_shape
        for entry in plan.grid.entries:
            reason = entry.invalid_reason
            if entry.valid:
                try:
                    infer_shapes(entry.spec, shape)
                except SpecError as exc:
                    reason = str(exc)
            if reason is not None:
                key = (entry.variant_id, ds.dataset_id, 0, chash)
                if key in existing:
                    summary["skipped"] += 1
                else:
                    store.append(_invalid_record(entry, ds, cfg, reason))
                    existing.add(key)
                    summary["invalid"] += 1
                    say(f"invalid  {entry.variant_id} x {ds.dataset_id}: {reason}")
                continue
            for run_index in range(plan.runs_per_variant):
                key = (entry.variant_id, ds.dataset_id, run_index, chash)
                if key in existing:
                    summary["skipped"] += 1
                    say(f"skip     {entry.variant_id} x {ds.dataset_id} run {run_index}")
                else:
                    tasks.append((entry, ds, run_index))

    lock = threading.Lock()

    def execute(task):
        entry, ds, run_index = task
        splits = prepared[(ds.dataset_id, ds.path_for_run(run_index))]
        rec = train(entry.spec, *splits, cfg, dataset_id=ds.dataset_id,
                    run_index=run_index)
        store.append(rec)
        with lock:
            summary["trained"] += 1
            if rec.status == "aborted":
                summary["aborted"] += 1
        say(f"trained  {rec.variant_id} x {rec.dataset_id} run {run_index}: "
            f"{rec.status} acc={rec.test_accuracy} epochs={rec.epochs_completed}")
        return rec

    if plan.workers == 1:
        for task in tasks:
            execute(task)
    else:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            futures = [pool.submit(execute, t) for t in tasks]
            try:
                for f in futures:
                    f.result()
            except BaseException:
                # drain semantics: in-flight runs finish, queued ones don't
                for f in futures:
                    f.cancel()
                raise
    return summary


# ---------------------------------------------------------------------------
# aggregation

@dataclass(frozen=True)
class CellStats:
    variant_id: str
    dataset_id: str
    runs: tuple  # accuracies ordered by run_index
    mean: float
    min: float
    max: float


@dataclass
class AggregateTable:
    cells: list
    best: dict  # dataset_id -> set of best variant_ids (ties flagged jointly)
    missing: list  # (variant_id, dataset_id) pairs with no ok runs

    def cell(self, variant_id: str, dataset_id: str) -> Optional[CellStats]:
        for c in self.cells:
            if c.variant_id == variant_id and c.dataset_id == dataset_id:
                return c
        return None

    def datasets(self) -> list:
        return sorted({c.dataset_id for c in self.cells})


def aggregate(store: RunStore, datasets: Optional[list] = None) -> AggregateTable:
    by_cell: dict = {}
    seen_pairs = set()
    for r in store.read():
        if datasets is not None and r.dataset_id not in datasets:
            continue
        seen_pairs.add((r.variant_id, r.dataset_id))
        if r.status == "ok" and r.test_accuracy is not None:
            by_cell.setdefault((r.variant_id, r.dataset_id), []).append(
                (r.run_index, r.test_accuracy)
            )
    cells = []
    for (vid, did), runs in sorted(by_cell.items()):
        accs = tuple(a for _, a in sorted(runs))
        cells.append(CellStats(vid, did, accs, mean=float(np.mean(accs)),
                               min=min(accs), max=max(accs)))
    best: dict = {}
    for did in {c.dataset_id for c in cells}:
        group = [c for c in cells if c.dataset_id == did]
        top = max(c.mean for c in group)
        best[did] = {c.variant_id for c in group if c.mean == top}
    missing = sorted(p for p in seen_pairs if p not in {(c.variant_id, c.dataset_id) for c in cells})
    return AggregateTable(cells, best, missing)


@dataclass(frozen=True)
class FluctuationStats:
    variant_id: str
    dataset_id: str
    values: tuple
    seeds: tuple
    range: float
    std: float  # sample convention, n-1 denominator


def fluctuation(store: RunStore, variant_id: str, dataset_id: str) -> FluctuationStats:
    rows = [
        (r.run_index, r.test_accuracy, r.seed)
        for r in store.read()
        if r.variant_id == variant_id and r.dataset_id == dataset_id
        and r.status == "ok" and r.test_accuracy is not None
    ]
    if len(rows) < 2:
        raise ValueError(
            f"fluctuation needs >= 2 runs for {variant_id} x {dataset_id}, found {len(rows)}"
        )
    rows.sort()
    values = tuple(v for _, v, _ in rows)
    seeds = tuple(s for _, _, s in rows)
    return FluctuationStats(
        variant_id, dataset_id, values, seeds,
        range=max(values) - min(values),
        std=float(np.std(values, ddof=1)),
    )


# ---------------------------------------------------------------------------
# trend alignment

@dataclass
class AlignmentReport:
    variants: list
    mean_a: dict
    mean_b: dict
    pairwise_agreement: float
    top1_agreement: bool
    best_a: list
    best_b: list
    tau: float
    binary: Optional[list] = None  # rows: {variant, changed_a, changed_b, match}

    def to_json_obj(self) -> dict:
        out = {
            "variants": self.variants,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "pairwise_agreement": self.pairwise_agreement,
            "top1_agreement": self.top1_agreement,
            "best_a": self.best_a,
            "best_b": self.best_b,
            "tau": self.tau,
        }
        if self.binary is not None:
            out["binary"] = self.binary
        return out


def _variant_means(store: RunStore) -> dict:
    acc: dict = {}
    for r in store.read():
        if r.status == "ok" and r.test_accuracy is not None:
            acc.setdefault(r.variant_id, []).append(r.test_accuracy)
    return {v: float(np.mean(xs)) for v, xs in acc.items()}


def trend_alignment(store_a: RunStore, store_b: RunStore, tau: float = 0.01,
                    control: Optional[str] = None) -> AlignmentReport:
    """Pairwise-order concordance of variant means across two conditions."""
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    means_a = _variant_means(store_a)
    means_b = _variant_means(store_b)
    shared = sorted(set(means_a) & set(means_b))
    if not shared:
        raise ValueError("stores share no variants; nothing to align")
    pairs = list(combinations(shared, 2))
    if pairs:
        score = 0.0
        for u, v in pairs:
            sa = math.copysign(1, means_a[u] - means_a[v]) if means_a[u] != means_a[v] else 0
            sb = math.copysign(1, means_b[u] - means_b[v]) if means_b[u] != means_b[v] else 0
            if sa == 0 or sb == 0:
                score += 0.5
            elif sa == sb:
                score += 1.0
        agreement = score / len(pairs)
    else:
        agreement = 1.0
    top_a = max(means_a[v] for v in shared)
    top_b = max(means_b[v] for v in shared)
    best_a = sorted(v for v in shared if means_a[v] == top_a)
    best_b = sorted(v for v in shared if means_b[v] == top_b)

    binary = None
    if control is not None:
        if control not in means_a or control not in means_b:
            raise ValueError(f"control variant {control!r} missing from one of the stores")
        binary = []
        for v in shared:
            if v == control:
                continue
            ca = abs(means_a[v] - means_a[control]) > tau
            cb = abs(means_b[v] - means_b[control]) > tau
            binary.append({"variant": v, "changed_a": ca, "changed_b": cb,
                           "match": ca == cb})

    return AlignmentReport(
        variants=shared,
        mean_a={v: means_a[v] for v in shared},
        mean_b={v: means_b[v] for v in shared},
        pairwise_agreement=agreement,
        top1_agreement=best_a == best_b,
        best_a=best_a,
        best_b=best_b,
        tau=tau,
        binary=binary,
    )
