"""The training protocol: seeded mini-batch loop, validation-monitored
early stopping (no weight restore), test evaluation, and RunRecord
emission. Fully deterministic for fixed (spec, data, config, seed).
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from . import engine_version
from .autodiff import GradTape, Tensor
from .data import SplitConfig
from .layers import Adam, Mode, NonFiniteGradient, softmax_ce_loss
from .models import ModelSpec, compile_network
from .pipeline import TensorSet


@dataclass(frozen=True)
class TrainConfig:
    batchsize: int = 16
    nepochs: int = 100
    validationsplit: float = 0.25
    dropoutrate: float = 0.25
    patience: int = 10
    testsize: float = 0.25
    randstate: int = 42
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-7

    def __post_init__(self):
        if self.batchsize < 1 or self.nepochs < 1 or self.patience < 1:
            raise ValueError("batchsize, nepochs and patience must be positive")
        for name in ("validationsplit", "dropoutrate", "testsize"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")

    def split_config(self) -> SplitConfig:
        return SplitConfig(testsize=self.testsize, randstate=self.randstate,
                           validationsplit=self.validationsplit)

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        return TrainConfig(**obj)

    def config_hash(self, pipeline_id: str = "raw") -> str:
        basis = dict(self.to_json(), pipeline=pipeline_id)
        blob = json.dumps(basis, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# serialized fields that legitimately vary between identical reruns
VOLATILE_FIELDS = ("wall_time_s", "timestamp")


@dataclass(frozen=True)
class RunRecord:
    variant_id: str
    dataset_id: str
    seed: int
    run_index: int
    status: str  # ok | aborted | invalid
    test_accuracy: Optional[float]
    epochs_completed: int
    best_val_loss: Optional[float]
    wall_time_s: float
    config_hash: str
    engine_version: str
    timestamp: str
    optimizer: str
    reason: Optional[str] = None

    def to_json_obj(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_obj(obj: dict) -> "RunRecord":
        return RunRecord(**obj)

    def key(self) -> tuple:
        return (self.variant_id, self.dataset_id, self.run_index, self.config_hash)


class EarlyStopping:
    """Stop after `patience` consecutive epochs without val-loss improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.wait = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


class TrainingAborted(RuntimeError):
    pass


def _check_roles(train_set: TensorSet, val_set: TensorSet, test_set: TensorSet) -> None:
    got = (train_set.role, val_set.role, test_set.role)
    if got != ("train", "val", "test"):
        raise ValueError(
            f"split provenance mismatch: expected (train, val, test), got {got}; "
            "build splits with split_dataset so roles are tagged"
        )


def _epoch_batches(n: int, batchsize: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    chunks = [order[i : i + batchsize] for i in range(0, n, batchsize)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # batchnorm needs >= 2 samples; fold the trailing singleton in
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _validation_loss(network, val_set: TensorSet, batchsize: int = 256) -> float:
    total, n = 0.0, len(val_set)
    for i in range(0, n, batchsize):
        xb = Tensor(val_set.x[i : i + batchsize])
        logits = network.forward_logits(xb, Mode.EVAL)
        loss, _ = softmax_ce_loss(logits, val_set.labels[i : i + batchsize])
        total += loss.item() * len(val_set.labels[i : i + batchsize])
    return total / n


def evaluate(network, test_set: TensorSet) -> float:
    """Eval-mode accuracy: correct argmax predictions / n."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    pred = network.predict(test_set.x)
    return float((pred == test_set.labels).mean())


def train(spec: ModelSpec, train_set: TensorSet, val_set: TensorSet, test_set: TensorSet,
          cfg: TrainConfig, dataset_id: str, run_index: int = 0) -> RunRecord:
    """One run of the full protocol; returns an ok or aborted RunRecord."""
    _check_roles(train_set, val_set, test_set)
    started = time.perf_counter()
    seed = cfg.seed + run_index
    pipeline_id = train_set.pipeline_id

    def record(status, acc, epochs, best_val, reason=None):
        return RunRecord(
            variant_id=spec.variant_id,
            dataset_id=dataset_id,
            seed=seed,
            run_index=run_index,
            status=status,
            test_accuracy=acc,
            epochs_completed=epochs,
            best_val_loss=best_val,
            wall_time_s=round(time.perf_counter() - started, 3),
            config_hash=cfg.config_hash(pipeline_id),
            engine_version=engine_version(),
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            optimizer=f"adam(lr={cfg.lr},beta1={cfg.beta1},beta2={cfg.beta2},eps={cfg.eps_opt})",
            reason=reason,
        )

    n = len(train_set)
    if n < 2:
        return record("aborted", None, 0, None, f"training set has {n} samples")
    network = compile_network(spec, train_set.image_shape, seed=seed)
    optimizer = Adam(network.parameters(), lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.eps_opt)
    stopper = EarlyStopping(cfg.patience)
    epochs_completed = 0

    for epoch in range(1, cfg.nepochs + 1):
        for batch_idx in _epoch_batches(n, cfg.batchsize, seed, epoch):
            xb = Tensor(train_set.x[batch_idx])
            yb = train_set.labels[batch_idx]
            with GradTape() as tape:
                logits = network.forward_logits(xb, Mode.TRAIN)
                loss, _ = softmax_ce_loss(logits, yb)
                if not np.isfinite(loss.item()):
                    return record("aborted", None, epochs_completed, stopper.best
                                  if np.isfinite(stopper.best) else None,
                                  f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
            try:
                optimizer.step()
            except NonFiniteGradient as exc:
                return record("aborted", None, epochs_completed, stopper.best
                              if np.isfinite(stopper.best) else None,
                              f"{exc} at epoch {epoch}")
            optimizer.zero_grad()
        epochs_completed = epoch
        val_loss = _validation_loss(network, val_set)
        if not np.isfinite(val_loss):
            return record("aborted", None, epochs_completed, None,
                          f"non-finite validation loss at epoch {epoch}")
        if stopper.update(val_loss):
            break

    accuracy = evaluate(network, test_set)
    return record("ok", accuracy, epochs_completed, stopper.best)
