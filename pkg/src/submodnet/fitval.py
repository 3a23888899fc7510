"""Fitting set-function models to (set, value) pairs."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffgraph import Adam, AdamConfig, Node, NonFiniteGradient, backward, const, mean, no_grad
from .planted import SetValueDataset, SetValueInstance
from .setfn import FeatureTable, SetFnModel, calibrate, forward


class Divergence(FloatingPointError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class RegressionConfig:
    epochs: int = 200
    batch_size: int = 66
    lr: float = 2e-3
    weight_decay: float = 1e-4
    rho: float = 1.0
    select_last: int = 10
    recalibrate: bool = True
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine": decay to lr_floor * lr by the last epoch
    lr_floor: float = 0.05

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0 or self.select_last < 1:
            raise ValueError("need epochs >= 0 and select_last >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def epoch_lr(config: RegressionConfig, epoch: int) -> float:
    if config.lr_schedule == "constant" or config.epochs <= 1:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr * (config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class Batch:
    zsum: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.zsum = np.atleast_2d(np.asarray(self.zsum, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if len(self.y) == 0:
            raise ValueError("empty batch")
        if len(self.y) != len(self.zsum):
            raise ValueError("feature sums and targets differ in length")

    @classmethod
    def from_instances(cls, table: FeatureTable, instances: Sequence[SetValueInstance]) -> "Batch":
        return cls(table.zsums(inst.S for inst in instances), [inst.y for inst in instances])

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "Batch":
        return Batch(self.zsum[idx], self.y[idx])


def _check(out: Node) -> Node:
    if not np.all(np.isfinite(out.value)):
        raise Divergence("non-finite model output")
    return out


def loss_plain(model: SetFnModel, batch: Batch) -> Node:
    """Mean squared error over the batch."""
    pred = _check(forward(model, batch.zsum))
    return mean((pred - batch.y) ** 2)


def consistency(model: SetFnModel, inputs: dict) -> Node:
    """Mean squared relative residual between each derivative network and the
    tail integral it stands for, at the recorded shape inputs.

    Residuals are divided by the batch mean of |derivative| so the penalty
    does not depend on the units of the learned curve.  Only the tail side
    is trained by this term: the derivative network (the one that is
    deployed) sees it as a fixed target, and the inputs are fixed sample
    points, so no gradient reaches the modular weights either.
    """
    total = None
    for name, xs in inputs.items():
        fn = model.shapes[name]
        for x in xs:
            for d, t in fn.consistency_pairs(model.store, Node(x.value)):
                unit = float(np.mean(np.abs(d.value))) + 1e-12
                term = mean(((t - d.value) * (1.0 / unit)) ** 2)
                total = term if total is None else total + term
    return const(0.0) if total is None else total


def loss_decoupled(model: SetFnModel, batch: Batch, rho: float = 1.0) -> Node:
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if any(fn.mode != "decoupled" for fn in model.shapes.values()):
        raise ValueError("loss_decoupled needs decoupled shape functions")
    if rho == 0:
        return loss_plain(model, batch)
    inputs: dict = {}
    pred = _check(forward(model, batch.zsum, inputs))
    return mean((pred - batch.y) ** 2) + rho * consistency(model, inputs)


def training_loss(model: SetFnModel, batch: Batch, rho: float) -> Node:
    decoupled = model.shapes and all(fn.mode == "decoupled" for fn in model.shapes.values())
    return loss_decoupled(model, batch, rho) if decoupled else loss_plain(model, batch)


def predict(model: SetFnModel, zsum: np.ndarray, chunk: int = 4096) -> np.ndarray:
    zsum = np.atleast_2d(zsum)
    with no_grad():
        parts = [forward(model, zsum[i:i + chunk]).value for i in range(0, len(zsum), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0)


def batch_rmse(model: SetFnModel, batch: Batch) -> float:
    return float(np.sqrt(np.mean((predict(model, batch.zsum) - batch.y) ** 2)))


@dataclass
class TrainResult:
    model: SetFnModel
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    diverged: bool = False
    test_rmse: float | None = None
    optimizer_state: dict | None = None


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # one substream per epoch so a resumed run reshuffles identically
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_regression(
    model: SetFnModel,
    dataset: SetValueDataset,
    table: FeatureTable,
    config: RegressionConfig,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    on_epoch=None,
) -> TrainResult:
    """Adam on the (regularized) squared error.

    Returns the checkpoint with the best dev RMSE among the last
    ``select_last`` epochs.  On divergence the last good epoch is returned.
    """
    folds = {k: Batch.from_instances(table, v) for k, v in dataset.folds().items() if v}
    train = folds["train"]
    opt = Adam(model.store, model.trainable(), AdamConfig(lr=config.lr, weight_decay=config.weight_decay))
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    calibrate(model, train.zsum, table.Z)
    result = TrainResult(model=model.copy())
    best_dev = math.inf
    last_good = model.to_json()
    first_kept = max(config.epochs - config.select_last, 0)

    for epoch in range(start_epoch, config.epochs):
        if config.recalibrate:
            calibrate(model, train.zsum, table.Z)
        order = _epoch_order(config.seed, epoch, len(train))
        opt.config.lr = epoch_lr(config, epoch)
        losses = []
        try:
            for i in range(0, len(order), config.batch_size):
                model.store.zero_grad()
                loss = training_loss(model, train.take(order[i:i + config.batch_size]), config.rho)
                if not np.isfinite(loss.value):
                    raise Divergence(f"non-finite loss at epoch {epoch}")
                backward(loss)
                opt.step(model.store.gradients(opt.names))
                losses.append(float(loss.value))
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "train_rmse": batch_rmse(model, train)}
            if "dev" in folds:
                row["dev_rmse"] = batch_rmse(model, folds["dev"])
            if not all(np.isfinite(v) for v in row.values()):
                raise Divergence(f"non-finite metrics at epoch {epoch}")
        except (Divergence, NonFiniteGradient, FloatingPointError):
            result.diverged = True
            if result.best_epoch is None:
                result.model = SetFnModel.from_json(last_good)
            break
        last_good = model.to_json()
        result.metrics.append(row)
        if on_epoch is not None:
            on_epoch(row, model, opt)
        if epoch >= first_kept:
            dev = row.get("dev_rmse", row["train_rmse"])
            if dev < best_dev:
                best_dev, result.best_epoch = dev, epoch
                result.model = model.copy()
                result.optimizer_state = opt.state()
    else:
        if config.epochs == 0 or result.best_epoch is None:
            result.model = model.copy()

    if "test" in folds:
        result.test_rmse = batch_rmse(result.model, folds["test"])
    return result


def write_metrics(path, metrics: list[dict]) -> None:
    cols = ["epoch", "train_rmse", "dev_rmse"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in metrics:
            w.writerow([row.get(c, "") for c in cols])


def write_report(path, result: TrainResult, config_hash: str, seed: int, extra: dict | None = None) -> None:
    payload = {"test_rmse": result.test_rmse, "config_hash": config_hash, "seed": seed,
               "best_epoch": result.best_epoch, "diverged": result.diverged, **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def config_dict(config: RegressionConfig) -> dict:
    return asdict(config)
