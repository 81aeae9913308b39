"""Mini-batch training loops, evaluation, and grid search.

A run is fully determined by (config, seed): batch order comes from a seeded
shuffle, augmentation from a sibling stream, and the optimizer from the
gradients alone. Every record carries the backbone digest before and after
so the freezing invariant is checkable per run.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import AdamW, backward, cross_entropy
from .data import Dataset, FewShotEpisode, augment
from .errors import ConfigError, DataError, NumericalError
from .pet import PetParams, freeze_for
from .vit import ViTParams, backbone_digest, forward


@dataclass(frozen=True)
class TrainSpec:
    """Hyperparameters of one training run."""

    steps: int = 100
    batch_size: int = 8
    lr: float = 5e-3
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"TrainSpec.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainSpec.batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"TrainSpec.lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"TrainSpec.weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class RunRecord:
    config: dict
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    eval_accuracy: float | None = None
    wall_time: float = 0.0
    digest_before: str = ""
    digest_after: str = ""

    @property
    def backbone_unchanged(self) -> bool:
        return self.digest_before == self.digest_after


def _spec_snapshot(spec: TrainSpec, pet: PetParams | None) -> dict:
    snap = {"steps": spec.steps, "batch_size": spec.batch_size, "lr": spec.lr,
            "weight_decay": spec.weight_decay, "seed": spec.seed, "augment": spec.augment}
    snap["mode"] = pet.method.value if pet is not None else "full"
    return snap


def train(vit_params: ViTParams, pet: PetParams | None, data, spec: TrainSpec) -> RunRecord:
    """Run ``spec.steps`` optimizer steps; trains the modules when attached,
    the whole backbone otherwise (the full fine-tuning baseline)."""
    train_ds = data.train if isinstance(data, FewShotEpisode) else data
    if len(train_ds) == 0:
        raise DataError("train: empty training set")
    freeze_for(vit_params, pet)
    trainables = pet.tensors() if pet is not None else vit_params.tensors()
    opt = AdamW(trainables, lr=spec.lr, weight_decay=spec.weight_decay)

    shuffle_seed, augment_seed = np.random.SeedSequence(spec.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    augment_rng = np.random.default_rng(augment_seed)

    record = RunRecord(config=_spec_snapshot(spec, pet),
                       digest_before=backbone_digest(vit_params))
    start = time.perf_counter()
    m = len(train_ds)
    buffer: list[int] = []
    for step in range(spec.steps):
        if len(buffer) < spec.batch_size:
            buffer = list(shuffle_rng.permutation(m))
        idx = np.asarray(buffer[:spec.batch_size])
        buffer = buffer[spec.batch_size:]
        images = train_ds.images[idx]
        if spec.augment:
            images = augment(images, augment_rng)
        logits = forward(vit_params, images, pet)
        loss = cross_entropy(logits, train_ds.labels[idx])
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"train: non-finite loss at step {step}")
        record.losses.append(value)
        opt.zero_grad()
        backward(loss)
        opt.step()
    record.wall_time = time.perf_counter() - start
    record.digest_after = backbone_digest(vit_params)
    record.train_accuracy = evaluate(vit_params, pet, train_ds)["accuracy"]
    if isinstance(data, FewShotEpisode):
        record.eval_accuracy = evaluate(vit_params, pet, data.eval)["accuracy"]
    return record


def evaluate(vit_params: ViTParams, pet: PetParams | None, ds: Dataset,
             batch_size: int = 64) -> dict:
    """Accuracy (argmax with lowest-index tie-break), per-class accuracy,
    and mean cross-entropy loss over a dataset."""
    if len(ds) == 0:
        raise DataError("evaluate: empty dataset")
    m = len(ds)
    correct = np.zeros(ds.num_classes)
    totals = np.zeros(ds.num_classes)
    loss_sum = 0.0
    for start in range(0, m, batch_size):
        idx = slice(start, min(start + batch_size, m))
        labels = ds.labels[idx]
        logits = forward(vit_params, ds.images[idx], pet)
        loss_sum += float(cross_entropy(logits, labels).data) * len(labels)
        preds = np.argmax(logits.data, axis=-1)
        for label, pred in zip(labels, preds):
            totals[label] += 1
            correct[label] += float(pred == label)
    per_class = {int(c): float(correct[c] / totals[c])
                 for c in range(ds.num_classes) if totals[c] > 0}
    return {"accuracy": float(correct.sum() / m),
            "per_class_accuracy": per_class,
            "mean_loss": loss_sum / m}


def worker_count() -> int:
    """Internal parallelism cap; PVP_THREADS overrides (default serial)."""
    try:
        return max(1, int(os.environ.get("PVP_THREADS", "1")))
    except ValueError:
        return 1


def run_cells(jobs: list) -> list:
    """Run zero-argument callables, possibly on a thread pool; results come
    back in submission order no matter the schedule."""
    workers = worker_count()
    if workers == 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [f.result() for f in [pool.submit(job) for job in jobs]]


@dataclass
class GridResult:
    best: RunRecord
    table: list[RunRecord]


def grid_search(vit_params: ViTParams, pet_proto: PetParams | None,
                episode: FewShotEpisode, lrs, wds, base_spec: TrainSpec) -> GridResult:
    """Train one cell per (lr, weight_decay) pair and pick the best eval
    accuracy; ties break toward lower lr, then lower weight decay."""
    lrs = sorted(set(lrs))
    wds = sorted(set(wds))
    if not lrs or not wds:
        raise ConfigError("grid_search: empty grid")

    def make_job(lr, wd):
        spec = replace(base_spec, lr=lr, weight_decay=wd)

        def job():
            if pet_proto is not None:
                return train(vit_params, pet_proto.clone(), episode, spec)
            return train(vit_params.clone(), None, episode, spec)

        return job

    cells = [(lr, wd) for lr in lrs for wd in wds]
    table = run_cells([make_job(lr, wd) for lr, wd in cells])
    best = table[0]
    for rec in table[1:]:
        if rec.eval_accuracy > best.eval_accuracy:
            best = rec
    return GridResult(best=best, table=table)
