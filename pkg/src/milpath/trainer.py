"""Training loop, early stopping, patient-wise cross-validation and transfer."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggregators import MilModel, build_model
from .bagstore import Bag, ConfigError, Manifest, TaskSpec, load_bags, make_folds
from .evalmetrics import MetricsReport, aggregate_table, evaluate_probs, write_reports_csv
from .numkernel import AdamState, NumericError, Rng, adam_step, cross_entropy

log = logging.getLogger(__name__)

# (learning rate, weight decay); abmil borrows the CLAM setting
DEFAULT_OPTIM = {
    "abmil": (2e-4, 1e-3),
    "clam-sb": (2e-4, 1e-3),
    "dsmil": (2e-4, 5e-3),
    "dtfd": (1e-4, 1e-4),
}


class CompatibilityError(ValueError):
    pass


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass
class TrainConfig:
    agg: str
    task: TaskSpec
    lr: float | None = None
    weight_decay: float | None = None
    min_epochs: int = 50
    max_epochs: int = 200
    patience: int = 25
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    freeze_backbone: bool = False
    decay: str = "decoupled"
    feature_dropout: float = 0.25

    def __post_init__(self):
        if self.agg not in DEFAULT_OPTIM:
            raise ConfigError(f"unknown aggregator {self.agg!r}")
        lr, wd = DEFAULT_OPTIM[self.agg]
        if self.lr is None:
            self.lr = lr
        if self.weight_decay is None:
            self.weight_decay = wd
        if self.min_epochs < 1:
            raise ConfigError("min_epochs must be at least 1")
        if self.max_epochs < self.min_epochs:
            raise ConfigError("max_epochs must be >= min_epochs")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ConfigError("feature_dropout must lie in [0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")


class EarlyStopping:
    """Patience counter that may only stop once ``min_epochs`` have run."""

    def __init__(self, min_epochs: int, max_epochs: int, patience: int):
        self.min_epochs = min_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.since_best = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True when it set a new best."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    def should_stop(self, epoch: int) -> bool:
        if epoch >= self.max_epochs:
            return True
        return epoch >= self.min_epochs and self.since_best >= self.patience


@dataclass
class RunRecord:
    train_loss: list[float]
    val_loss: list[float]
    stopped_epoch: int
    best_epoch: int
    seed: int
    test: MetricsReport | None = None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                writer.writerow([e, repr(tr), repr(va)])

    def summary(self) -> dict:
        out = {"stopped_epoch": self.stopped_epoch, "best_epoch": self.best_epoch,
               "best_val_loss": self.val_loss[self.best_epoch - 1] if self.best_epoch else None,
               "seed": self.seed}
        if self.test is not None:
            out["test"] = asdict(self.test)
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _labelled(bags: list[Bag], split: str) -> list[Bag]:
    kept = [b for b in bags if b.label is not None]
    if len(kept) < len(bags):
        log.warning("%s split: %d bag(s) without a label excluded", split, len(bags) - len(kept))
    if not kept:
        raise ConfigError(f"{split} split has no labelled bags")
    return kept


def feature_dropout(X: np.ndarray, rate: float, rng: Rng) -> np.ndarray:
    """Inverted dropout on instance features (training only)."""
    if rate <= 0.0:
        return X
    keep = rng.uniform_array(X.size).reshape(X.shape) >= rate
    return X * keep / (1.0 - rate)


def mean_loss(model: MilModel, bags: list[Bag]) -> float:
    """Mean cross-entropy of the model's bag logits (no auxiliary terms)."""
    return float(np.mean([cross_entropy(model.forward(b.features).logits, b.label) for b in bags]))


def predict(model: MilModel, bags: list[Bag]) -> np.ndarray:
    return np.stack([model.predict_proba(b.features) for b in bags])


def evaluate(model: MilModel, bags: list[Bag]) -> MetricsReport:
    bags = _labelled(bags, "evaluation")
    return evaluate_probs(predict(model, bags), [b.label for b in bags])


def train_one(config: TrainConfig, train_bags: list[Bag], val_bags: list[Bag],
              model: MilModel | None = None, on_epoch=None) -> tuple[MilModel, RunRecord]:
    """Adam at batch size 1 with early stopping on mean validation loss.

    Returns the model restored to its best-validation-loss epoch.
    """
    train_bags = _labelled(train_bags, "train")
    val_bags = _labelled(val_bags, "val")
    d = train_bags[0].dim
    master = Rng(config.seed)
    init_seed = master.next_u64()
    order_rng = Rng(master.next_u64())
    bag_rng = Rng(master.next_u64())
    drop_rng = Rng(master.next_u64())
    if model is None:
        model = build_model(config.agg, d, config.task.n_classes, seed=init_seed, **config.hyper)
    elif model.arch != config.agg:
        raise CompatibilityError(f"model is {model.arch}, config asks for {config.agg}")
    if model.d != d:
        raise CompatibilityError(f"model expects d={model.d}, features have d={d}")

    flat = model.params.flat
    state = AdamState.for_params(flat.size, lr=config.lr, weight_decay=config.weight_decay,
                                decay=config.decay)
    mask = None
    if config.freeze_backbone:
        mask = np.zeros(flat.size, dtype=bool)
        for name in model.head_blocks():
            mask[model.params.slice_of(name)] = True

    stopper = EarlyStopping(config.min_epochs, config.max_epochs, config.patience)
    best = flat.copy()
    train_hist, val_hist = [], []
    epoch = 0
    while True:
        epoch += 1
        losses = []
        for i in order_rng.permutation(len(train_bags)):
            bag = train_bags[i]
            X = feature_dropout(bag.features, config.feature_dropout, drop_rng)
            loss, grads, _ = model.loss_and_grad(X, bag.label, rng=bag_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss on bag {bag.slide_id!r} at epoch {epoch}")
            adam_step(flat, grads.flat, state, mask)
            losses.append(loss)
        val = mean_loss(model, val_bags)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        train_hist.append(float(np.mean(losses)))
        val_hist.append(val)
        if stopper.update(epoch, val):
            best[...] = flat
        if on_epoch is not None:
            on_epoch(epoch, train_hist[-1], val)
        if stopper.should_stop(epoch):
            break
    flat[...] = best
    record = RunRecord(train_loss=train_hist, val_loss=val_hist, stopped_epoch=epoch,
                       best_epoch=stopper.best_epoch, seed=config.seed)
    return model, record


def split_bags(bags: dict[str, Bag], plan_fold, order: list[str]) -> tuple[list[Bag], list[Bag], list[Bag]]:
    """Partition bags (in ``order``) by the patient roles of one fold."""
    train_p, val_p, test_p = set(plan_fold.train), set(plan_fold.val), set(plan_fold.test)
    parts: tuple[list, list, list] = ([], [], [])
    for sid in order:
        if sid not in bags:
            continue
        pid = bags[sid].patient_id
        if pid in train_p:
            parts[0].append(bags[sid])
        elif pid in val_p:
            parts[1].append(bags[sid])
        elif pid in test_p:
            parts[2].append(bags[sid])
    return parts


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    record: RunRecord
    model: MilModel


def _run_fold(config: TrainConfig, bags: dict[str, Bag], fold, order: list[str], index: int) -> FoldResult:
    try:
        train, val, test = split_bags(bags, fold, order)
        model, record = train_one(config, train, val)
        report = evaluate(model, test)
        record.test = report
        return FoldResult(index, report, record, model)
    except Exception as exc:
        raise FoldError(index, exc) from exc


def run_cv(config: TrainConfig, manifest: Manifest, k: int = 10, folds: list[int] | None = None,
           jobs: int = 1, bags: dict[str, Bag] | None = None) -> tuple[list[FoldResult], str]:
    """k-fold patient-wise cross-validation; returns per-fold results and the table."""
    plan = make_folds(manifest, k, config.seed)
    if bags is None:
        bags, skipped = load_bags(manifest, config.task)
        if skipped:
            log.warning("%d slide(s) lack a %s label and are excluded", len(skipped), config.task)
    order = [row.slide_id for row in manifest.rows]
    indices = list(range(k)) if folds is None else list(folds)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, config, bags, plan.folds[i], order, i) for i in indices]
            results = [f.result() for f in futures]
    else:
        results = [_run_fold(config, bags, plan.folds[i], order, i) for i in indices]
    table = aggregate_table([r.report for r in results], label=f"{config.agg}/{config.task}")
    return results, table


def write_cv_outputs(results: list[FoldResult], table: str, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        r.record.write_csv(out / f"fold{r.fold:02d}_history.csv")
        with open(out / f"fold{r.fold:02d}_metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fold", "auc", "acc", "f1", "n", "stopped_epoch", "best_epoch"])
            row = r.report.as_row()
            writer.writerow([r.fold, row["auc"], row["acc"], row["f1"], row["n"],
                             r.record.stopped_epoch, r.record.best_epoch])
    write_reports_csv([r.report for r in results], out / "folds.csv")
    (out / "aggregate.txt").write_text(table)


def transfer_finetune(model: MilModel, task: TaskSpec, config: TrainConfig,
                      train_bags: list[Bag], val_bags: list[Bag]) -> tuple[MilModel, RunRecord]:
    """Re-initialise the classification head(s) for a binary task and retrain."""
    if model.arch != config.agg:
        raise CompatibilityError(f"checkpoint is {model.arch}, config asks for {config.agg}")
    if task.n_classes != 2:
        raise ConfigError("transfer targets must be binary tasks")
    dims = {b.dim for b in train_bags + val_bags}
    if dims != {model.d}:
        raise CompatibilityError(f"checkpoint expects d={model.d}, features have d={sorted(dims)}")
    head_seed = Rng(config.seed).next_u64()
    fresh = model.reset_heads(2, seed=head_seed)
    return train_one(config, train_bags, val_bags, model=fresh)
