"""SGD training with plateau halving, dropout, early stopping and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DEFAULT_BUCKETS, Batch, Bucket, Example, Vocabulary, bucketize, make_batches
from .lstm import ModulationMode
from .model import CaptionModel, ModelConfig, Variant
from .numerics import Parameter, dropout_mask

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_initial: float = 0.1
    plateau_patience: int = 2
    plateau_tolerance: float = 1e-4
    dropout: float = 0.5
    early_stop_patience: int = 5
    max_epochs: int = 30
    clip_norm: float = 5.0  # <= 0 disables clipping
    loss_reduction: str = "sum"  # over the batch: "sum" or "mean"
    seed: int = 0
    hidden_size: int = 512
    init_scale: float = 0.08
    buckets: tuple[Bucket, ...] = DEFAULT_BUCKETS
    mode: ModulationMode = ModulationMode.SIGMOID
    variant: Variant = Variant.MAT

    def __post_init__(self) -> None:
        self.mode = ModulationMode(self.mode)
        self.variant = Variant(self.variant)
        self.buckets = tuple(b if isinstance(b, Bucket) else Bucket(*b) for b in self.buckets)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if not 0.0 < self.lr_initial:
            raise ValueError("lr_initial must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["variant"] = self.variant.value
        d["buckets"] = [[b.max_objects, b.max_tokens] for b in self.buckets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ----------------------------------------------------------------- primitives

def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    """``theta -= lr * grad`` for each parameter, then zero the grads."""
    for p in params:
        p.value -= lr * p.grad
        p.zero_grad()


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def apply_dropout(v: np.ndarray, drop_rate: float, rng: np.random.Generator | None) -> np.ndarray:
    """Inverted dropout; identity when ``drop_rate`` is 0 or ``rng`` is None (inference)."""
    mask = dropout_mask(rng, np.shape(v), drop_rate)
    return v if mask is None else v * mask


# ----------------------------------------------------------------- evaluation

def dataset_loss(model: CaptionModel, batches: Sequence[Batch]) -> float:
    """Mean NLL per target token, dropout off."""
    total, n = 0.0, 0
    for b in batches:
        total += model.loss(b)
        n += b.num_targets
    return total / max(n, 1)


# ------------------------------------------------------------------- schedule

class PlateauHalver:
    """Halve the learning rate after ``patience`` epochs without relative improvement."""

    def __init__(self, lr: float, patience: int, tolerance: float = 1e-4):
        self.lr = lr
        self.patience = patience
        self.tolerance = tolerance
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.tolerance * abs(self.best) or self.best == math.inf:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= 0.5
                self.stale = 0
        return self.lr


@dataclass
class TrainResult:
    model: CaptionModel
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    config: TrainConfig
    vocab: Vocabulary | None = None
    rng_state: dict = field(default_factory=dict)


def train(config: TrainConfig, train_set: Sequence[Example], val_set: Sequence[Example],
          vocab_size: int, feature_dim: int, vocab: Vocabulary | None = None,
          checkpoint_dir: str | os.PathLike | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a fresh model; returns it restored to the best-validation epoch."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    model = CaptionModel(ModelConfig(vocab_size, feature_dim, config.hidden_size, config.variant,
                                     config.mode, config.init_scale), rng)
    params = model.parameters()
    train_groups = bucketize(train_set, config.buckets)
    val_batches = make_batches(bucketize(val_set, config.buckets), config.batch_size)

    schedule = PlateauHalver(config.lr_initial, config.plateau_patience, config.plateau_tolerance)
    best_val, best_epoch, best_state = math.inf, 0, model.state_dict()
    stale_val = 0
    history: list[dict] = []
    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        total, n_tok = 0.0, 0
        for batch in make_batches(train_groups, config.batch_size, rng):
            model.zero_grad()
            loss = model.forward(batch, config.dropout, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (lr={lr})")
            model.backward(1.0 if config.loss_reduction == "sum" else 1.0 / len(batch))
            clip_grad_norm(params, config.clip_norm)
            sgd_step(params, lr)
            total += loss
            n_tok += batch.num_targets
        train_loss = total / n_tok
        val_loss = dataset_loss(model, val_batches)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f lr %g", epoch, train_loss, val_loss, lr)
        if on_epoch is not None:
            on_epoch(row)
        schedule.step(train_loss)
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state_dict()
            stale_val = 0
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "best.npz", model, config, vocab, epoch,
                                rng.bit_generator.state)
        else:
            stale_val += 1
            if stale_val >= config.early_stop_patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_val, config, vocab, rng.bit_generator.state)


# ------------------------------------------------------------------ artifacts

def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for row in history:
        w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])
    return buf.getvalue()


def write_history(path: str | os.PathLike, history: Sequence[dict]) -> None:
    Path(path).write_text(history_csv(history))


@dataclass
class Checkpoint:
    model: CaptionModel
    config: TrainConfig | None
    vocab: Vocabulary | None
    epoch: int
    rng_state: dict | None


def save_checkpoint(path: str | os.PathLike, model: CaptionModel, config: TrainConfig | None = None,
                    vocab: Vocabulary | None = None, epoch: int = 0,
                    rng_state: dict | None = None) -> None:
    """npz container: one array per parameter plus a JSON ``__meta__`` entry.

    Written to a temporary file and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "train": config.to_dict() if config is not None else None,
        "vocab": vocab.to_dict() if vocab is not None else None,
        "epoch": epoch,
        "rng_state": rng_state,
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = CaptionModel(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    return Checkpoint(
        model,
        TrainConfig.from_dict(meta["train"]) if meta["train"] else None,
        Vocabulary.from_dict(meta["vocab"]) if meta["vocab"] else None,
        meta["epoch"],
        meta["rng_state"],
    )
