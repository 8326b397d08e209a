"""Adam training loop: seeded shuffles, per-epoch validation, checkpoints.

Shuffle order is drawn from a generator seeded per epoch with
SeedSequence([seed, epoch]), so a resumed run replays exactly the
mini-batch order of an uninterrupted one.  Reported times cover the
training loop only, not data preparation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, TrainingDivergedError
from .net import load_checkpoint, save_checkpoint
from .prep import PatchSet, SplitAssignment

LOSS_KINDS = ("softmax-cross-entropy",)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    learning_rate 0 is allowed and leaves parameters bitwise unchanged
    (Adam's update is scaled by the rate); negative rates are rejected.
    """

    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    loss: str = "softmax-cross-entropy"
    best_validation: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0 <= b < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")


@dataclass
class TrainingHistory:
    """Per-epoch curves plus wall-clock seconds for the loop itself."""

    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    train_seconds: float = 0.0
    test_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "train_seconds": self.train_seconds,
            "test_seconds": self.test_seconds,
        }

    @staticmethod
    def from_dict(doc: dict) -> "TrainingHistory":
        return TrainingHistory(
            train_loss=[float(v) for v in doc.get("train_loss", [])],
            train_accuracy=[float(v) for v in doc.get("train_accuracy", [])],
            val_loss=[float(v) for v in doc.get("val_loss", [])],
            val_accuracy=[float(v) for v in doc.get("val_accuracy", [])],
            train_seconds=float(doc.get("train_seconds", 0.0)),
            test_seconds=float(doc.get("test_seconds", 0.0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=1), encoding="utf-8"
        )

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    return rng.permutation(n)


def _gather_tensor(patches: PatchSet, idx: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(patches.gather(idx)).to(dtype)


def _check_indices(patches: PatchSet, split: SplitAssignment) -> None:
    n = len(patches)
    for name, idx in (
        ("train", split.train_idx),
        ("val", split.val_idx),
        ("test", split.test_idx),
    ):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ConfigError(
                f"{name} split references patch index outside [0, {n})"
            )


def optimizer_moment_tensors(
    optimizer: torch.optim.Optimizer,
) -> dict[str, torch.Tensor]:
    """Flat name->tensor view of Adam state, in parameter order."""
    tensors: dict[str, torch.Tensor] = {}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        state = optimizer.state.get(p)
        if not state:
            continue
        tensors[f"{i}.step"] = torch.as_tensor(state["step"], dtype=torch.float32)
        tensors[f"{i}.exp_avg"] = state["exp_avg"]
        tensors[f"{i}.exp_avg_sq"] = state["exp_avg_sq"]
    return tensors


def restore_optimizer_moments(
    optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]
) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    state: dict[int, dict] = {}
    for i, p in enumerate(params):
        key = f"{i}.exp_avg"
        if key not in arrays:
            continue
        state[i] = {
            "step": torch.as_tensor(arrays[f"{i}.step"], dtype=torch.float32
                                    ).reshape(()),
            "exp_avg": torch.as_tensor(arrays[key]).to(p.dtype).reshape(p.shape),
            "exp_avg_sq": torch.as_tensor(arrays[f"{i}.exp_avg_sq"])
            .to(p.dtype)
            .reshape(p.shape),
        }
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


def _eval_split(
    model: nn.Module,
    loss_fn,
    x: torch.Tensor,
    y: torch.Tensor,
    batch_size: int,
) -> tuple[float, float]:
    model.eval()
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = x[start : start + batch_size]
            yb = y[start : start + batch_size]
            logits = model(xb)
            total_loss += float(loss_fn(logits, yb)) * xb.shape[0]
            correct += int((logits.argmax(dim=1) == yb).sum())
    model.train()
    n = x.shape[0]
    return total_loss / n, correct / n


def train(
    model: nn.Module,
    patches: PatchSet,
    split: SplitAssignment,
    cfg: TrainConfig,
    resume_from=None,
    checkpoint_to=None,
) -> tuple[nn.Module, TrainingHistory]:
    """Run cfg.epochs seeded-shuffle passes over the training split.

    Validation metrics are computed each epoch with parameters frozen.
    The returned parameters are the final epoch's unless
    cfg.best_validation selects the best validation-accuracy epoch.
    A non-finite loss aborts with the failing epoch index.  When
    ``checkpoint_to`` is set, every epoch writes a checkpoint with the
    optimizer moments, and ``resume_from`` continues such a run exactly.
    """
    if split.train_idx.size == 0:
        raise ConfigError("training split is empty")
    _check_indices(patches, split)
    dtype = next(model.parameters()).dtype
    x_train = _gather_tensor(patches, split.train_idx, dtype)
    y_train = torch.as_tensor(patches.labels[split.train_idx] - 1, dtype=torch.long)
    has_val = split.val_idx.size > 0
    if has_val:
        x_val = _gather_tensor(patches, split.val_idx, dtype)
        y_val = torch.as_tensor(patches.labels[split.val_idx] - 1, dtype=torch.long)

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.epsilon,
    )
    loss_fn = nn.CrossEntropyLoss()
    history = TrainingHistory()
    start_epoch = 0
    if resume_from is not None:
        loaded, manifest, opt_arrays = load_checkpoint(resume_from)
        state = {k: v.to(dtype) for k, v in loaded.state_dict().items()}
        model.load_state_dict(state)
        if opt_arrays is not None:
            restore_optimizer_moments(optimizer, opt_arrays)
        start_epoch = int(manifest["epoch"])
        saved = manifest.get("metrics", {}).get("history")
        if saved:
            history = TrainingHistory.from_dict(saved)
    if start_epoch >= cfg.epochs:
        return model, history

    best_acc = -1.0
    best_state = None
    n = int(split.train_idx.size)
    model.train()
    started = time.perf_counter()
    base_seconds = history.train_seconds
    for epoch in range(start_epoch, cfg.epochs):
        perm = _epoch_permutation(cfg.seed, epoch, n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, cfg.batch_size):
            take = perm[start : start + cfg.batch_size]
            xb = x_train[take]
            yb = y_train[take]
            optimizer.zero_grad()
            logits = model(xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * xb.shape[0]
            epoch_correct += int((logits.argmax(dim=1) == yb).sum())
        history.train_loss.append(epoch_loss / n)
        history.train_accuracy.append(epoch_correct / n)
        if has_val:
            vl, va = _eval_split(model, loss_fn, x_val, y_val, cfg.batch_size)
        else:
            vl, va = float("nan"), float("nan")
        history.val_loss.append(vl)
        history.val_accuracy.append(va)
        history.train_seconds = base_seconds + (time.perf_counter() - started)
        if cfg.best_validation and has_val and va > best_acc:
            best_acc = va
            best_state = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
        if checkpoint_to is not None:
            save_checkpoint(
                checkpoint_to,
                model,
                epoch=epoch + 1,
                metrics={
                    "history": history.to_dict(),
                    "train_config": {
                        "learning_rate": cfg.learning_rate,
                        "batch_size": cfg.batch_size,
                        "epochs": cfg.epochs,
                        "seed": cfg.seed,
                    },
                },
                optimizer_state=optimizer_moment_tensors(optimizer),
            )
    if cfg.best_validation and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def predict(
    model: nn.Module,
    patches,
    indices: np.ndarray | None = None,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels (argmax, ties to the lowest class index) and probabilities.

    ``patches`` is a PatchSet (optionally restricted by ``indices``) or
    a ready (N, S, S, B) array.
    """
    if isinstance(patches, PatchSet):
        idx = (
            np.arange(len(patches), dtype=np.int64)
            if indices is None
            else np.asarray(indices, dtype=np.int64)
        )
        batch_source = lambda lo, hi: patches.gather(idx[lo:hi])
        total = idx.size
    else:
        arr = np.asarray(patches)
        batch_source = lambda lo, hi: arr[lo:hi]
        total = arr.shape[0]
    dtype = next(model.parameters()).dtype
    model.eval()
    probs = []
    with torch.no_grad():
        for lo in range(0, total, batch_size):
            xb = torch.as_tensor(batch_source(lo, lo + batch_size)).to(dtype)
            probs.append(torch.softmax(model(xb), dim=1).numpy())
    if not probs:
        c = getattr(model.config, "class_count", 0)
        return np.empty(0, dtype=np.int64), np.empty((0, c))
    matrix = np.concatenate(probs, axis=0)
    labels = matrix.argmax(axis=1).astype(np.int64) + 1
    return labels, matrix
