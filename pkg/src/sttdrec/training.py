"""Plain next-item training on the recommendation loss (teacher, or a student without KD)."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import TrainingLog, iterate_batches
from .metrics import evaluate
from .model import SessionRecModel, pad_sessions, rec_loss
from .optim import adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: SessionRecModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train_supervised(model: SessionRecModel, train_instances, valid_instances,
                     epochs: int = 30, lr: float = 1e-3, weight_decay: float = 1e-5,
                     batch_size: int = 100, patience: int | None = 3, seed: int = 0,
                     log_path: str | Path | None = None) -> TrainResult:
    """Adam on the summed catalog cross-entropy with early stopping on validation P@5.

    A non-finite loss aborts the run; the model keeps its last finite parameters.
    """
    rng = np.random.default_rng(seed)
    writer = TrainingLog(log_path)
    history: list[dict] = []
    best, best_epoch, best_state, stale = -1.0, 0, None, 0
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total = 0.0
        for sessions, labels in iterate_batches(train_instances, batch_size, rng):
            model.store.zero_grad()
            batch = pad_sessions(sessions, model.config.max_seq_len, labels)
            _, probs = model.forward(batch, training=True)
            loss = rec_loss(probs, labels)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            adam_step(model.store, lr, weight_decay=weight_decay)
            total += loss.item()
        val = evaluate(model, valid_instances)["P@5"] if valid_instances else math.nan
        row = {"epoch": epoch, "L_rec": total, "total": total, "val_P@5": val,
               "wall_time": time.perf_counter() - t0}
        history.append(row)
        writer.write(row)
        log.info("epoch %d loss=%.4f val P@5=%.2f", epoch, total, val)
        if valid_instances and patience is not None:
            if val > best:
                best, best_epoch, stale = val, epoch, 0
                best_state = {k: v.copy() for k, v in model.store.state().items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        model.store.load_state(best_state)
    return TrainResult(model, history, best_epoch or len(history))
