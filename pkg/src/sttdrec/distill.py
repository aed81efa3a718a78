"""Self-supervised knowledge distillation from a dense teacher into a compressed student.

The student objective is::

    (1 - beta3) * L_rec + beta1 * L_cl + beta2 * L_pred + beta3 * L_soft

``L_cl`` and ``L_pred`` work on *recombined* session views: each session is
split into its hot-item and cold-item sub-sessions, both models encode the
two halves, and the cold halves are swapped between teacher and student.
The teacher is frozen; its outputs enter every loss as constants.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .metrics import evaluate
from .model import SessionRecModel, pad_sessions, rec_loss
from .optim import ParamStore, adam_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "L_rec", "L_cl", "L_pred", "L_soft", "total", "val_P@5", "wall_time")

TMALL_BETAS = (0.1, 0.001, 0.8)
RETAILROCKET_BETAS = (0.005, 0.1, 0.8)


@dataclass
class KDConfig:
    beta1: float = 0.1
    beta2: float = 0.001
    beta3: float = 0.8
    tau: float = 0.2
    hot_fraction: float = 0.2
    batch_size: int = 100
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-5
    patience: int | None = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("beta1", "beta2", "beta3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative, got {getattr(self, name)}")
        if self.beta3 >= 1:
            raise ValueError(f"beta3: must be < 1 so the L_rec weight stays positive, got {self.beta3}")
        if self.tau <= 0:
            raise ValueError(f"tau: must be positive, got {self.tau}")
        if not 0 < self.hot_fraction < 1:
            raise ValueError(f"hot_fraction: must be in (0, 1), got {self.hot_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr: must be positive, got {self.lr}")

    @property
    def rec_weight(self) -> float:
        return 1.0 - self.beta3

    def ablate(self, cl: bool = True, pred: bool = True, soft: bool = True) -> "KDConfig":
        """Copy with the listed distillation tasks switched off (False = detached)."""
        from dataclasses import replace

        return replace(self, beta1=self.beta1 if cl else 0.0,
                       beta2=self.beta2 if pred else 0.0,
                       beta3=self.beta3 if soft else 0.0)


@dataclass
class HotColdPartition:
    hot: frozenset
    cold: frozenset
    popularity: np.ndarray
    is_hot: np.ndarray = field(repr=False)


def partition_hot_cold(popularity: np.ndarray, hot_fraction: float = 0.2) -> HotColdPartition:
    """Most popular ``round(hot_fraction * |V|)`` items are hot; ties go to the lower id."""
    popularity = np.asarray(popularity)
    V = len(popularity)
    if V == 0:
        raise ValueError("empty catalog")
    k = int(math.floor(hot_fraction * V + 0.5))
    order = np.lexsort((np.arange(V), -popularity))
    is_hot = np.zeros(V, dtype=bool)
    is_hot[order[:k]] = True
    ids = np.arange(V)
    return HotColdPartition(frozenset(ids[is_hot].tolist()), frozenset(ids[~is_hot].tolist()),
                            popularity, is_hot)


def split_hot_cold(sessions: Sequence[Sequence[int]], is_hot: np.ndarray):
    hot = [[v for v in s if is_hot[v]] for s in sessions]
    cold = [[v for v in s if not is_hot[v]] for s in sessions]
    return hot, cold


@dataclass
class SubSessionReps:
    hot: Tensor            # (B, N); zero rows where the session has no hot item
    cold: Tensor           # (B, N); zero rows where the session has no cold item
    has_hot: np.ndarray
    has_cold: np.ndarray


def _encode_subset(model: SessionRecModel, seqs, table, training) -> Tensor:
    """Readouts for the non-empty entries of ``seqs``, zero rows elsewhere."""
    N = model.config.embed_dim
    keep = [i for i, s in enumerate(seqs) if s]
    B = len(seqs)
    zero = Tensor(np.zeros((1, N), dtype=model.dtype))
    if not keep:
        return ag.gather(zero, np.zeros(B, dtype=np.int64))
    batch = pad_sessions([seqs[i] for i in keep], model.config.max_seq_len)
    theta = model.represent(batch, table, training).theta
    index = np.full(B, len(keep), dtype=np.int64)
    index[keep] = np.arange(len(keep))
    return ag.gather(ag.concat([theta, zero], axis=0), index)


def sub_session_representations(model: SessionRecModel, sessions: Sequence[Sequence[int]],
                                partition: HotColdPartition, table: Tensor | None = None,
                                training: bool = False) -> SubSessionReps:
    """Encode the hot-only and cold-only sub-sessions separately (own mean, own weights)."""
    if table is None:
        table = model.item_table()
    hot, cold = split_hot_cold(sessions, partition.is_hot)
    return SubSessionReps(
        _encode_subset(model, hot, table, training),
        _encode_subset(model, cold, table, training),
        np.array([bool(s) for s in hot]),
        np.array([bool(s) for s in cold]),
    )


@dataclass
class RecombinedPair:
    z_tea: Tensor          # (B, 2N)
    z_stu: Tensor          # (B, 2N)


def recombine(teacher: SubSessionReps, student: SubSessionReps) -> RecombinedPair:
    """Swap the cold halves between models.

    Mixed session: ``z_tea = [hot_t, cold_s]``, ``z_stu = [hot_s, cold_t]``.
    Single-type session: the one available type fills both halves, so
    ``z_tea = [type_t, type_s]`` and ``z_stu = [type_s, type_t]``.
    """
    if not np.array_equal(teacher.has_hot, student.has_hot) or \
            not np.array_equal(teacher.has_cold, student.has_cold):
        raise ValueError("teacher and student sub-session flags disagree")
    if np.any(~teacher.has_hot & ~teacher.has_cold):
        raise ValueError("empty session in recombination batch")
    first = teacher.has_hot[:, None]
    second = teacher.has_cold[:, None]
    a_t = ag.where_mask(first, teacher.hot, teacher.cold)
    a_s = ag.where_mask(first, student.hot, student.cold)
    b_t = ag.where_mask(second, teacher.cold, teacher.hot)
    b_s = ag.where_mask(second, student.cold, student.hot)
    return RecombinedPair(ag.concat([a_t, b_s], axis=-1), ag.concat([a_s, b_t], axis=-1))


def contrastive_loss(pair: RecombinedPair, w_t: Tensor, w_s: Tensor, tau: float = 0.2) -> Tensor:
    """InfoNCE over the batch, summed over sessions; other sessions are the negatives."""
    u = pair.z_tea @ w_t                                   # (B, N)
    v = pair.z_stu @ w_s
    B, N = u.shape
    sim = ag.cosine_similarity(u.reshape(B, 1, N), v.reshape(1, B, N), axis=-1)
    return info_nce(sim, tau)


def info_nce(sim: Tensor, tau: float) -> Tensor:
    """``-sum_s log softmax(sim[s] / tau)[s]`` for a (B, B) cosine matrix."""
    B = sim.shape[0]
    logp = ag.log_softmax(sim * (1.0 / tau), axis=-1)
    return -(logp * np.eye(B, dtype=logp.dtype)).sum()


def predictive_loss(pair: RecombinedPair, labels: np.ndarray, teacher_table: Tensor,
                    student_table: Tensor, w_tea: Tensor, w_stu: Tensor) -> Tensor:
    """Two catalog-wide cross-entropies, one per recombined view.

    Each view is projected back to N dimensions and scored against its own
    model's item table.  The teacher table is a constant.
    """
    teacher_table = Tensor(np.asarray(ag.as_tensor(teacher_table).data))
    p_tea = ag.softmax((pair.z_tea @ w_tea) @ ag.transpose(teacher_table, (1, 0)), axis=-1)
    p_stu = ag.softmax((pair.z_stu @ w_stu) @ ag.transpose(student_table, (1, 0)), axis=-1)
    return rec_loss(p_tea, labels) + rec_loss(p_stu, labels)


def kl_divergence(p_tea: np.ndarray, logp_stu: Tensor) -> Tensor:
    """``sum p_tea * (log p_tea - log p_stu)``, summed over rows; ``p_tea`` is constant."""
    p = np.asarray(p_tea, dtype=logp_stu.dtype)
    with np.errstate(divide="ignore"):
        logp_t = np.where(p > 0, np.log(p), 0.0).astype(p.dtype)
    const = float((p * logp_t).sum())
    return const - (logp_stu * p).sum()


def soft_target_loss(theta_tea, theta_stu: Tensor, teacher_table, student_table: Tensor) -> Tensor:
    """KL(teacher distribution || student distribution) over the catalog."""
    tt = np.asarray(ag.as_tensor(theta_tea).data, dtype=theta_stu.dtype)
    xt = np.asarray(ag.as_tensor(teacher_table).data, dtype=theta_stu.dtype)
    z = tt @ xt.T
    z = z - z.max(axis=-1, keepdims=True)
    p_tea = np.exp(z)
    p_tea /= p_tea.sum(axis=-1, keepdims=True)
    logp_stu = ag.log_softmax(theta_stu @ ag.transpose(student_table, (1, 0)), axis=-1)
    return kl_divergence(p_tea, logp_stu)


class KDHead:
    """Projection matrices used only by the distillation tasks (2N -> N each)."""

    NAMES = ("w_t", "w_s", "w_tea", "w_stu")

    def __init__(self, embed_dim: int, seed: int = 0, dtype=np.float32, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        for name in self.NAMES:
            self.store.add(f"kd.{name}",
                           rng.uniform(-scale, scale, (2 * embed_dim, embed_dim)).astype(dtype))

    def __getattr__(self, name):
        if name in KDHead.NAMES:
            return self.store[f"kd.{name}"]
        raise AttributeError(name)


@dataclass
class LossParts:
    total: Tensor
    parts: dict[str, float]


def joint_loss(sessions: Sequence[Sequence[int]], labels: np.ndarray,
               teacher: SessionRecModel, student: SessionRecModel, head: KDHead,
               partition: HotColdPartition, cfg: KDConfig, training: bool = False,
               teacher_table: np.ndarray | None = None) -> LossParts:
    """Student objective on one batch.  Terms with a zero coefficient are skipped."""
    labels = np.asarray(labels, dtype=np.int64)
    batch = pad_sessions(sessions, student.config.max_seq_len, labels)
    s_table = student.item_table()
    with no_grad():
        if teacher_table is None:
            teacher_table = teacher.item_table().data
        t_table = Tensor(np.asarray(teacher_table))
    s_rep = student.represent(batch, s_table, training)
    l_rec = rec_loss(student.score_items(s_rep.theta, s_table), labels)
    parts = {"L_rec": l_rec.item(), "L_cl": math.nan, "L_pred": math.nan, "L_soft": math.nan}
    total = l_rec if cfg.beta3 == 0 else l_rec * cfg.rec_weight

    if cfg.beta3 > 0:
        with no_grad():
            t_theta = teacher.represent(batch, t_table, False).theta.data
        l_soft = soft_target_loss(t_theta, s_rep.theta, t_table, s_table)
        parts["L_soft"] = l_soft.item()
        total = total + l_soft * cfg.beta3

    if cfg.beta1 > 0 or cfg.beta2 > 0:
        with no_grad():
            t_sub = sub_session_representations(teacher, sessions, partition, t_table, False)
        s_sub = sub_session_representations(student, sessions, partition, s_table, training)
        pair = recombine(t_sub, s_sub)
        if cfg.beta1 > 0:
            l_cl = contrastive_loss(pair, head.w_t, head.w_s, cfg.tau)
            parts["L_cl"] = l_cl.item()
            total = total + l_cl * cfg.beta1
        if cfg.beta2 > 0:
            l_pred = predictive_loss(pair, labels, t_table, s_table, head.w_tea, head.w_stu)
            parts["L_pred"] = l_pred.item()
            total = total + l_pred * cfg.beta2

    parts["total"] = total.item()
    return LossParts(total, parts)


def iterate_batches(instances, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(len(instances))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [instances[i] for i in order[start:start + batch_size]]
        yield [s for s, _ in chunk], np.array([y for _, y in chunk], dtype=np.int64)


@dataclass
class DistillResult:
    student: SessionRecModel
    head: KDHead
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def distill(teacher: SessionRecModel, student: SessionRecModel, train_instances,
            valid_instances, partition: HotColdPartition, cfg: KDConfig, seed: int = 0,
            log_path: str | Path | None = None) -> DistillResult:
    """Mini-batch Adam on the joint objective; the teacher is never updated.

    Keeps the parameters of the epoch with the best validation P@5 and stops
    after ``cfg.patience`` epochs without improvement.
    """
    if teacher.config.embed_dim != student.config.embed_dim:
        raise ValueError(f"embed_dim mismatch: teacher {teacher.config.embed_dim}, "
                         f"student {student.config.embed_dim}")
    if teacher.config.num_items != student.config.num_items:
        raise ValueError(f"num_items mismatch: teacher {teacher.config.num_items}, "
                         f"student {student.config.num_items}")
    teacher.store.freeze()
    before = teacher.store.checksum()
    with no_grad():
        t_table = teacher.item_table().data.copy()
    head = KDHead(student.config.embed_dim, seed=seed + 1, dtype=student.dtype)
    rng = np.random.default_rng(seed)
    writer = TrainingLog(log_path)
    history: list[dict] = []
    best, best_epoch, best_state, stale = -1.0, 0, None, 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in ("L_rec", "L_cl", "L_pred", "L_soft", "total")}
        for sessions, labels in iterate_batches(train_instances, cfg.batch_size, rng):
            student.store.zero_grad()
            head.store.zero_grad()
            out = joint_loss(sessions, labels, teacher, student, head, partition, cfg,
                             training=True, teacher_table=t_table)
            if not math.isfinite(out.parts["total"]):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            out.total.backward()
            adam_step(student.store, cfg.lr, weight_decay=cfg.weight_decay)
            adam_step(head.store, cfg.lr, weight_decay=cfg.weight_decay)
            for k in sums:
                sums[k] += out.parts[k]
        val = evaluate(student, valid_instances)["P@5"] if valid_instances else math.nan
        row = {"epoch": epoch, **sums, "val_P@5": val, "wall_time": time.perf_counter() - t0}
        history.append(row)
        writer.write(row)
        log.info("distill epoch %d total=%.4f val P@5=%.2f", epoch, sums["total"], val)
        if valid_instances and cfg.patience is not None:
            if val > best:
                best, best_epoch, stale = val, epoch, 0
                best_state = student.store.state()
                best_state = {k: v.copy() for k, v in best_state.items()}
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best_state is not None:
        student.store.load_state(best_state)
    if teacher.store.checksum() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    return DistillResult(student, head, history, best_epoch or len(history))


class TrainingLog:
    """Append-only tab-separated epoch log."""

    def __init__(self, path: str | Path | None, fields: Sequence[str] = LOG_FIELDS):
        self.path = Path(path) if path else None
        self.fields = list(fields)
        if self.path is not None and not self.path.exists():
            self.path.write_text("\t".join(self.fields) + "\n")

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        vals = []
        for f in self.fields:
            v = row.get(f, math.nan)
            vals.append(str(v) if isinstance(v, int) else f"{v:.6f}")
        with self.path.open("a") as fh:
            fh.write("\t".join(vals) + "\n")


def read_training_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    fields = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        rows.append({f: (int(v) if f == "epoch" else float(v)) for f, v in zip(fields, vals)})
    return rows
