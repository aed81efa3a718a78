"""Self-attentive next-item model with a soft-attention session readout.

Teacher and student share this class; they differ only in how the item
table is stored (dense rows vs. TT / STTD cores).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParamStore, load_checkpoint, save_checkpoint
from .tt_compress import CoreSet, FactorizedShape, Mode, factorize_indices, init_cores

NEG_INF = -1e9
PROB_FLOOR = 1e-8


@dataclass
class ModelConfig:
    num_items: int
    embed_dim: int = 128
    max_seq_len: int = 50
    num_layers: int = 1
    num_heads: int = 1
    dropout: float = 0.5
    embedding_mode: Mode = Mode.DENSE
    shape: FactorizedShape | None = None
    init_scale: float = 0.1

    def __post_init__(self):
        self.embedding_mode = Mode(self.embedding_mode)
        if isinstance(self.shape, dict):
            self.shape = FactorizedShape(**self.shape)
        self.validate()

    def validate(self) -> None:
        if self.num_items < 1:
            raise ValueError(f"num_items: must be positive, got {self.num_items}")
        if self.embed_dim < 1 or self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"num_heads: embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 1:
            raise ValueError(f"max_seq_len: must be >= 1, got {self.max_seq_len}")
        if self.num_layers < 1:
            raise ValueError(f"num_layers: must be >= 1, got {self.num_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.embedding_mode is Mode.DENSE:
            return
        if self.shape is None:
            raise ValueError(f"shape: required for {self.embedding_mode.value} embeddings")
        self.shape.validate(self.embedding_mode)
        if self.shape.num_items != self.num_items:
            raise ValueError(
                f"shape.num_items {self.shape.num_items} != num_items {self.num_items}")
        if self.shape.embed_dim != self.embed_dim:
            raise ValueError(
                f"shape.embed_dim {self.shape.embed_dim} != embed_dim {self.embed_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embedding_mode"] = self.embedding_mode.value
        if self.shape is not None:
            d["shape"] = {k: (list(v) if isinstance(v, tuple) else v)
                          for k, v in asdict(self.shape).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("shape") is not None:
            d["shape"] = FactorizedShape(**d["shape"])
        return cls(**d)


@dataclass
class SessionRepresentation:
    theta: Tensor          # (B, N)
    alpha: Tensor          # (B, l), zero on padding
    mask: np.ndarray       # (B, l) bool


@dataclass
class Batch:
    items: np.ndarray      # (B, l) int64, right-padded with 0
    mask: np.ndarray       # (B, l) bool
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.items.shape[0]


def pad_sessions(sessions: Sequence[Sequence[int]], max_len: int,
                 labels: Sequence[int] | None = None) -> Batch:
    """Right-pad, keeping the most recent ``max_len`` items of each session."""
    if not sessions:
        raise ValueError("empty batch")
    trimmed = [list(s)[-max_len:] for s in sessions]
    if any(len(s) == 0 for s in trimmed):
        raise ValueError("sessions must be non-empty")
    width = max(len(s) for s in trimmed)
    items = np.zeros((len(trimmed), width), dtype=np.int64)
    mask = np.zeros((len(trimmed), width), dtype=bool)
    for b, s in enumerate(trimmed):
        items[b, :len(s)] = s
        mask[b, :len(s)] = True
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return Batch(items, mask, lab)


class SessionRecModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 store: ParamStore | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.store = store if store is not None else ParamStore()
        if store is None:
            self._init_params(np.random.default_rng(seed))

    # -- parameters ------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        N, s = c.embed_dim, c.init_scale

        def uni(*shape):
            return rng.uniform(-s, s, size=shape).astype(self.dtype)

        add = self.store.add
        if c.embedding_mode is Mode.DENSE:
            add("item.table", uni(c.num_items, N))
        else:
            cs = init_cores(c.shape, c.embedding_mode, rng, dtype=self.dtype, scale=s)
            for k, core in enumerate(cs.cores):
                add(f"item.core_{k + 1}", core)
        add("pos", uni(c.max_seq_len, N))
        for layer in range(c.num_layers):
            p = f"block{layer}."
            for w in ("wq", "wk", "wv", "wo"):
                add(p + w, uni(N, N))
                if w != "wk":  # a key bias cancels inside the softmax
                    add(p + "b" + w[1], uni(N))
            add(p + "ln1_g", np.ones(N, self.dtype))
            add(p + "ln1_b", np.zeros(N, self.dtype))
            add(p + "ffn_w1", uni(N, N))
            add(p + "ffn_b1", uni(N))
            add(p + "ffn_w2", uni(N, N))
            add(p + "ffn_b2", uni(N))
            add(p + "ln2_g", np.ones(N, self.dtype))
            add(p + "ln2_b", np.zeros(N, self.dtype))
        add("readout.w1", uni(N, N))
        add("readout.w2", uni(N, N))
        add("readout.c", uni(N))
        add("readout.f", uni(N))

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    def embedding_param_count(self) -> int:
        return self.store.num_params("item.")

    def coreset(self) -> CoreSet | None:
        c = self.config
        if c.embedding_mode is Mode.DENSE:
            return None
        cores = [self.store[f"item.core_{k + 1}"].data for k in range(c.shape.d)]
        return CoreSet(c.embedding_mode, c.shape, cores)

    # -- item embeddings ---------------------------------------------------------

    def item_embeddings(self, ids: np.ndarray) -> Tensor:
        """Embeddings for ``ids`` (any shape) -> ids.shape + (N,)."""
        ids = np.asarray(ids, dtype=np.int64)
        flat = ids.reshape(-1)
        c = self.config
        if flat.size and (flat.min() < 0 or flat.max() >= c.num_items):
            raise IndexError(f"unknown item id; catalog has {c.num_items} items")
        if c.embedding_mode is Mode.DENSE:
            rows = ag.gather(self.store["item.table"], flat)
        else:
            rows = self._core_lookup(flat)
        return rows.reshape(ids.shape + (c.embed_dim,))

    def _core_lookup(self, flat: np.ndarray) -> Tensor:
        shape = self.config.shape
        I, J, R = shape.item_factors, shape.dim_factors, shape.rank
        sttd = self.config.embedding_mode is Mode.STTD
        n = shape.stp_divisor if sttd else 1
        d = shape.d
        digits = factorize_indices(flat, I)
        B = flat.size
        core = lambda k: self.store[f"item.core_{k + 1}"]  # noqa: E731

        first = core(0) if sttd else core(0).reshape(I[0] * J[0], R)
        L = ag.gather(first.reshape(I[0], J[0] * R), digits[0]).reshape(B, J[0], R)
        for k in range(1, d):
            last = k == d - 1
            ck = core(k)
            if not sttd and last:
                ck = ck.reshape(R, I[k] * J[k])
            g = J[k] // n
            rows = ck.shape[0]
            tail = g if last else g * R
            sl = ag.transpose(ck.reshape(rows, I[k], tail), (1, 0, 2))
            M = ag.gather(sl, digits[k])                       # (B, R/n, tail)
            H = L.shape[1]
            out = ag.stp(L, M, n)                              # (B, H, tail*n)
            if last:
                L = out.reshape(B, H * J[k])
            else:
                out = ag.transpose(out.reshape(B, H, g, R, n), (0, 1, 2, 4, 3))
                L = out.reshape(B, H * J[k], R)
        return L.reshape(B, self.config.embed_dim)

    def item_table(self) -> Tensor:
        if self.config.embedding_mode is Mode.DENSE:
            return self.store["item.table"]
        return self.item_embeddings(np.arange(self.config.num_items))

    # -- encoder -------------------------------------------------------------------

    def embed_sequence(self, batch: Batch, table: Tensor | None = None,
                       training: bool = False) -> Tensor:
        """Item embedding plus position embedding for each (right-padded) slot."""
        l = batch.items.shape[1]
        if l > self.config.max_seq_len:
            raise ValueError(f"sequence length {l} exceeds max_seq_len {self.config.max_seq_len}")
        if table is None:
            x = self.item_embeddings(batch.items)
        else:
            x = ag.gather(table, batch.items.reshape(-1)).reshape(batch.items.shape + (-1,))
        pos = ag.gather(self.store["pos"], np.arange(l))
        x = x + pos
        return ag.dropout(x, self.config.dropout, self.rng, training)

    def attention_block(self, x: Tensor, layer: int, training: bool = False) -> Tensor:
        """Causal multi-head self-attention then the position-wise FFN."""
        c = self.config
        p = f"block{layer}."
        P = self.store
        B, l, N = x.shape
        h = c.num_heads
        dh = N // h

        def heads(t):
            return ag.transpose(t.reshape(B, l, h, dh), (0, 2, 1, 3))

        q = heads(x @ P[p + "wq"] + P[p + "bq"])
        k = heads(x @ P[p + "wk"])
        v = heads(x @ P[p + "wv"] + P[p + "bv"])
        scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        future = np.triu(np.ones((l, l), dtype=bool), k=1)
        attn = ag.softmax(ag.masked_fill(scores, future, NEG_INF), axis=-1)
        ctx = ag.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, l, N)
        out = ctx @ P[p + "wo"] + P[p + "bo"]
        out = ag.dropout(out, c.dropout, self.rng, training)
        f = ag.layer_norm(x + out) * P[p + "ln1_g"] + P[p + "ln1_b"]
        hid = ag.relu(f @ P[p + "ffn_w1"] + P[p + "ffn_b1"])
        hid = hid @ P[p + "ffn_w2"] + P[p + "ffn_b2"]
        hid = ag.dropout(hid, c.dropout, self.rng, training)
        return ag.layer_norm(f + hid) * P[p + "ln2_g"] + P[p + "ln2_b"]

    def encode(self, batch: Batch, table: Tensor | None = None, training: bool = False) -> Tensor:
        x = self.embed_sequence(batch, table, training)
        for layer in range(self.config.num_layers):
            x = self.attention_block(x, layer, training)
        return x

    def readout(self, theta_rows: Tensor, mask: np.ndarray) -> SessionRepresentation:
        """Soft-attention pooling; coefficients are used unnormalised."""
        P = self.store
        m = mask.astype(self.dtype)[..., None]                      # (B, l, 1)
        counts = m.sum(axis=1)                                       # (B, 1)
        if np.any(counts == 0):
            raise ValueError("readout over an empty session")
        xs = (theta_rows * m).sum(axis=1) * (1.0 / counts)            # (B, N)
        pre = (xs @ P["readout.w1"]).reshape(xs.shape[0], 1, -1) + theta_rows @ P["readout.w2"]
        gate = ag.sigmoid(pre + P["readout.c"])
        alpha = (gate @ P["readout.f"]) * mask.astype(self.dtype)     # (B, l)
        theta = (theta_rows * alpha.reshape(alpha.shape + (1,))).sum(axis=1)
        return SessionRepresentation(theta, alpha, mask)

    def represent(self, batch: Batch, table: Tensor | None = None,
                  training: bool = False) -> SessionRepresentation:
        return self.readout(self.encode(batch, table, training), batch.mask)

    # -- scoring ---------------------------------------------------------------------

    def logits(self, theta: Tensor, table: Tensor | None = None) -> Tensor:
        table = self.item_table() if table is None else table
        return theta @ ag.transpose(table, (1, 0))

    def score_items(self, theta: Tensor, table: Tensor | None = None) -> Tensor:
        return ag.softmax(self.logits(theta, table), axis=-1)

    def forward(self, batch: Batch, training: bool = False) -> tuple[Tensor, Tensor]:
        """(theta, probabilities) for every session in ``batch``."""
        table = self.item_table()
        rep = self.represent(batch, table, training)
        return rep.theta, self.score_items(rep.theta, table)

    # -- persistence -------------------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict(), **(extra or {})}
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path, dtype=np.float32, seed: int = 0) -> "SessionRecModel":
        meta, tensors = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        model = cls(config, seed=seed, dtype=dtype)
        model.store.load_state(tensors)
        return model

    def clone_as(self, dtype) -> "SessionRecModel":
        other = SessionRecModel(self.config, dtype=dtype)
        other.store.load_state(self.store.state())
        return other


def model_forward(batch: Batch, model: SessionRecModel, training: bool = False):
    return model.forward(batch, training)


def _prob_bounds(dtype) -> tuple[float, float]:
    one = np.asarray(1.0, dtype=dtype)
    hi = one - np.asarray(PROB_FLOOR, dtype=dtype)
    if hi >= one:
        hi = np.nextafter(one, np.asarray(0.0, dtype=dtype))
    return PROB_FLOOR, float(hi)


def rec_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy over the whole catalog, summed over the batch.

    ``-sum_v y_v log p_v + (1 - y_v) log(1 - p_v)`` per session, with
    probabilities clipped away from 0 and 1.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, V = probs.shape
    onehot = np.zeros((B, V), dtype=probs.dtype)
    onehot[np.arange(B), labels] = 1.0
    lo, hi = _prob_bounds(probs.dtype)
    p = ag.clamp(probs, lo, hi)
    ll = ag.log(p) * onehot + ag.log(1.0 - p) * (1.0 - onehot)
    return -ll.sum()
