"""Tensor-train (TT) and semi-tensor-product TT (STTD) item embedding tables.

The dense table ``X`` of shape ``(num_items, embed_dim)`` is replaced by a
chain of small cores.  Item index ``i`` is split into a mixed-radix
multi-index ``(i_1, .., i_d)`` over ``item_factors`` and the embedding
dimension into ``(j_1, .., j_d)`` over ``dim_factors``.

Core layouts (``R`` = rank, ``n`` = STP divisor)::

    STTD  core_1 (I_1*J_1, R)
          core_k (R/n, I_k*J_k/n, R)      2 <= k < d
          core_d (R/n, I_d*J_d/n)
    TTD   core_k (R_{k-1}, I_k*J_k, R_k)  R_0 = R_d = 1

Composite indices are row-major: ``i_1*J_1 + j_1`` for core_1 and
``i_k*(J_k/n) + g`` for later cores, where ``g`` selects a group of ``n``
consecutive ``j_k`` values.  The STP expansion index ``r`` fills in the
position inside the group, so ``j_k = g*n + r``.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .serialize import read_chunk, write_chunk

__all__ = [
    "Mode",
    "FactorizedShape",
    "CoreSet",
    "CompressionReport",
    "factorize_index",
    "stp",
    "tt_lookup",
    "sttd_lookup",
    "materialize_table",
    "compression_report",
    "init_cores",
    "save_coreset",
    "load_coreset",
    "PUBLISHED_GRID",
    "PUBLISHED_STUDENTS",
    "DATASETS",
    "factorize_indices",
    "coreset_to_bytes",
    "coreset_from_bytes",
    "student_shape",
    "grid_shape",
]


class Mode(str, enum.Enum):
    DENSE = "dense"
    TTD = "ttd"
    STTD = "sttd"


@dataclass(frozen=True)
class FactorizedShape:
    item_factors: tuple[int, ...]
    dim_factors: tuple[int, ...]
    rank: int
    stp_divisor: int = 1
    num_items: int | None = None
    embed_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "item_factors", tuple(int(v) for v in self.item_factors))
        object.__setattr__(self, "dim_factors", tuple(int(v) for v in self.dim_factors))
        if self.num_items is None:
            object.__setattr__(self, "num_items", math.prod(self.item_factors))
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", math.prod(self.dim_factors))
        self.validate()

    @property
    def d(self) -> int:
        return len(self.item_factors)

    @property
    def padded_items(self) -> int:
        return math.prod(self.item_factors)

    def validate(self, mode: Mode | str = Mode.STTD) -> None:
        I, J, R, n = self.item_factors, self.dim_factors, self.rank, self.stp_divisor
        if len(I) != len(J):
            raise ValueError(
                f"item_factors {I} and dim_factors {J} must have equal length")
        if len(I) < 2:
            raise ValueError(f"item_factors: need at least 2 factors, got {len(I)}")
        for name, seq in (("item_factors", I), ("dim_factors", J)):
            if any(v < 1 for v in seq):
                raise ValueError(f"{name}: factors must be positive, got {seq}")
        for name, v in (("rank", R), ("stp_divisor", n),
                        ("num_items", self.num_items), ("embed_dim", self.embed_dim)):
            if v < 1:
                raise ValueError(f"{name}: must be a positive integer, got {v}")
        if math.prod(I) < self.num_items:
            raise ValueError(
                f"item_factors: product {math.prod(I)} < num_items {self.num_items}")
        if math.prod(J) != self.embed_dim:
            raise ValueError(
                f"dim_factors: product {math.prod(J)} != embed_dim {self.embed_dim}")
        if R % n:
            raise ValueError(f"stp_divisor: n={n} does not divide rank R={R}")
        for k, jk in enumerate(J[1:], start=2):
            if jk % n:
                raise ValueError(
                    f"stp_divisor: n={n} does not divide dim factor J_{k}={jk}")
        if Mode(mode) is Mode.TTD and n != 1:
            raise ValueError(f"stp_divisor: TTD mode requires n=1, got {n}")

    def core_extents(self, mode: Mode | str) -> list[tuple[int, ...]]:
        mode = Mode(mode)
        I, J, R, n = self.item_factors, self.dim_factors, self.rank, self.stp_divisor
        d = self.d
        if mode is Mode.DENSE:
            return [(self.num_items, self.embed_dim)]
        if mode is Mode.TTD:
            ranks = [1] + [R] * (d - 1) + [1]
            return [(ranks[k], I[k] * J[k], ranks[k + 1]) for k in range(d)]
        ext = [(I[0] * J[0], R)]
        for k in range(1, d - 1):
            ext.append((R // n, I[k] * J[k] // n, R))
        ext.append((R // n, I[-1] * J[-1] // n))
        return ext

    def param_count(self, mode: Mode | str) -> int:
        """Closed-form parameter count of the cores (not counted from arrays)."""
        mode = Mode(mode)
        I, J, R, n = self.item_factors, self.dim_factors, self.rank, self.stp_divisor
        d = self.d
        if mode is Mode.DENSE:
            return self.num_items * self.embed_dim
        if mode is Mode.TTD:
            mid = sum(I[k] * J[k] * R * R for k in range(1, d - 1))
            return I[0] * J[0] * R + mid + I[-1] * J[-1] * R
        # middle cores are k=2..d-1 (1-based); R=4 grid: 736 = 160 + 160 + 400 + 16
        mid = sum(I[k] * J[k] * R * R // (n * n) for k in range(1, d - 1))
        return I[0] * J[0] * R + mid + I[-1] * J[-1] * R // (n * n)


@dataclass
class CoreSet:
    mode: Mode
    shape: FactorizedShape
    cores: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.shape.validate(self.mode)
        expected = self.shape.core_extents(self.mode)
        if len(self.cores) != len(expected):
            raise ValueError(f"expected {len(expected)} cores, got {len(self.cores)}")
        for k, (core, ext) in enumerate(zip(self.cores, expected)):
            if tuple(core.shape) != ext:
                raise ValueError(f"core_{k + 1}: extents {core.shape} != expected {ext}")

    @property
    def num_params(self) -> int:
        return int(sum(c.size for c in self.cores))

    def astype(self, dtype) -> "CoreSet":
        return CoreSet(self.mode, self.shape, [c.astype(dtype) for c in self.cores])


@dataclass(frozen=True)
class CompressionReport:
    params_original: int
    params_compressed: int
    rate: float
    per_core_sizes: tuple[int, ...]
    params_padded: int
    """``prod(I_k J_k)``, the numerator printed in the rate formula (padded catalog)."""
    rate_padded: float

    @property
    def rounded_rate(self) -> int:
        """Rate rounded half up, the way published rates are quoted."""
        return math.floor(self.rate + 0.5)

    def __str__(self) -> str:
        return (f"original={self.params_original} compressed={self.params_compressed} "
                f"rate={self.rate:.2f} (padded-numerator rate={self.rate_padded:.2f}) "
                f"cores={list(self.per_core_sizes)}")


def factorize_index(i: int, item_factors: Sequence[int]) -> tuple[int, ...]:
    """Mixed-radix digits of ``i``, first factor most significant."""
    total = math.prod(item_factors)
    if not 0 <= i < total:
        raise IndexError(f"index {i} out of range [0, {total})")
    digits = []
    for f in reversed(item_factors):
        i, r = divmod(i, f)
        digits.append(r)
    return tuple(reversed(digits))


def factorize_indices(idx: np.ndarray, item_factors: Sequence[int]) -> list[np.ndarray]:
    """Vectorised :func:`factorize_index` over an integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    total = math.prod(item_factors)
    if idx.size and (idx.min() < 0 or idx.max() >= total):
        raise IndexError(f"indices out of range [0, {total})")
    out = []
    for f in reversed(item_factors):
        idx, r = np.divmod(idx, f)
        out.append(r)
    return out[::-1]


def stp(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """Left semi-tensor product of ``a`` (H, n*P) and ``b`` (P, Q).

    Block ``(h, q)`` of the result is ``sum_p a[h, p*n:(p+1)*n] * b[p, q]``;
    the result has shape (H, n*Q).  Leading batch axes broadcast.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    P, Q = b.shape[-2:]
    if a.shape[-1] != n * P:
        raise ValueError(
            f"stp: left operand has {a.shape[-1]} columns, expected n*P = {n}*{P}")
    H = a.shape[-2]
    a4 = a.reshape(a.shape[:-1] + (P, n))
    c = np.einsum("...hpr,...pq->...hqr", a4, b)
    return c.reshape(c.shape[:-3] + (H, Q * n))


def _check_index(i: int, shape: FactorizedShape) -> None:
    if not 0 <= i < shape.num_items:
        raise IndexError(f"item index {i} out of range [0, {shape.num_items})")


def tt_lookup(cores: CoreSet, i: int) -> np.ndarray:
    """Row ``i`` of a TTD table by the chain product of core slices."""
    if cores.mode is not Mode.TTD:
        raise ValueError(f"tt_lookup needs TTD cores, got {cores.mode.value}")
    shape = cores.shape
    _check_index(i, shape)
    idx = factorize_index(i, shape.item_factors)
    J = shape.dim_factors
    # acc has shape (J_1*..*J_k, R_k)
    acc = np.ones((1, 1), dtype=cores.cores[0].dtype)
    for k, core in enumerate(cores.cores):
        sl = core[:, idx[k] * J[k]:(idx[k] + 1) * J[k], :]        # (R_{k-1}, J_k, R_k)
        acc = np.einsum("ar,rjb->ajb", acc, sl).reshape(-1, core.shape[2])
    return acc.reshape(-1)


def _sttd_slices(cores: CoreSet, idx: Sequence[int]) -> list[np.ndarray]:
    shape = cores.shape
    J, n = shape.dim_factors, shape.stp_divisor
    c = cores.cores
    if cores.mode is Mode.TTD:
        c = [c[0].reshape(c[0].shape[1], -1), *c[1:-1], c[-1].reshape(c[-1].shape[0], -1)]
    d = shape.d
    mats = [c[0][idx[0] * J[0]:(idx[0] + 1) * J[0], :]]
    for k in range(1, d - 1):
        g = J[k] // n
        sl = c[k][:, idx[k] * g:(idx[k] + 1) * g, :]
        mats.append(sl.reshape(sl.shape[0], -1))
    g = J[-1] // n
    mats.append(c[-1][:, idx[-1] * g:(idx[-1] + 1) * g])
    return mats


def sttd_lookup(cores: CoreSet, i: int, shape: FactorizedShape | None = None) -> np.ndarray:
    """Row ``i`` of an STTD table via the STP chain over per-item slices.

    Accepts TTD cores too, in which case ``n`` is 1 and the chain is the
    ordinary TT product.
    """
    shape = shape or cores.shape
    if cores.mode is Mode.DENSE:
        raise ValueError("sttd_lookup needs TTD or STTD cores")
    _check_index(i, shape)
    n = shape.stp_divisor if cores.mode is Mode.STTD else 1
    R = shape.rank
    mats = _sttd_slices(cores, factorize_index(i, shape.item_factors))
    L = mats[0]                                     # (J_1, R)
    for k, M in enumerate(mats[1:-1], start=1):
        H = L.shape[0]
        C = stp(L, M, n)                             # (H, (J_k/n)*R*n)
        C = C.reshape(H, -1, R, n).transpose(0, 1, 3, 2)
        L = C.reshape(H * shape.dim_factors[k], R)
    return stp(L, mats[-1], n).reshape(-1)


def materialize_table(cores: CoreSet) -> np.ndarray:
    """Full ``(num_items, embed_dim)`` table.

    Works on all items at once through the Kronecker form of the STP,
    ``A ⋉ B = A (B ⊗ I_n)``, so it shares no slicing code with the lookups.
    """
    shape = cores.shape
    if cores.mode is Mode.DENSE:
        return cores.cores[0]
    I, J = shape.item_factors, shape.dim_factors
    d = shape.d
    if cores.mode is Mode.TTD:
        full = cores.cores[0].reshape(I[0], J[0], -1)
        for k in range(1, d):
            core = cores.cores[k].reshape(cores.cores[k].shape[0], I[k], J[k], -1)
            full = np.tensordot(full, core, axes=([-1], [0]))
        full = full[..., 0]
    else:
        n, R = shape.stp_divisor, shape.rank
        eye = np.eye(n, dtype=cores.cores[0].dtype)
        full = cores.cores[0].reshape(I[0], J[0], R)
        for k in range(1, d):
            core = cores.cores[k]
            last = k == d - 1
            wide = np.kron(core.reshape(core.shape[0], -1), eye)
            lead = full.shape[:-1]
            prod = full.reshape(-1, R) @ wide
            if last:
                prod = prod.reshape(lead + (I[k], J[k] // n, n))
                full = prod.reshape(lead + (I[k], J[k]))
            else:
                prod = prod.reshape(lead + (I[k], J[k] // n, R, n))
                prod = np.swapaxes(prod, -1, -2)
                full = prod.reshape(lead + (I[k], J[k], R))
    order = [2 * k for k in range(d)] + [2 * k + 1 for k in range(d)]
    table = full.transpose(order).reshape(math.prod(I), math.prod(J))
    return table[: shape.num_items]


def compression_report(shape: FactorizedShape, mode: Mode | str = Mode.STTD) -> CompressionReport:
    mode = Mode(mode)
    shape.validate(mode)
    per_core = tuple(math.prod(e) for e in shape.core_extents(mode))
    compressed = shape.param_count(mode)
    assert compressed == sum(per_core)
    original = shape.num_items * shape.embed_dim
    padded = shape.padded_items * shape.embed_dim
    return CompressionReport(
        params_original=original,
        params_compressed=compressed,
        rate=original / compressed,
        per_core_sizes=per_core,
        params_padded=padded,
        rate_padded=padded / compressed,
    )


def init_cores(shape: FactorizedShape, mode: Mode | str, seed: int | np.random.Generator,
               dtype=np.float32, scale: float = 0.1) -> CoreSet:
    """Cores drawn from U(-scale, scale)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cores = [rng.uniform(-scale, scale, size=ext).astype(dtype)
             for ext in shape.core_extents(mode)]
    return CoreSet(Mode(mode), shape, cores)


# -- serialization ---------------------------------------------------------

CORESET_MAGIC = b"STTDCORE"


def save_coreset(cores: CoreSet, fh: BinaryIO) -> None:
    s = cores.shape
    header = {
        "mode": cores.mode.value,
        "item_factors": list(s.item_factors),
        "dim_factors": list(s.dim_factors),
        "rank": s.rank,
        "stp_divisor": s.stp_divisor,
        "num_items": s.num_items,
        "embed_dim": s.embed_dim,
    }
    write_chunk(fh, CORESET_MAGIC, header,
                {f"core_{k + 1}": c for k, c in enumerate(cores.cores)})


def load_coreset(fh: BinaryIO) -> CoreSet:
    h, tensors = read_chunk(fh, CORESET_MAGIC)
    shape = FactorizedShape(h["item_factors"], h["dim_factors"], h["rank"],
                            h["stp_divisor"], h["num_items"], h["embed_dim"])
    return CoreSet(Mode(h["mode"]), shape, list(tensors.values()))


def coreset_to_bytes(cores: CoreSet) -> bytes:
    buf = io.BytesIO()
    save_coreset(cores, buf)
    return buf.getvalue()


def coreset_from_bytes(data: bytes) -> CoreSet:
    return load_coreset(io.BytesIO(data))


# -- published configurations ------------------------------------------------

PUBLISHED_GRID = {
    # rank: (ttd_size, ttd_rate, sttd_size, sttd_rate) for items (10,10,25,8), dims (4,4,4,2), n=2
    4: (2464, 1039, 736, 3478),
    8: (9408, 272, 2592, 988),
    16: (36736, 70, 9664, 265),
}

_TMALL = {"num_items": 40728, "embed_dim": 128, "shapes": {
    1: ((169, 241), (16, 8)),
    2: ((169, 241), (32, 4)),
    3: ((13, 13, 241), (8, 4, 4)),
    4: ((13, 13, 241), (8, 8, 2)),
}}
_RETAILROCKET = {"num_items": 36968, "embed_dim": 256, "shapes": {
    1: ((117, 316), (16, 16)),
    2: ((117, 316), (32, 8)),
    3: ((18, 26, 79), (8, 8, 4)),
    4: ((18, 26, 79), (16, 4, 4)),
}}
DATASETS = {"tmall": _TMALL, "retailrocket": _RETAILROCKET}

# (dataset, student, rank, n) -> published CR; the distinct cells of the three tables
PUBLISHED_STUDENTS = {
    ("tmall", 1, 60, 2): 27, ("tmall", 2, 60, 2): 15,
    ("tmall", 3, 60, 2): 77, ("tmall", 4, 60, 2): 49,
    ("retailrocket", 1, 100, 2): 30, ("retailrocket", 2, 100, 2): 22,
    ("retailrocket", 3, 100, 2): 17, ("retailrocket", 4, 100, 2): 32,
    ("tmall", 1, 20, 2): 82, ("tmall", 1, 40, 2): 41,
    ("tmall", 3, 80, 2): 47, ("tmall", 3, 100, 2): 32,
    ("retailrocket", 1, 40, 2): 75, ("retailrocket", 1, 60, 2): 50,
    ("retailrocket", 1, 80, 2): 38, ("retailrocket", 3, 40, 2): 102,
    ("retailrocket", 3, 60, 2): 47, ("retailrocket", 3, 80, 2): 26,
    ("tmall", 1, 40, 4): 46, ("tmall", 1, 60, 4): 31,
    ("retailrocket", 1, 40, 4): 108, ("retailrocket", 1, 60, 4): 72,
}


def student_shape(dataset: str, student: int, rank: int, n: int) -> FactorizedShape:
    info = DATASETS[dataset]
    items, dims = info["shapes"][student]
    return FactorizedShape(items, dims, rank, n, info["num_items"], info["embed_dim"])


def grid_shape(rank: int, n: int = 2) -> FactorizedShape:
    return FactorizedShape((10, 10, 25, 8), (4, 4, 4, 2), rank, n)
