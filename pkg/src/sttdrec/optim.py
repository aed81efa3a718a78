"""Parameter storage, Adam, checkpoints and a finite-difference gradient checker."""
from __future__ import annotations

import hashlib
import io
import math
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .autograd import Tensor
from .serialize import read_chunk, write_chunk

CHECKPOINT_MAGIC = b"STTDCKPT"


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments."""

    def __init__(self, frozen: bool = False):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.frozen = frozen
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=not self.frozen, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def freeze(self) -> None:
        """Stop tracking gradients and drop optimizer state."""
        self.frozen = True
        for t in self._params.values():
            t.requires_grad = False
            t.grad = None
        self.m.clear()
        self.v.clear()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def num_params(self, prefix: str = "") -> int:
        return int(sum(t.data.size for k, t in self._params.items() if k.startswith(prefix)))

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        self.m.clear()
        self.v.clear()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r} in state")
            if arr.shape != self._params[k].shape:
                raise ValueError(f"{k}: extents {arr.shape} != {self._params[k].shape}")
            self._params[k].data = np.array(arr, dtype=self._params[k].dtype, copy=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def adam_step(store: ParamStore, lr: float = 1e-3, beta_m: float = 0.9,
              beta_v: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update with bias correction.

    ``weight_decay`` is an L2 penalty: ``weight_decay * theta`` is added to the
    gradient before the moment updates.  Missing gradients count as zero.
    """
    if store.frozen:
        raise RuntimeError("cannot step a frozen parameter store")
    t = store.step + 1
    bc_m = 1.0 - beta_m ** t
    bc_v = 1.0 - beta_v ** t
    staged = []
    for name, p in store.items():
        g = store.grad(name)
        if weight_decay:
            g = g + weight_decay * p.data
        m = store.m.get(name, 0.0) * beta_m + (1.0 - beta_m) * g
        v = store.v.get(name, 0.0) * beta_v + (1.0 - beta_v) * g * g
        with np.errstate(over="ignore", invalid="ignore"):
            new = p.data - (lr * (m / bc_m) / (np.sqrt(v / bc_v) + eps)).astype(p.dtype)
        if not np.all(np.isfinite(new)):
            # nothing has been written yet, so the store keeps its last finite state
            raise FloatingPointError(f"non-finite entries in {name!r} after optimizer step")
        staged.append((name, p, m, v, new))
    for name, p, m, v, new in staged:
        store.m[name], store.v[name], p.data = m, v, new
    store.step = t


def fd_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
             eps: float | Sequence[float] = 1e-4,
             samples_per_param: int | None = 20, seed: int = 0, floor: float = 1e-6,
             stencil: int = 3, accept: float = 1e-6) -> float:
    """Largest relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    The error for one coordinate is ``|a - f| / max(|a|, |f|, floor)``.
    ``stencil=5`` uses the fourth-order five-point rule, which matters for
    sharply curved losses (low softmax temperature) at the default ``eps``.

    With a sequence of steps, a coordinate whose error is above ``accept`` is
    retried with the next (smaller) step and keeps its best error.  ReLU
    kinks within one step of the evaluation point make a single step size
    unreliable; a wrong gradient does not agree at any step.
    """
    steps = [eps] if np.isscalar(eps) else list(eps)
    if stencil not in (3, 5):
        raise ValueError(f"stencil: expected 3 or 5, got {stencil}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples_per_param is not None and flat.size > samples_per_param:
            coords = rng.choice(flat.size, samples_per_param, replace=False)
        for c in coords:
            orig = flat[c]

            def at(step):
                flat[c] = orig + step
                val = loss_fn().item()
                if not np.isfinite(val):
                    flat[c] = orig
                    raise FloatingPointError("loss is not finite under perturbation")
                return val

            a = analytic.reshape(-1)[c]
            err = math.inf
            for h in steps:
                if stencil == 3:
                    num = (at(h) - at(-h)) / (2 * h)
                else:
                    num = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
                err = min(err, abs(a - num) / max(abs(a), abs(num), floor))
                if err <= accept:
                    break
            flat[c] = orig
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path_or_fh: str | Path | BinaryIO, store: ParamStore, meta: dict | None = None) -> None:
    """Header (format version, manifest, ``meta``) followed by float32 payloads."""
    if isinstance(path_or_fh, (str, Path)):
        path = Path(path_or_fh)
        buf = io.BytesIO()
        write_chunk(buf, CHECKPOINT_MAGIC, {"meta": meta or {}}, store.state())
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
    else:
        write_chunk(path_or_fh, CHECKPOINT_MAGIC, {"meta": meta or {}}, store.state())


def load_checkpoint(path_or_fh: str | Path | BinaryIO) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(path_or_fh, (str, Path)):
        with open(path_or_fh, "rb") as fh:
            header, tensors = read_chunk(fh, CHECKPOINT_MAGIC)
    else:
        header, tensors = read_chunk(path_or_fh, CHECKPOINT_MAGIC)
    return header.get("meta", {}), tensors
