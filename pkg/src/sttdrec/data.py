"""Session logs: ingestion, filtering, splitting, prefix augmentation, synthetic data."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Instance = tuple[list[int], int]


@dataclass(frozen=True)
class FormatSpec:
    delimiter: str = ","
    session_column: str = "session_key"
    item_column: str = "item_key"
    time_column: str = "timestamp"


@dataclass(frozen=True)
class RawEvent:
    session_key: str
    item_key: str
    timestamp: int


def ingest(path: str | Path, fmt: FormatSpec = FormatSpec()) -> dict[str, list[str]]:
    """Group events by session, each session sorted by timestamp (stable for ties).

    Sessions come back in order of first appearance in the file.
    """
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise ValueError(f"{path}: empty file")
    return ingest_events(parse_events(io.StringIO(text), fmt, str(path)))


def parse_events(fh, fmt: FormatSpec = FormatSpec(), source: str = "<input>") -> list[RawEvent]:
    reader = csv.reader(fh, delimiter=fmt.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError(f"{source}: empty file") from None
    try:
        cols = [header.index(c) for c in (fmt.session_column, fmt.item_column, fmt.time_column)]
    except ValueError:
        raise ValueError(f"{source}:1: header {header} lacks one of "
                         f"{fmt.session_column!r}, {fmt.item_column!r}, {fmt.time_column!r}") from None
    events = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            s, i, t = (row[c] for c in cols)
            events.append(RawEvent(s, i, int(t)))
        except (IndexError, ValueError):
            raise ValueError(f"{source}:{lineno}: cannot parse line {row!r}") from None
    if not events:
        raise ValueError(f"{source}: no events")
    return events


def ingest_events(events: Iterable[RawEvent]) -> dict[str, list[str]]:
    grouped: dict[str, list[tuple[int, int, str]]] = {}
    for n, ev in enumerate(events):
        grouped.setdefault(ev.session_key, []).append((ev.timestamp, n, ev.item_key))
    return {k: [item for _, _, item in sorted(v)] for k, v in grouped.items()}


@dataclass
class Preprocessed:
    session_keys: list[str]
    sessions: list[list[int]]
    vocab: list[str]


def preprocess(raw: dict[str, list[str]], min_item_count: int = 5,
               min_session_len: int = 2) -> Preprocessed:
    """Drop rare items once, then short sessions once; re-index items densely.

    Item ids follow first appearance in the surviving sessions.
    """
    if not raw:
        raise ValueError("no sessions to preprocess")
    counts = Counter(item for s in raw.values() for item in s)
    kept_keys, kept = [], []
    for key, items in raw.items():
        items = [v for v in items if counts[v] >= min_item_count]
        if len(items) >= min_session_len:
            kept_keys.append(key)
            kept.append(items)
    if not kept:
        rare = sum(1 for c in counts.values() if c < min_item_count)
        raise ValueError(
            f"everything was filtered out: {len(raw)} sessions, {len(counts)} items "
            f"({rare} with fewer than {min_item_count} occurrences)")
    index: dict[str, int] = {}
    sessions = []
    for items in kept:
        sessions.append([index.setdefault(v, len(index)) for v in items])
    return Preprocessed(kept_keys, sessions, list(index))


def sequence_split_augment(session: Sequence[int]) -> list[Instance]:
    """``[a, b, c]`` -> ``([a], b), ([a, b], c)``."""
    if len(session) < 2:
        raise ValueError(f"session of length {len(session)} cannot be augmented")
    return [(list(session[:t]), session[t]) for t in range(1, len(session))]


def augment_all(sessions: Iterable[Sequence[int]]) -> list[Instance]:
    out: list[Instance] = []
    for s in sessions:
        if len(s) >= 2:
            out.extend(sequence_split_augment(s))
    return out


@dataclass
class DatasetBundle:
    vocab: list[str]
    train: list[list[int]]
    valid: list[list[int]]
    test: list[Instance]
    seed: int = 0
    train_instances: list[Instance] = field(default_factory=list, repr=False)
    valid_instances: list[Instance] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.train_instances:
            self.train_instances = augment_all(self.train)
        if not self.valid_instances:
            self.valid_instances = augment_all(self.valid)

    @property
    def num_items(self) -> int:
        return len(self.vocab)

    @property
    def popularity(self) -> np.ndarray:
        """Occurrences of each item in the training sessions (before augmentation)."""
        counts = np.zeros(self.num_items, dtype=np.int64)
        for s in self.train:
            np.add.at(counts, np.asarray(s, dtype=np.int64), 1)
        return counts

    def statistics(self) -> dict:
        lengths = [len(s) for s, _ in self.test]
        full = [n + 1 for n in lengths]
        return {
            "train_sessions": len(self.train_instances),
            "valid_sessions": len(self.valid_instances),
            "test_sessions": len(self.test),
            "items": self.num_items,
            "avg_length": float(np.mean(full)) if full else 0.0,
        }

    def format_statistics(self) -> str:
        st = self.statistics()
        return ("#train instances  #valid instances  #test sessions  #items  avg length\n"
                f"{st['train_sessions']:>16}  {st['valid_sessions']:>16}  "
                f"{st['test_sessions']:>14}  {st['items']:>6}  {st['avg_length']:>10.2f}")

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.vocab == other.vocab and self.train == other.train
                and self.valid == other.valid and self.test == other.test
                and self.train_instances == other.train_instances
                and self.valid_instances == other.valid_instances)


def split(pre: Preprocessed, val_fraction: float = 0.1, seed: int = 0) -> DatasetBundle:
    """Last item of every session is its test label; the rest is training data.

    ``round(val_fraction * n)`` of the ``n`` training prefixes that still
    yield at least one instance are moved to validation (seeded).
    """
    test, prefixes = [], []
    for s in pre.sessions:
        test.append((list(s[:-1]), s[-1]))
        prefixes.append(list(s[:-1]))
    usable = [i for i, p in enumerate(prefixes) if len(p) >= 2]
    n_val = int(math.floor(val_fraction * len(usable) + 0.5))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.choice(usable, size=n_val, replace=False).tolist()) if n_val else set()
    train = [p for i, p in enumerate(prefixes) if i not in val_idx]
    valid = [prefixes[i] for i in sorted(val_idx)]
    return DatasetBundle(list(pre.vocab), train, valid, test, seed)


def build_bundle(raw: dict[str, list[str]], min_item_count: int = 5, val_fraction: float = 0.1,
                 seed: int = 0) -> DatasetBundle:
    return split(preprocess(raw, min_item_count), val_fraction, seed)


# -- bundle file ----------------------------------------------------------------

BUNDLE_MAGIC = b"STTDDATA"
BUNDLE_VERSION = 1


def _pack(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    flat = np.array([v for s in seqs for v in s], dtype=np.int64)
    return offsets, flat


def _unpack(offsets: np.ndarray, flat: np.ndarray) -> list[list[int]]:
    return [flat[offsets[i]:offsets[i + 1]].tolist() for i in range(len(offsets) - 1)]


def save_bundle(bundle: DatasetBundle, path: str | Path) -> None:
    """Magic, version, JSON header (vocabulary, array manifest), int64 LE arrays."""
    arrays = {}
    for name, seqs in (("train", bundle.train), ("valid", bundle.valid),
                       ("test_input", [s for s, _ in bundle.test]),
                       ("train_inst", [s for s, _ in bundle.train_instances]),
                       ("valid_inst", [s for s, _ in bundle.valid_instances])):
        arrays[name + ".offsets"], arrays[name + ".items"] = _pack(seqs)
    arrays["test_labels"] = np.array([y for _, y in bundle.test], dtype=np.int64)
    arrays["train_inst.labels"] = np.array([y for _, y in bundle.train_instances], dtype=np.int64)
    arrays["valid_inst.labels"] = np.array([y for _, y in bundle.valid_instances], dtype=np.int64)
    header = {"version": BUNDLE_VERSION, "seed": bundle.seed, "vocab": bundle.vocab,
              "arrays": [[k, int(v.size)] for k, v in arrays.items()]}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<II", BUNDLE_VERSION, len(raw)))
    buf.write(raw)
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<i8").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_bundle(path: str | Path) -> DatasetBundle:
    data = Path(path).read_bytes()
    if data[:8] != BUNDLE_MAGIC:
        raise ValueError(f"{path}: not a dataset bundle")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported bundle version {version}")
    header = json.loads(data[16:16 + hlen])
    pos = 16 + hlen
    arrays = {}
    for name, size in header["arrays"]:
        arrays[name] = np.frombuffer(data, dtype="<i8", count=size, offset=pos).astype(np.int64)
        pos += 8 * size
    seqs = {k: _unpack(arrays[k + ".offsets"], arrays[k + ".items"])
            for k in ("train", "valid", "test_input", "train_inst", "valid_inst")}
    test = list(zip(seqs["test_input"], arrays["test_labels"].tolist()))
    return DatasetBundle(
        header["vocab"], seqs["train"], seqs["valid"], [(list(s), y) for s, y in test],
        header["seed"],
        [(s, y) for s, y in zip(seqs["train_inst"], arrays["train_inst.labels"].tolist())],
        [(s, y) for s, y in zip(seqs["valid_inst"], arrays["valid_inst.labels"].tolist())],
    )


# -- synthetic data -----------------------------------------------------------------

def synth_sessions(num_items: int = 200, num_sessions: int = 2000, length_range=(3, 10),
                   sharpness: float = 1.0, seed: int = 0, skew: float = 1.2,
                   branching: int = 4, cyclic: bool = False) -> dict[str, list[str]]:
    """Random walks over a sparse item-transition graph with Zipf popularity.

    Each item has ``branching`` candidate successors drawn by popularity and
    ordered most popular first; the walk picks candidate ``r`` with weight
    ``exp(-sharpness * r)``.  ``sharpness=inf`` always takes the first one.
    With ``cyclic`` the successor of every item is fixed by one random cycle
    over the catalog.
    """
    if num_items < 10:
        raise ValueError(f"num_items must be >= 10, got {num_items}")
    lo, hi = length_range
    if not 2 <= lo <= hi:
        raise ValueError(f"length_range must satisfy 2 <= min <= max, got {length_range}")
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, num_items + 1) ** skew
    perm = rng.permutation(num_items)            # perm[r] = item with popularity rank r
    weights = np.empty(num_items)
    weights[perm] = pop
    weights /= weights.sum()

    if cyclic:
        order = rng.permutation(num_items)
        nxt = np.empty(num_items, dtype=np.int64)
        nxt[order] = np.roll(order, -1)
        succ = nxt[:, None]
    else:
        branching = min(branching, num_items - 1)
        succ = np.empty((num_items, branching), dtype=np.int64)
        for i in range(num_items):
            w = weights.copy()
            w[i] = 0.0
            cand = rng.choice(num_items, size=branching, replace=False, p=w / w.sum())
            succ[i] = cand[np.argsort(-weights[cand], kind="stable")]
    k = succ.shape[1]
    if math.isinf(sharpness):
        trans = np.zeros(k)
        trans[0] = 1.0
    else:
        trans = np.exp(-sharpness * np.arange(k))
        trans /= trans.sum()

    raw = {}
    for s in range(num_sessions):
        length = int(rng.integers(lo, hi + 1))
        cur = int(rng.choice(num_items, p=weights))
        items = [cur]
        for _ in range(length - 1):
            cur = int(succ[cur, rng.choice(k, p=trans)]) if k > 1 else int(succ[cur, 0])
            items.append(cur)
        raw[f"s{s}"] = [f"i{v}" for v in items]
    return raw


def synth_generate(num_items: int = 200, num_sessions: int = 2000, length_range=(3, 10),
                   sharpness: float = 1.0, seed: int = 0, skew: float = 1.2,
                   branching: int = 4, cyclic: bool = False, min_item_count: int = 5,
                   val_fraction: float = 0.1) -> DatasetBundle:
    raw = synth_sessions(num_items, num_sessions, length_range, sharpness, seed, skew,
                         branching, cyclic)
    return build_bundle(raw, min_item_count, val_fraction, seed)


def write_events_csv(raw: dict[str, list[str]], path: str | Path, delimiter: str = ",") -> None:
    """Write sessions back out as an event log (timestamps = position, in ms)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["session_key", "item_key", "timestamp"])
        for key, items in raw.items():
            for t, item in enumerate(items):
                w.writerow([key, item, t * 1000])
