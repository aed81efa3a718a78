import numpy as np
import pytest

from sttdrec.distill import KDHead, partition_hot_cold
from sttdrec.model import ModelConfig, SessionRecModel
from sttdrec.tt_compress import FactorizedShape

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_pair(seed=0, num_items=20, embed_dim=8, mode="sttd", dtype=np.float64):
    """Teacher, student, KD head and hot/cold split small enough for finite differences."""
    shape = None
    if mode != "dense":
        n = 1 if mode == "ttd" else 2
        shape = FactorizedShape((4, 5), (2, 4), 4, n, num_items=num_items, embed_dim=embed_dim)
    tcfg = ModelConfig(num_items, embed_dim=embed_dim, max_seq_len=5, dropout=0.0)
    scfg = ModelConfig(num_items, embed_dim=embed_dim, max_seq_len=5, dropout=0.0,
                       embedding_mode=mode, shape=shape)
    teacher = SessionRecModel(tcfg, seed=seed, dtype=dtype)
    student = SessionRecModel(scfg, seed=seed + 100, dtype=dtype)
    head = KDHead(embed_dim, seed=seed + 200, dtype=dtype)
    pop = np.random.default_rng(seed).integers(1, 50, size=num_items)
    return teacher, student, head, partition_hot_cold(pop, 0.2)


def random_sessions(rng, num_items, batch, max_len=5):
    sessions = [rng.integers(0, num_items, size=rng.integers(1, max_len + 1)).tolist()
                for _ in range(batch)]
    labels = rng.integers(0, num_items, size=batch)
    return sessions, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
