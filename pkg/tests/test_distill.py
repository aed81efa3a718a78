import math

import numpy as np
import pytest

from sttdrec import autograd as ag
from sttdrec.autograd import Tensor, no_grad
from sttdrec.distill import (
    KDConfig,
    LOG_FIELDS,
    TrainingLog,
    contrastive_loss,
    distill,
    info_nce,
    joint_loss,
    kl_divergence,
    partition_hot_cold,
    predictive_loss,
    read_training_log,
    recombine,
    soft_target_loss,
    split_hot_cold,
    sub_session_representations,
)
from sttdrec.model import pad_sessions, rec_loss
from sttdrec.optim import fd_check

from conftest import random_sessions, tiny_pair


# -- configuration ------------------------------------------------------------------

@pytest.mark.parametrize("kwargs, field", [
    (dict(beta3=1.0), "beta3"),
    (dict(beta1=-0.1), "beta1"),
    (dict(tau=0.0), "tau"),
    (dict(hot_fraction=1.0), "hot_fraction"),
    (dict(batch_size=0), "batch_size"),
])
def test_kd_config_validation(kwargs, field):
    with pytest.raises(ValueError, match=field):
        KDConfig(**kwargs)


def test_ablate_zeroes_only_requested_terms():
    cfg = KDConfig().ablate(cl=False)
    assert (cfg.beta1, cfg.beta2, cfg.beta3) == (0.0, 0.001, 0.8)
    assert KDConfig().ablate(False, False, False).rec_weight == 1.0


# -- hot/cold partition and recombination ----------------------------------------------

def test_partition_sizes_and_tie_break():
    pop = np.array([5, 9, 9, 1, 0, 9, 2, 3, 4, 4])
    part = partition_hot_cold(pop, 0.2)
    assert part.hot == {1, 2}
    assert len(part.hot) + len(part.cold) == 10 and not part.hot & part.cold


def test_split_hot_cold_preserves_order():
    is_hot = np.array([True, False, True, False])
    hot, cold = split_hot_cold([[0, 1, 2, 3, 0], [1, 3]], is_hot)
    assert hot == [[0, 2, 0], []] and cold == [[1, 3], [1, 3]]


def test_recombination_swaps_cold_halves():
    teacher, student, _, part = tiny_pair()
    hot_item = min(part.hot)
    cold_item = min(part.cold)
    sessions = [[hot_item, cold_item], [hot_item], [cold_item, cold_item]]
    with no_grad():
        t = sub_session_representations(teacher, sessions, part)
        s = sub_session_representations(student, sessions, part)
        pair = recombine(t, s)
    N = 8
    zt, zs = pair.z_tea.data, pair.z_stu.data
    # mixed session: teacher-hot + student-cold / student-hot + teacher-cold
    np.testing.assert_array_equal(zt[0], np.concatenate([t.hot.data[0], s.cold.data[0]]))
    np.testing.assert_array_equal(zs[0], np.concatenate([s.hot.data[0], t.cold.data[0]]))
    # hot-only session reuses the hot halves on both sides
    np.testing.assert_array_equal(zt[1], np.concatenate([t.hot.data[1], s.hot.data[1]]))
    np.testing.assert_array_equal(zs[1, N:], t.hot.data[1])
    # cold-only session
    np.testing.assert_array_equal(zt[2], np.concatenate([t.cold.data[2], s.cold.data[2]]))
    assert not t.has_hot[2] and not t.has_cold[1]


def test_sub_session_equals_encoding_the_subsequence():
    teacher, _, _, part = tiny_pair()
    hot_item = min(part.hot)
    cold = sorted(part.cold)[:3]
    sessions = [[cold[0], hot_item, cold[1], cold[2]]]
    with no_grad():
        reps = sub_session_representations(teacher, sessions, part)
        direct = teacher.represent(pad_sessions([cold], 5)).theta.data
    np.testing.assert_allclose(reps.cold.data, direct, atol=1e-12)


# -- loss values ------------------------------------------------------------------------

def test_kl_non_negative_and_zero_on_identical(rng):
    logits = rng.normal(size=(5, 11))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    same = kl_divergence(p, ag.log_softmax(Tensor(logits))).item()
    assert abs(same) < 1e-9
    for _ in range(20):
        other = ag.log_softmax(Tensor(rng.normal(size=(5, 11)) * 3))
        assert kl_divergence(p, other).item() >= 0


def test_kl_handles_zero_teacher_probabilities():
    p = np.array([[1.0, 0.0, 0.0]])
    logq = ag.log_softmax(Tensor(np.array([[2.0, 0.0, -1.0]])))
    val = kl_divergence(p, logq).item()
    assert math.isfinite(val) and val > 0


def test_soft_target_loss_zero_for_identical_models():
    teacher, _, _, _ = tiny_pair()
    batch = pad_sessions([[1, 2], [3]], 5)
    with no_grad():
        theta = teacher.represent(batch).theta
        table = teacher.item_table()
    assert abs(soft_target_loss(theta.data, theta, table.data, table).item()) < 1e-9


def test_info_nce_batch_of_one_is_zero():
    assert info_nce(Tensor(np.array([[0.3]])), 0.2).item() == 0.0


def test_info_nce_two_equal_similarities():
    sim = Tensor(np.full((2, 2), 0.5))
    assert abs(info_nce(sim, 0.2).item() - 2 * math.log(2)) < 1e-6


def test_info_nce_matches_explicit_sum(rng):
    s = rng.uniform(-1, 1, size=(4, 4))
    tau = 0.2
    ref = -sum(s[i, i] / tau - math.log(np.exp(s[i] / tau).sum()) for i in range(4))
    assert abs(info_nce(Tensor(s), tau).item() - ref) < 1e-10


def test_contrastive_loss_single_session_is_zero():
    teacher, student, head, part = tiny_pair()
    with no_grad():
        pair = recombine(sub_session_representations(teacher, [[1, 2]], part),
                         sub_session_representations(student, [[1, 2]], part))
        assert contrastive_loss(pair, head.w_t, head.w_s).item() == 0.0


def test_joint_loss_without_kd_is_bit_equal_to_rec_loss():
    teacher, student, head, part = tiny_pair(dtype=np.float32)
    sessions, labels = random_sessions(np.random.default_rng(0), 20, 6)
    cfg = KDConfig(beta1=0.0, beta2=0.0, beta3=0.0)
    out = joint_loss(sessions, labels, teacher, student, head, part, cfg)
    plain = rec_loss(student.forward(pad_sessions(sessions, 5, labels))[1], labels)
    assert out.total.data.tobytes() == plain.data.tobytes()
    assert math.isnan(out.parts["L_cl"]) and math.isnan(out.parts["L_soft"])


def test_joint_loss_is_weighted_sum_of_parts():
    teacher, student, head, part = tiny_pair()
    sessions, labels = random_sessions(np.random.default_rng(1), 20, 6)
    cfg = KDConfig()
    p = joint_loss(sessions, labels, teacher, student, head, part, cfg).parts
    expect = (0.2 * p["L_rec"] + 0.1 * p["L_cl"] + 0.001 * p["L_pred"] + 0.8 * p["L_soft"])
    assert abs(p["total"] - expect) < 1e-9 * max(1.0, abs(expect))


# -- gradients ---------------------------------------------------------------------------

def _loss_fns(seed):
    teacher, student, head, part = tiny_pair(seed=seed)
    rng = np.random.default_rng(seed)
    sessions, labels = random_sessions(rng, 20, 5)
    batch = pad_sessions(sessions, 5, labels)
    t_table = teacher.item_table().data.copy()
    with no_grad():
        t_theta = teacher.represent(batch, Tensor(t_table)).theta.data
    t_sub = sub_session_representations(teacher, sessions, part, Tensor(t_table))

    def pair():
        return recombine(t_sub, sub_session_representations(student, sessions, part))

    fns = {
        "L_rec": lambda: rec_loss(student.forward(batch)[1], labels),
        "L_cl": lambda: contrastive_loss(pair(), head.w_t, head.w_s, 0.2),
        "L_pred": lambda: predictive_loss(pair(), labels, t_table, student.item_table(),
                                          head.w_tea, head.w_stu),
        "L_soft": lambda: soft_target_loss(t_theta, student.represent(batch).theta, t_table,
                                           student.item_table()),
        "joint": lambda: joint_loss(sessions, labels, teacher, student, head, part,
                                    KDConfig()).total,
    }
    params = [t for _, t in student.store.items()] + [t for _, t in head.store.items()]
    return fns, params


@pytest.mark.parametrize("name", ["L_rec", "L_cl", "L_pred", "L_soft", "joint"])
def test_loss_gradients(name):
    fns, params = _loss_fns(0)
    assert fd_check(fns[name], params, samples_per_param=6) < 1e-4


def test_teacher_gets_no_gradient():
    teacher, student, head, part = tiny_pair()
    teacher.store.freeze()
    sessions, labels = random_sessions(np.random.default_rng(2), 20, 4)
    out = joint_loss(sessions, labels, teacher, student, head, part, KDConfig())
    out.total.backward()
    assert all(t.grad is None for _, t in teacher.store.items())
    assert any(t.grad is not None for _, t in student.store.items())


# -- training loop --------------------------------------------------------------------------

def _instances(rng, n=60):
    sessions, labels = random_sessions(rng, 20, n)
    return list(zip(sessions, labels.tolist()))


def test_distill_keeps_teacher_frozen_and_logs(tmp_path):
    teacher, student, _, part = tiny_pair(dtype=np.float32)
    before = teacher.store.checksum()
    rng = np.random.default_rng(0)
    cfg = KDConfig(epochs=3, batch_size=16, patience=None)
    res = distill(teacher, student, _instances(rng), _instances(rng, 20), part, cfg,
                  log_path=tmp_path / "log.tsv")
    assert teacher.store.checksum() == before
    rows = read_training_log(tmp_path / "log.tsv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert tuple(rows[0]) == LOG_FIELDS
    assert all(math.isfinite(r["L_cl"]) for r in rows)
    assert len(res.history) == 3


def test_ablation_flags_show_up_in_log(tmp_path):
    teacher, student, _, part = tiny_pair(dtype=np.float32)
    rng = np.random.default_rng(0)
    cfg = KDConfig(epochs=1, batch_size=16).ablate(cl=False, soft=False)
    distill(teacher, student, _instances(rng), [], part, cfg, log_path=tmp_path / "l.tsv")
    row = read_training_log(tmp_path / "l.tsv")[0]
    assert math.isnan(row["L_cl"]) and math.isnan(row["L_soft"])
    assert math.isfinite(row["L_pred"]) and math.isfinite(row["L_rec"])


def test_distill_rejects_dimension_mismatch():
    teacher, _, _, part = tiny_pair()
    _, other, _, _ = tiny_pair(embed_dim=16, mode="dense")
    with pytest.raises(ValueError, match="embed_dim"):
        distill(teacher, other, [], [], part, KDConfig(epochs=1))


def test_training_log_appends(tmp_path):
    path = tmp_path / "log.tsv"
    TrainingLog(path).write({"epoch": 1, "L_rec": 2.0})
    TrainingLog(path).write({"epoch": 2, "L_rec": 1.0})
    rows = read_training_log(path)
    assert [r["epoch"] for r in rows] == [1, 2]
