import copy

import numpy as np
import pytest

from mgaa.allocate import AllocationConfig, sid_str
from mgaa.decompose import FactorPair
from mgaa.errors import (
    EmptyDatasetError,
    InvalidConfigError,
    MissingStatsError,
    PlanModelMismatchError,
    TokenOutOfRangeError,
)
from mgaa.harness import (
    CaptureRequest,
    ToyModelConfig,
    apply_plan,
    collect_calibration,
    forward,
    init_toy_model,
    measure_losses,
    prepare_sublayer,
    replace_slots,
    run,
    unit_dims,
    unit_names,
)
from mgaa.pipeline import plan_from_stats
from oracles import mean_cosine, reference_forward

from conftest import SMALL


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        ToyModelConfig(hidden=10, heads=3)
    with pytest.raises(InvalidConfigError):
        ToyModelConfig(layers=0)


def test_default_config_counts():
    cfg = ToyModelConfig()
    assert cfg.sublayer_params("mha") == 4 * 64 * 64
    assert cfg.sublayer_params("ffn") == 3 * 64 * 172
    assert len(cfg.sublayer_ids()) == 8
    assert unit_dims(cfg, "wqk") == (64, 128)
    assert unit_dims(cfg, "wd") == (172, 64)
    assert unit_names("mha", "joint_pca") == ("wqk", "wv", "wo")


def test_init_deterministic():
    a, b = init_toy_model(SMALL), init_toy_model(SMALL)
    np.testing.assert_array_equal(a.embedding, b.embedding)
    np.testing.assert_array_equal(a.slot(1, "wd"), b.slot(1, "wd"))
    c = init_toy_model(ToyModelConfig(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.embedding, c.embedding)


def test_forward_matches_reference(small_model):
    tokens = np.array([1, 5, 7, 2, 39, 0, 12])
    logits, hidden = run(small_model, tokens)
    ref_logits, ref_hidden = reference_forward(small_model, tokens)
    np.testing.assert_allclose(hidden, ref_hidden, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(logits, ref_logits, rtol=1e-10, atol=1e-10)


def test_forward_is_causal(small_model):
    a = np.array([3, 4, 5, 6, 7])
    b = np.array([3, 4, 5, 9, 1])
    la, _ = run(small_model, a)
    lb, _ = run(small_model, b)
    np.testing.assert_array_equal(la[:3], lb[:3])


def test_capture_is_passive(small_model, small_calib):
    seq = small_calib[0]
    plain, _ = forward(small_model, seq, None)
    for mode in ("importance_pass", "stats_pass"):
        got, _ = forward(small_model, seq, CaptureRequest(small_model.cfg, mode=mode))
        assert np.array_equal(plain, got)


def test_token_range(small_model):
    with pytest.raises(TokenOutOfRangeError):
        run(small_model, [0, SMALL.vocab])
    with pytest.raises(TokenOutOfRangeError):
        run(small_model, [])
    with pytest.raises(EmptyDatasetError):
        collect_calibration(small_model, [])


def test_importance_matches_manual(small_model, small_calib, small_stats):
    # one-layer copy with the FFN zeroed: its final hidden state is the first MHA output
    one = copy.deepcopy(small_model)
    one.layers = one.layers[:1]
    for name in ("wg", "wu", "wd"):
        one.layers[0].slots[name] = np.zeros_like(one.layers[0].slots[name])
    xs = [small_model.embedding[seq] for seq in small_calib]
    ys = [reference_forward(one, seq)[1] for seq in small_calib]
    imp = mean_cosine(np.vstack(xs), np.vstack(ys))
    assert small_stats[(0, "mha")].importance == pytest.approx(imp, abs=1e-12)


def test_stats_match_direct_gram(small_model, small_calib, small_stats):
    ms = small_stats[(1, "ffn")].matrix_stats["wg"]
    n = sum(len(s) for s in small_calib)
    assert ms.token_count == n
    assert ms.gram_y.shape == (SMALL.ffn, SMALL.ffn)
    np.testing.assert_allclose(ms.gram_y, ms.gram_y.T)
    st = small_stats[(0, "mha")]
    assert st.joint_gram_qk.shape == (2 * SMALL.hidden, 2 * SMALL.hidden)
    # the diagonal blocks of the joint Gram are the individual Grams
    d = SMALL.hidden
    np.testing.assert_allclose(st.joint_gram_qk[:d, :d], st.matrix_stats["wq"].gram_y, rtol=1e-12)
    np.testing.assert_allclose(st.joint_gram_qk[d:, d:], st.matrix_stats["wk"].gram_y, rtol=1e-12)


def test_calibration_repeatable(small_model, small_calib):
    a = collect_calibration(small_model, small_calib)
    b = collect_calibration(small_model, small_calib)
    for sid in a:
        assert a[sid].importance == b[sid].importance
        np.testing.assert_array_equal(a[sid].matrix_stats[unit_names(sid[1], "pca")[0]].gram_y,
                                      b[sid].matrix_stats[unit_names(sid[1], "pca")[0]].gram_y)


@pytest.mark.parametrize("method", ["svd", "asvd", "awsvd", "pca", "afm", "joint_pca"])
def test_full_rank_plan_is_near_identity(small_model, small_calib, small_stats, method):
    cfg = AllocationConfig(target_ratio=0.3)
    plan, _, _ = plan_from_stats(small_model, small_stats, cfg, method)
    for sid in plan.ranks:
        plan.ranks[sid] = {n: min(unit_dims(small_model.cfg, n)) for n in plan.ranks[sid]}
    full = apply_plan(small_model, plan, small_stats, method)
    seq = small_calib[0]
    l0, h0 = run(small_model, seq)
    l1, h1 = run(full, seq)
    assert np.linalg.norm(h1 - h0) <= 1e-8 * np.linalg.norm(h0)


def test_apply_plan_leaves_original(small_model, small_stats):
    before = small_model.slot(0, "wq").copy()
    plan, _, _ = plan_from_stats(small_model, small_stats, AllocationConfig(target_ratio=0.5), "pca")
    out = apply_plan(small_model, plan, small_stats, "pca")
    assert isinstance(out.slot(0, "wq"), FactorPair)
    np.testing.assert_array_equal(small_model.slot(0, "wq"), before)


def test_apply_plan_errors(small_model, small_stats):
    plan, _, _ = plan_from_stats(small_model, small_stats, AllocationConfig(target_ratio=0.5), "pca")
    bad = dict(plan.ranks)
    bad[(9, "mha")] = bad[(0, "mha")]
    plan.ranks = bad
    with pytest.raises(PlanModelMismatchError):
        apply_plan(small_model, plan, small_stats, "pca")
    del plan.ranks[(9, "mha")]
    with pytest.raises(MissingStatsError):
        apply_plan(small_model, plan, {}, "pca")
    plan.ranks[(0, "mha")] = {"wq": 1}
    with pytest.raises(PlanModelMismatchError):
        apply_plan(small_model, plan, small_stats, "pca")


def test_joint_r_counted_once(small_model, small_stats):
    plan, _, _ = plan_from_stats(small_model, small_stats, AllocationConfig(target_ratio=0.5), "joint_pca")
    out = apply_plan(small_model, plan, small_stats, "joint_pca")
    q, k = out.slot(0, "wq"), out.slot(0, "wk")
    assert q.r_mat is k.r_mat
    expected = 0
    for sid, ranks in plan.ranks.items():
        for name, r in ranks.items():
            expected += r * sum(unit_dims(small_model.cfg, name))
    assert out.scope_param_count() == expected


def test_measure_losses_match_prediction(small_model, small_calib, small_stats):
    prep = prepare_sublayer(small_model, small_stats[(1, "mha")], "pca")
    pair = prep["wv"].factor(3)
    losses = measure_losses(small_model, small_calib, {(1, "wv"): pair})
    assert losses[(1, "wv")] == pytest.approx(prep["wv"].predicted_loss(3), rel=1e-8)


def test_replace_slots_copies(small_model):
    pair = FactorPair(np.ones((SMALL.hidden, 1)), np.ones((1, SMALL.hidden)), 1)
    out = replace_slots(small_model, {(0, "wo"): pair})
    assert out.slot(0, "wo") is pair
    assert not isinstance(small_model.slot(0, "wo"), FactorPair)
    assert sid_str((0, "mha")) == "L0.mha"
