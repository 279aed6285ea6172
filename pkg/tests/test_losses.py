import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from cmdistill import autodiff as ad
from cmdistill.autodiff import Tensor
from cmdistill.errors import ConfigError
from cmdistill.losses import (
    CropKey, NetOutput, batched_losses, build_pairs, crop_layout, loss_image, loss_inter, loss_region,
    loss_total, match_patches,
)
from cmdistill.mil import BagEmbedding, aggregate_bag, bag_distribution


def bag(dist, level="image", aug=0, slot=0, net="student", R=None, inst=None):
    d = Tensor(np.asarray(dist, float), requires_grad=True)
    return BagEmbedding(level, aug, R, None, None, d, net, slot, inst)


# pairs ---------------------------------------------------------------------


def test_pair_counts_image_only():
    keys = crop_layout(2, 0)
    ps = build_pairs(keys, keys)
    assert ps.intra_pairs == [(0, 1), (1, 0)]


def test_pair_counts_desk_default():
    keys = crop_layout(2, 8)
    ps = build_pairs(keys, keys)
    assert len(ps.intra_pairs) == 2 * 1 + 8 * 2 == 18
    assert len(ps.student_pairs) == len(ps.teacher_pairs) == 10 * 9 == 90
    # brute-force listing: every student crop against every teacher image crop, minus identical crops
    brute = sorted(
        (i, j) for i, s in enumerate(keys) for j, t in enumerate(keys)
        if t.level == "image" and (s.level, s.slot, s.augmentation_index) != (t.level, t.slot, t.augmentation_index)
    )
    assert ps.intra_pairs == brute


def test_pair_counts_all_cross():
    keys = crop_layout(2, 8)
    ps = build_pairs(keys, keys, "all-cross")
    assert len(ps.intra_pairs) == 100 - 10
    assert all(keys[i] != keys[j] for i, j in ps.intra_pairs)


def test_pair_invariants():
    for n_img, n_reg in itertools.product((2, 3), (0, 1, 4)):
        keys = crop_layout(n_img, n_reg)
        for mode in ("teacher-global", "all-cross"):
            ps = build_pairs(keys, keys, mode)
            assert all(i != j for i, j in ps.student_pairs + ps.teacher_pairs)
            assert all(keys[i] != keys[j] for i, j in ps.intra_pairs)


def test_fewer_than_two_image_crops():
    with pytest.raises(ConfigError):
        build_pairs([CropKey("image", 0, 0)], [CropKey("image", 0, 0)])
    with pytest.raises(ConfigError):
        build_pairs(crop_layout(2, 0), crop_layout(2, 0), "nonsense")


# image loss ----------------------------------------------------------------


def test_loss_image_examples():
    assert float(loss_image([(bag([1.0, 0.0]), bag([1.0, 0.0], net="teacher"))]).data) == 0.0
    u = np.full(4, 0.25)
    assert abs(float(loss_image([(bag(u), bag(u, net="teacher"))]).data) - math.log(4)) < 1e-12
    val = float(loss_image([(bag([0.5, 0.5]), bag([0.7, 0.3], net="teacher"))]).data)
    assert abs(val - 0.6931471805599453) < 1e-12


def test_loss_image_literal_order_swaps_roles():
    s, t = bag([0.2, 0.8]), bag([0.6, 0.4], net="teacher")
    val = float(loss_image([(s, t)], literal_order=True).data)
    assert abs(val - oracles.cross_entropy([0.2, 0.8], [0.6, 0.4])) < 1e-12


def test_empty_pair_lists_warn_and_return_zero(caplog):
    assert float(loss_image([]).data) == 0.0
    assert float(loss_region([]).data) == 0.0
    assert float(loss_inter([], []).data) == 0.0
    assert caplog.text.count("empty pair list") == 3


def _dists(rng, k):
    a = rng.dirichlet(np.full(k, 0.5))
    b = rng.dirichlet(np.full(k, 0.5))
    return np.clip(a, 1e-12, None) / np.clip(a, 1e-12, None).sum(), np.clip(b, 1e-12, None) / np.clip(b, 1e-12, None).sum()


def test_gibbs_inequality_random_distributions():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        p, q = _dists(rng, int(rng.integers(2, 9)))
        ce = float(loss_image([(bag(q), bag(p, net="teacher"))]).data)
        assert ce >= oracles.entropy(p) - 1e-12
        same = float(loss_image([(bag(p), bag(p, net="teacher"))]).data)
        assert abs(same - oracles.entropy(p)) < 1e-12


# matching ------------------------------------------------------------------


def test_match_identity_and_scale():
    eye = np.eye(4)
    assert match_patches(eye, eye).tolist() == [0, 1, 2, 3]
    assert match_patches(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])).tolist() == [0]


def test_match_random_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        rs, rt = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        assert match_patches(rs, rt).tolist() == oracles.brute_match(rs.tolist(), rt.tolist())


def test_match_ties_go_to_lowest_index():
    rt = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    assert match_patches(np.array([[3.0, 0.0]]), rt).tolist() == [1]


def test_match_zero_norm_rows(caplog):
    rt = np.array([[0.0, 0.0], [-1.0, 0.0]])
    assert match_patches(np.array([[1.0, 0.0]]), rt).tolist() == [1]  # zero row never selected
    assert match_patches(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])).tolist() == [0]
    assert "zero-norm" in caplog.text


@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_match_invariant_to_row_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    rs, rt = rng.standard_normal((5, 4)), rng.standard_normal((6, 4))
    base = match_patches(rs, rt)
    rs2, rt2 = rs.copy(), rt.copy()
    rs2[rng.integers(5)] *= c
    rt2[rng.integers(6)] *= c
    # rescaling can only change the outcome through a floating-point near-tie
    cos = (rs / np.linalg.norm(rs, axis=1, keepdims=True)) @ (rt / np.linalg.norm(rt, axis=1, keepdims=True)).T
    top2 = np.sort(cos, axis=1)[:, -2:]
    stable = (top2[:, 1] - top2[:, 0]) > 1e-9
    assert np.array_equal(match_patches(rs2, rt2)[stable], base[stable])


# region loss ---------------------------------------------------------------


def _region_bag(R, dists, net="student", level="region"):
    return BagEmbedding(level, 0, Tensor(R), None, None, None, net, 0,
                        Tensor(np.asarray(dists, float), requires_grad=(net == "student")))


def test_region_loss_identical_one_hot_is_zero():
    R = np.eye(3)
    d = np.eye(3)
    s, t = _region_bag(R, d), _region_bag(R, d, "teacher", "image")
    assert float(loss_region([(s, t)]).data) == 0.0


def test_region_loss_uniform_teacher_is_log_k():
    rng = np.random.default_rng(2)
    s = _region_bag(rng.standard_normal((3, 2)), rng.dirichlet(np.ones(4), size=3))
    t = _region_bag(rng.standard_normal((5, 2)), np.full((5, 4), 0.25), "teacher", "image")
    # uniform target: H(u, q) = -mean log q, so compare against that, and against log 4 when q is uniform
    q = s.instance_distributions.data
    assert abs(float(loss_region([(s, t)]).data) - float(np.mean(-np.log(q).mean(axis=1)))) < 1e-12
    s_u = _region_bag(s.patch_features.data, np.full((3, 4), 0.25))
    assert abs(float(loss_region([(s_u, t)]).data) - math.log(4)) < 1e-12


def test_region_loss_two_patch_hand_computation():
    Rs = np.array([[1.0, 0.1], [0.0, 1.0]])
    Rt = np.array([[0.1, 1.0], [1.0, 0.0]])
    ps = [[0.6, 0.4], [0.3, 0.7]]
    pt = [[0.2, 0.8], [0.9, 0.1]]
    # student 0 matches teacher 1, student 1 matches teacher 0
    expected = (oracles.cross_entropy(pt[1], ps[0]) + oracles.cross_entropy(pt[0], ps[1])) / 2
    got = float(loss_region([(_region_bag(Rs, ps), _region_bag(Rt, pt, "teacher", "image"))]).data)
    assert abs(got - expected) < 1e-12


# inter loss ----------------------------------------------------------------


def test_inter_examples():
    p = [0.3, 0.7]
    assert float(loss_inter([bag(p), bag(p), bag(p)], [(0, 1), (1, 2), (2, 0)]).data) == 0.0
    got = float(loss_inter([bag([0.5, 0.5]), bag([0.9, 0.1])], [(0, 1)]).data)
    assert abs(got - 0.5108256237659907) < 1e-12
    sym = float(loss_inter([bag([0.5, 0.5]), bag([0.9, 0.1])], [(0, 1), (1, 0)]).data)
    expected = (oracles.kl([0.5, 0.5], [0.9, 0.1]) + oracles.kl([0.9, 0.1], [0.5, 0.5])) / 2
    assert abs(sym - expected) < 1e-12


def test_kl_nonnegative_and_zero_on_self():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        p, q = _dists(rng, int(rng.integers(2, 9)))
        assert float(loss_inter([bag(p), bag(q)], [(0, 1)]).data) >= -1e-15
        assert abs(float(loss_inter([bag(p), bag(p)], [(0, 1)]).data)) <= 1e-12


# total ---------------------------------------------------------------------


def test_loss_total_examples():
    assert loss_total(2.0, 1.0, 0.5, 0.5, 0.1) == 1.6
    assert loss_total(0.0, 0.0, 0.0, 0.0, 0.1) == 0.0
    assert loss_total(2.0, None, None, None, 0.1) == 2.0
    with pytest.raises(ConfigError):
        loss_total(1.0, 1.0, 1.0, 1.0, -0.1)


# batched path agrees with the per-pair reference ---------------------------


def _net(rng, n_img, n_reg, b, d, k, W, bias):
    R = {"image": rng.standard_normal((b, n_img, 9, d)), "region": rng.standard_normal((b, n_reg, 4, d))}
    logits = {lv: r @ W + bias for lv, r in R.items()}
    bags = np.concatenate([logits["image"].mean(-2), logits["region"].mean(-2)], axis=1)
    return R, logits, bags


@pytest.mark.parametrize("mode", ["teacher-global", "all-cross"])
@pytest.mark.parametrize("literal", [False, True])
def test_batched_losses_match_reference(mode, literal):
    rng = np.random.default_rng(4)
    b, n_img, n_reg, d, k = 3, 2, 4, 5, 6
    W, bias = rng.standard_normal((d, k)), rng.standard_normal(k)
    Rs, zs, bs = _net(rng, n_img, n_reg, b, d, k, W, bias)
    Rt, zt, bt = _net(rng, n_img, n_reg, b, d, k, W + 0.3, bias)
    center = rng.standard_normal(k) * 0.1
    ts, tt = 0.1, 0.04
    keys = crop_layout(n_img, n_reg)
    pairs = build_pairs(keys, keys, mode)
    student = NetOutput({lv: Tensor(v) for lv, v in Rs.items()}, {lv: Tensor(v) for lv, v in zs.items()}, Tensor(bs))
    teacher = NetOutput({lv: Tensor(v) for lv, v in Rt.items()}, {lv: Tensor(v) for lv, v in zt.items()}, Tensor(bt))
    got = batched_losses(student, teacher, pairs, center, ts, tt, literal_order=literal)

    def bags_of(R, z, net, temp, c, i):
        out = []
        for key in keys:
            r, l = R[key.level][i, key.slot], z[key.level][i, key.slot]
            out.append(BagEmbedding(key.level, key.augmentation_index, Tensor(r), Tensor(l), None,
                                    bag_distribution(aggregate_bag(l), temp, c), net, key.slot,
                                    bag_distribution(l, temp, c)))
        return out

    ref = {"loss_I": 0.0, "loss_R": 0.0, "loss_S": 0.0, "loss_T": 0.0}
    for i in range(b):
        sb = bags_of(Rs, zs, "student", ts, None, i)
        tb = bags_of(Rt, zt, "teacher", tt, center, i)
        img = [(sb[s], tb[t]) for s, t in pairs.image_pairs()]
        ref["loss_I"] += float(loss_image(img, literal).data) / b
        ref["loss_R"] += float(loss_region([(sb[s], tb[t]) for s, t in pairs.intra_pairs], literal).data) / b
        ref["loss_S"] += float(loss_inter(sb, pairs.student_pairs).data) / b
        ref["loss_T"] += float(loss_inter(tb, pairs.teacher_pairs).data) / b
    for name, value in ref.items():
        g = got[name]
        g = float(g.data) if isinstance(g, Tensor) else float(g)
        assert abs(g - value) < 1e-9 * max(1.0, abs(value)), name


def test_batched_toggles_leave_components_off():
    rng = np.random.default_rng(5)
    W, bias = rng.standard_normal((3, 4)), np.zeros(4)
    R, z, bg = _net(rng, 2, 0, 2, 3, 4, W, bias)
    out = NetOutput({"image": Tensor(R["image"])}, {"image": Tensor(z["image"])}, Tensor(bg))
    keys = crop_layout(2, 0)
    res = batched_losses(out, out, build_pairs(keys, keys), np.zeros(4), 0.1, 0.04,
                         use_region=False, use_inter_student=False, use_inter_teacher=False)
    assert res["loss_R"] is None and res["loss_S"] is None and res["loss_T"] is None
