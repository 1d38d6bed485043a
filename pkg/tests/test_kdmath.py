"""Value and property tests for the distillation loss math."""

import numpy as np
import pytest

import oracles
from kdas import kdmath as km

RNG = np.random.default_rng(20260817)


# ---------------------------------------------------------------- row_softmax

def test_row_softmax_uniform_on_zero_logits():
    out = km.row_softmax(np.zeros((2, 2)), t=1.0)
    assert np.array_equal(out, np.full((2, 2), 0.5))


def test_row_softmax_frozen_value():
    out = km.row_softmax(np.array([[2.0, 0.0]]), t=2.0)
    # oracle: e^1 / (e^1 + 1)
    np.testing.assert_allclose(out, [[0.7310585786300049, 0.2689414213699951]], rtol=1e-12)
    np.testing.assert_allclose(out, [[0.73106, 0.26894]], atol=1e-5)


def test_row_softmax_rows_are_distributions():
    m = RNG.normal(size=(6, 5)) * 10.0
    for t in (0.5, 1.0, 2.0, 8.0):
        p = km.row_softmax(m, t)
        assert np.all(p > 0.0)
        np.testing.assert_allclose(p.sum(axis=-1), np.ones(6), atol=1e-12)


def test_row_softmax_shift_invariance():
    m = RNG.normal(size=(4, 4))
    shifted = m + RNG.normal(size=(4, 1))
    np.testing.assert_allclose(km.row_softmax(m, 1.7), km.row_softmax(shifted, 1.7), atol=1e-12)


def test_row_softmax_survives_huge_logits():
    p = km.row_softmax(np.array([[1000.0, -1000.0], [-1000.0, 1000.0]]), t=1.0)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=-1), [1.0, 1.0], atol=1e-12)


def test_row_softmax_matches_oracle():
    m = RNG.normal(size=(5, 7)) * 3.0
    got = km.row_softmax(m, 2.5)
    want = np.array([oracles.softmax_row(r, 2.5) for r in m])
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_row_softmax_rejects_bad_inputs():
    with pytest.raises(ValueError):
        km.row_softmax(np.zeros((2, 2)), t=0.0)
    with pytest.raises(ValueError):
        km.row_softmax(np.zeros((2, 2)), t=-1.0)
    with pytest.raises(ValueError):
        km.row_softmax(np.array([[np.nan, 0.0]]), t=1.0)
    with pytest.raises(ValueError):
        km.row_softmax(np.array([[np.inf, 0.0]]), t=1.0)


# -------------------------------------------------------------- attention_map

def test_attention_map_zero_input_gives_zero():
    assert np.array_equal(km.attention_map(np.zeros((3, 3))), np.zeros((3, 3)))


def test_attention_map_constant_input_is_fixed_point():
    z = np.full((4, 4), 2.5)
    np.testing.assert_allclose(km.attention_map(z), z, atol=1e-12)


def test_attention_map_identity_frozen_value():
    a = km.attention_map(np.eye(2))
    want = np.array([[0.66976155, 0.33023845], [0.33023845, 0.66976155]])
    np.testing.assert_allclose(a, want, atol=1e-7)
    np.testing.assert_allclose(a, oracles.attention(np.eye(2)), rtol=1e-12)


def test_attention_map_matches_oracle_on_random_maps():
    for _ in range(20):
        z = RNG.normal(size=(4, 4)) * 2.0
        np.testing.assert_allclose(km.attention_map(z), oracles.attention(z), rtol=1e-10, atol=1e-12)


def test_attention_map_convex_combination_bound():
    for _ in range(10):
        z = RNG.normal(size=(5, 5)) * 3.0
        a = km.attention_map(z)
        lo = z.min(axis=0)
        hi = z.max(axis=0)
        assert np.all(a >= lo - 1e-9)
        assert np.all(a <= hi + 1e-9)


def test_attention_map_batch_matches_per_sample():
    zs = RNG.normal(size=(3, 4, 4))
    batched = km.attention_map(zs)
    for k in range(3):
        np.testing.assert_allclose(batched[k], km.attention_map(zs[k]), atol=1e-12)


def test_attention_map_rejects_non_square():
    with pytest.raises(ValueError):
        km.attention_map(np.zeros((2, 3)))


# ---------------------------------------------------------------- kl_softened

def test_kl_softened_zero_on_identical_inputs():
    for _ in range(5):
        v = RNG.normal(size=6) * 4.0
        for t in (0.5, 1.0, 2.0, 8.0):
            assert km.kl_softened(v, v, t) == 0.0


def test_kl_softened_frozen_values():
    got1 = km.kl_softened([2.0, 0.0], [0.0, 2.0], t=1.0)
    np.testing.assert_allclose(got1, 1.5231883119115295, rtol=1e-12)
    np.testing.assert_allclose(got1, 1.52318, atol=1e-5)
    got2 = km.kl_softened([2.0, 0.0], [0.0, 2.0], t=2.0)
    np.testing.assert_allclose(got2, 0.4621171572600098, rtol=1e-12)
    np.testing.assert_allclose(got2, 0.46212, atol=1e-5)
    np.testing.assert_allclose(got1, oracles.kl_vec([2, 0], [0, 2], 1.0), rtol=1e-12)
    np.testing.assert_allclose(got2, oracles.kl_vec([2, 0], [0, 2], 2.0), rtol=1e-12)


def test_kl_softened_nonnegative_and_zero_iff_equal_distributions():
    for _ in range(50):
        u = RNG.normal(size=8) * 5.0
        v = RNG.normal(size=8) * 5.0
        for t in (0.5, 1.0, 2.0, 4.0, 8.0):
            kl = km.kl_softened(u, v, t)
            assert kl >= 0.0
            if kl < 1e-9:
                np.testing.assert_allclose(
                    km.row_softmax(u[None], t), km.row_softmax(v[None], t), atol=1e-4
                )
    # shift produces identical softened distributions, so exactly zero
    u = RNG.normal(size=6)
    assert km.kl_softened(u, u + 3.0, 2.0) <= 1e-12


def test_kl_softened_t1_matches_plain_kl_oracle():
    for _ in range(10):
        u = RNG.normal(size=7) * 3.0
        v = RNG.normal(size=7) * 3.0
        np.testing.assert_allclose(
            km.kl_softened(u, v, 1.0), oracles.kl_vec(u, v, 1.0), atol=1e-10
        )


def test_kl_softened_rejects_mismatch():
    with pytest.raises(ValueError):
        km.kl_softened([1.0, 2.0], [1.0], t=1.0)
    with pytest.raises(ValueError):
        km.kl_softened([], [], t=1.0)


# ---------------------------------------------------------- attention_kd_loss

def _random_map_pair(n, side):
    return RNG.normal(size=(n, side, side)) * 2.0, RNG.normal(size=(n, side, side)) * 2.0


def test_attention_kd_loss_zero_on_equal_maps():
    t1, _ = _random_map_pair(3, 4)
    t2, _ = _random_map_pair(3, 3)
    maps = {1: t1, 2: t2}
    assert km.attention_kd_loss(maps, {1: t1.copy(), 2: t2.copy()}, t=2.0) == 0.0


def test_attention_kd_loss_single_pair_frozen_value():
    teacher = {1: np.array([[2.0, 0.0]]), 2: np.array([[5.0, 1.0]])}
    student = {1: np.array([[0.0, 2.0]]), 2: np.array([[5.0, 1.0]])}
    got = km.attention_kd_loss(teacher, student, t=1.0)
    np.testing.assert_allclose(got, 1.5231883119115295, rtol=1e-12)
    np.testing.assert_allclose(got, 1.52318, atol=1e-5)


def test_attention_kd_loss_matches_kl_oracle():
    t1, s1 = _random_map_pair(4, 4)
    t2, s2 = _random_map_pair(4, 3)
    t = 2.0
    want = 0.0
    for tm, sm in ((t1, s1), (t2, s2)):
        per = [oracles.kl_vec(tm[k].ravel(), sm[k].ravel(), t) for k in range(4)]
        want += np.mean(per) * t * t
    got = km.attention_kd_loss({1: t1, 2: t2}, {1: s1, 2: s2}, t=t)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_attention_kd_loss_batch_duplication_invariant():
    t1, s1 = _random_map_pair(2, 4)
    t2, s2 = _random_map_pair(2, 3)
    single = km.attention_kd_loss({1: t1, 2: t2}, {1: s1, 2: s2}, t=3.0)
    doubled = km.attention_kd_loss(
        {1: np.concatenate([t1, t1]), 2: np.concatenate([t2, t2])},
        {1: np.concatenate([s1, s1]), 2: np.concatenate([s2, s2])},
        t=3.0,
    )
    np.testing.assert_allclose(single, doubled, rtol=1e-12)


def test_attention_kd_loss_rejects_bad_scale_sets_and_shapes():
    t1, s1 = _random_map_pair(2, 4)
    with pytest.raises(ValueError):
        km.attention_kd_loss({1: t1}, {1: s1}, t=1.0)
    with pytest.raises(ValueError):
        km.attention_kd_loss({1: t1, 3: t1}, {1: s1, 3: s1}, t=1.0)
    with pytest.raises(ValueError):
        km.attention_kd_loss({1: t1, 2: t1}, {1: s1, 2: s1[:, :3, :3]}, t=1.0)
    with pytest.raises(ValueError):
        km.attention_kd_loss({1: t1, 2: t1[:1]}, {1: s1, 2: s1[:1]}, t=1.0)


# -------------------------------------------------------- symmetric_structure

def test_symmetric_structure_of_zero_map():
    s = km.symmetric_structure(np.zeros((3, 3)))
    assert np.array_equal(s, np.full((3, 3), 0.5))


def test_symmetric_structure_frozen_value():
    s = km.symmetric_structure(np.array([[0.0, 2.0], [0.0, 0.0]]))
    want = np.array([[0.5, 0.8807970779778823], [0.8807970779778823, 0.5]])
    np.testing.assert_allclose(s, want, rtol=1e-12)
    np.testing.assert_allclose(s, [[0.5, 0.88080], [0.88080, 0.5]], atol=1e-5)


def test_symmetric_structure_exactly_symmetric():
    for _ in range(100):
        a = RNG.normal(size=(4, 4)) * 5.0
        s = km.symmetric_structure(a)
        assert np.array_equal(s, s.T)


def test_symmetric_structure_strictly_inside_unit_interval():
    a = np.array([[500.0, -500.0], [400.0, -400.0]])
    s = km.symmetric_structure(a)
    assert np.all(s > 0.0)
    assert np.all(s < 1.0)


def test_symmetric_structure_matches_oracle():
    a = RNG.normal(size=(5, 5)) * 2.0
    np.testing.assert_allclose(km.symmetric_structure(a), oracles.structure(a), rtol=1e-10)


def test_symmetric_structure_rejects_non_square():
    with pytest.raises(ValueError):
        km.symmetric_structure(np.zeros((3, 2)))


# ------------------------------------------------------------------- sgm_loss

def test_sgm_loss_zero_on_identical_structures():
    s = km.symmetric_structure(RNG.normal(size=(3, 4, 4)))
    assert km.sgm_loss(s, s.copy(), t=2.0) == 0.0


def test_sgm_loss_derived_example_matches_oracle():
    s_teacher = km.symmetric_structure(np.zeros((2, 2)))
    s_student = km.symmetric_structure(np.array([[0.0, 2.0], [0.0, 0.0]]))
    t = 2.0
    got = km.sgm_loss(s_teacher, s_student, t)
    want = oracles.kl_vec(s_teacher.ravel(), s_student.ravel(), t) * t * t
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert got > 0.0


def test_sgm_loss_transpose_invariant():
    st = km.symmetric_structure(RNG.normal(size=(4, 4)))
    ss = km.symmetric_structure(RNG.normal(size=(4, 4)))
    np.testing.assert_allclose(
        km.sgm_loss(st, ss, 2.0), km.sgm_loss(st.T.copy(), ss.T.copy(), 2.0), rtol=1e-12
    )


def test_sgm_loss_batch_mean_and_duplication():
    st = km.symmetric_structure(RNG.normal(size=(3, 4, 4)))
    ss = km.symmetric_structure(RNG.normal(size=(3, 4, 4)))
    t = 1.5
    got = km.sgm_loss(st, ss, t)
    per = [oracles.kl_vec(st[k].ravel(), ss[k].ravel(), t) for k in range(3)]
    np.testing.assert_allclose(got, np.mean(per) * t * t, rtol=1e-10)
    doubled = km.sgm_loss(np.concatenate([st, st]), np.concatenate([ss, ss]), t)
    np.testing.assert_allclose(got, doubled, rtol=1e-12)


def test_sgm_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        km.sgm_loss(np.full((2, 2), 0.5), np.full((3, 3), 0.5), t=1.0)


# ------------------------------------------------------------------- bce_loss

def test_bce_loss_zero_logits():
    got = km.bce_loss(np.zeros((3, 3)), RNG.integers(0, 2, size=(3, 3)).astype(float))
    np.testing.assert_allclose(got, np.log(2.0), rtol=1e-12)
    np.testing.assert_allclose(got, 0.69315, atol=1e-5)


def test_bce_loss_saturated_correct_is_tiny():
    g = RNG.integers(0, 2, size=(4, 4)).astype(float)
    logits = np.where(g == 1.0, 20.0, -20.0)
    assert km.bce_loss(logits, g) <= 1e-8


def test_bce_loss_frozen_value():
    got = km.bce_loss(np.array([0.0, 2.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(got, oracles.bce([0.0, 2.0], [1.0, 0.0]), rtol=1e-12)
    np.testing.assert_allclose(got, 1.41004, atol=1e-5)


def test_bce_loss_matches_oracle_on_random_maps():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        np.testing.assert_allclose(km.bce_loss(x, g), oracles.bce(x, g), rtol=1e-10)


def test_bce_loss_rejects_bad_targets():
    with pytest.raises(ValueError):
        km.bce_loss(np.zeros(4), np.array([0.0, 1.0, 0.5, 0.0]))
    with pytest.raises(ValueError):
        km.bce_loss(np.zeros(4), np.zeros(5))


# ------------------------------------------------------------------ dice_loss

def test_dice_loss_saturated_match_is_tiny():
    g = RNG.integers(0, 2, size=(5, 5)).astype(float)
    g[0, 0] = 1.0
    logits = np.where(g == 1.0, 40.0, -40.0)
    assert km.dice_loss(logits, g) <= 1e-6


def test_dice_loss_empty_vs_empty_guarded_by_eps():
    g = np.zeros((4, 4))
    logits = np.full((4, 4), -40.0)
    assert km.dice_loss(logits, g) <= 1e-6


def test_dice_loss_saturated_count_example():
    logits = np.array([40.0, 40.0, -40.0, -40.0])
    g = np.array([1.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(km.dice_loss(logits, g), 0.4, atol=1e-6)


def test_dice_loss_matches_oracle_and_stays_in_range():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        got = km.dice_loss(x, g)
        np.testing.assert_allclose(got, oracles.dice(x, g), rtol=1e-10)
        assert 0.0 <= got < 1.0


# --------------------------------------------------------------- jaccard_loss

def test_jaccard_loss_saturated_match_is_tiny():
    g = RNG.integers(0, 2, size=(5, 5)).astype(float)
    g[0, 0] = 1.0
    logits = np.where(g == 1.0, 40.0, -40.0)
    assert km.jaccard_loss(logits, g) <= 1e-6


def test_jaccard_loss_matches_oracle():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        np.testing.assert_allclose(km.jaccard_loss(x, g), oracles.jaccard(x, g), rtol=1e-10)


# ------------------------------------------------------------ bilinear_resize

def test_bilinear_resize_identity_at_same_side():
    m = RNG.normal(size=(4, 4))
    out = km.bilinear_resize(m, 4)
    assert np.array_equal(out, m)


def test_bilinear_resize_preserves_constants():
    m = np.full((3, 3), 1.75)
    np.testing.assert_allclose(km.bilinear_resize(m, 7), np.full((7, 7), 1.75), atol=1e-12)


def test_bilinear_resize_matches_oracle():
    for n_in, n_out in ((2, 4), (4, 8), (8, 4), (3, 5), (4, 6)):
        m = RNG.normal(size=(n_in, n_in)) * 2.0
        np.testing.assert_allclose(
            km.bilinear_resize(m, n_out), oracles.bilinear(m, n_out), rtol=1e-10, atol=1e-12
        )


def test_bilinear_resize_is_linear():
    a = RNG.normal(size=(4, 4))
    b = RNG.normal(size=(4, 4))
    np.testing.assert_allclose(
        km.bilinear_resize(a + 2.0 * b, 8),
        km.bilinear_resize(a, 8) + 2.0 * km.bilinear_resize(b, 8),
        atol=1e-12,
    )


def test_bilinear_resize_batched():
    ms = RNG.normal(size=(3, 4, 4))
    out = km.bilinear_resize(ms, 8)
    for k in range(3):
        np.testing.assert_allclose(out[k], km.bilinear_resize(ms[k], 8), atol=1e-12)


# ------------------------------------------------------------------- seg_loss

def test_seg_loss_saturated_correct_is_tiny():
    g = RNG.integers(0, 2, size=(2, 8, 8)).astype(float)
    logits = np.where(g == 1.0, 40.0, -40.0)
    assert km.seg_loss({1: logits, 2: logits.copy()}, g) <= 1e-6


def test_seg_loss_bypasses_resampling_at_full_resolution():
    g = RNG.integers(0, 2, size=(3, 6, 6)).astype(float)
    m1 = RNG.normal(size=(3, 6, 6)) * 2.0
    m2 = RNG.normal(size=(3, 6, 6)) * 2.0
    got = km.seg_loss({1: m1, 2: m2}, g)
    want = 0.0
    for m in (m1, m2):
        want += np.mean([oracles.bce(m[k], g[k]) + oracles.dice(m[k], g[k]) for k in range(3)])
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_seg_loss_single_small_scale_matches_interpolation_oracle():
    m = RNG.normal(size=(2, 2)) * 2.0
    g = RNG.integers(0, 2, size=(4, 4)).astype(float)
    up = oracles.bilinear(m, 4)
    want = 2.0 * (oracles.bce(up, g) + oracles.dice(up, g))
    got = km.seg_loss({1: m, 2: m.copy()}, g)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_seg_loss_jaccard_kind():
    m1 = RNG.normal(size=(2, 4, 4))
    m2 = RNG.normal(size=(2, 8, 8))
    g = RNG.integers(0, 2, size=(2, 8, 8)).astype(float)
    got = km.seg_loss({1: m1, 2: m2}, g, kind="jaccard")
    up1 = np.stack([oracles.bilinear(m1[k], 8) for k in range(2)])
    want = np.mean([oracles.jaccard(up1[k], g[k]) for k in range(2)])
    want += np.mean([oracles.jaccard(m2[k], g[k]) for k in range(2)])
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_seg_loss_rejects_bad_inputs():
    g = np.zeros((2, 4, 4))
    m = np.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        km.seg_loss({1: m}, g)
    with pytest.raises(ValueError):
        km.seg_loss({1: m, 2: m[:1]}, g)
    with pytest.raises(ValueError):
        km.seg_loss({1: m, 2: m}, np.full((2, 4, 4), 0.3))
    with pytest.raises(ValueError):
        km.seg_loss({1: m, 2: m}, g, kind="hinge")


# ------------------------------------------------------------ total_kdas_loss

def test_total_kdas_loss_trivial_weightings():
    assert km.total_kdas_loss(0.0, 0.0, 1.0).total == pytest.approx(0.8, abs=1e-12)
    assert km.total_kdas_loss(1.0, 1.0, 0.0).total == pytest.approx(0.4, abs=1e-12)


def test_total_kdas_loss_frozen_value():
    lb = km.total_kdas_loss(1.5231883119115295, 0.4621171572600098, 0.5)
    np.testing.assert_allclose(lb.total, 0.7970610938343079, rtol=1e-12)
    np.testing.assert_allclose(lb.total, 0.79706, atol=1e-5)
    assert lb.l_at == 1.5231883119115295
    assert lb.l_sgm == 0.4621171572600098
    assert lb.l_seg == 0.5


def test_total_kdas_loss_weight_identity():
    for _ in range(50):
        a, b, c = RNG.uniform(0.0, 5.0, size=3)
        lb = km.total_kdas_loss(a, b, c)
        recomputed = 0.2 * (lb.l_at + lb.l_sgm) + 0.8 * lb.l_seg
        np.testing.assert_allclose(lb.total, recomputed, rtol=1e-9)


def test_total_kdas_loss_rejects_bad_components():
    with pytest.raises(ValueError):
        km.total_kdas_loss(-0.1, 0.0, 0.0)
    with pytest.raises(ValueError):
        km.total_kdas_loss(0.0, float("nan"), 0.0)
    with pytest.raises(ValueError):
        km.total_kdas_loss(0.0, 0.0, float("inf"))
