"""Central finite-difference checks for every analytic gradient.

Step 1e-5 in double precision; analytic and numeric gradients must agree
within relative error 1e-4 (atol 1e-8 absorbs near-zero entries).
"""

import numpy as np

from kdas import kdmath as km

RNG = np.random.default_rng(4242)
STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-8


def central_diff(f, x, h=STEP):
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel().copy()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] = flat[k] + h
        hi = f(bumped.reshape(x.shape))
        bumped[k] = flat[k] - h
        lo = f(bumped.reshape(x.shape))
        grad[k] = (hi - lo) / (2.0 * h)
    return grad.reshape(x.shape)


def assert_grad(analytic, numeric):
    np.testing.assert_allclose(analytic, numeric, rtol=RTOL, atol=ATOL)


def test_kl_softened_grad():
    for _ in range(20):
        u = RNG.normal(size=6) * 3.0
        v = RNG.normal(size=6) * 3.0
        for t in (0.5, 1.0, 2.0, 4.0):
            analytic = km.kl_softened_grad(u, v, t)
            numeric = central_diff(lambda x: km.kl_softened(u, x, t), v)
            assert_grad(analytic, numeric)


def test_row_softmax_vjp():
    for _ in range(20):
        m = RNG.normal(size=(4, 4)) * 2.0
        w = RNG.normal(size=(4, 4))
        for t in (1.0, 2.0):
            p = km.row_softmax(m, t)
            analytic = km.row_softmax_vjp(p, w, t)
            numeric = central_diff(lambda x: float((km.row_softmax(x, t) * w).sum()), m)
            assert_grad(analytic, numeric)


def test_attention_map_vjp():
    for _ in range(20):
        z = RNG.normal(size=(4, 4)) * 2.0
        w = RNG.normal(size=(4, 4))
        analytic = km.attention_map_vjp(z, w)
        numeric = central_diff(lambda x: float((km.attention_map(x) * w).sum()), z)
        assert_grad(analytic, numeric)


def test_symmetric_structure_vjp():
    for _ in range(20):
        a = RNG.normal(size=(4, 4)) * 2.0
        w = RNG.normal(size=(4, 4))
        analytic = km.symmetric_structure_vjp(a, w)
        numeric = central_diff(lambda x: float((km.symmetric_structure(x) * w).sum()), a)
        assert_grad(analytic, numeric)


def test_attention_kd_loss_grad():
    for _ in range(20):
        t_maps = {1: RNG.normal(size=(2, 4, 4)) * 2.0, 2: RNG.normal(size=(2, 3, 3)) * 2.0}
        s_maps = {1: RNG.normal(size=(2, 4, 4)) * 2.0, 2: RNG.normal(size=(2, 3, 3)) * 2.0}
        t = float(RNG.choice([1.0, 2.0, 4.0]))
        grads = km.attention_kd_loss_grad(t_maps, s_maps, t)
        for i in (1, 2):
            def f(x, i=i):
                trial = dict(s_maps)
                trial[i] = x
                return km.attention_kd_loss(t_maps, trial, t)

            assert_grad(grads[i], central_diff(f, s_maps[i]))


def test_sgm_loss_grad():
    for _ in range(20):
        st = km.symmetric_structure(RNG.normal(size=(2, 4, 4)))
        ss = RNG.uniform(0.05, 0.95, size=(2, 4, 4))
        t = float(RNG.choice([1.0, 2.0, 4.0]))
        analytic = km.sgm_loss_grad(st, ss, t)
        numeric = central_diff(lambda x: km.sgm_loss(st, x, t), ss)
        assert_grad(analytic, numeric)


def test_bce_loss_grad():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        assert_grad(km.bce_loss_grad(x, g), central_diff(lambda m: km.bce_loss(m, g), x))


def test_dice_loss_grad():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        assert_grad(km.dice_loss_grad(x, g), central_diff(lambda m: km.dice_loss(m, g), x))


def test_jaccard_loss_grad():
    for _ in range(20):
        x = RNG.normal(size=(4, 4)) * 3.0
        g = RNG.integers(0, 2, size=(4, 4)).astype(float)
        assert_grad(
            km.jaccard_loss_grad(x, g), central_diff(lambda m: km.jaccard_loss(m, g), x)
        )


def test_bilinear_resize_vjp():
    for n_in, n_out in ((2, 4), (4, 8), (4, 4), (8, 4)):
        m = RNG.normal(size=(n_in, n_in))
        w = RNG.normal(size=(n_out, n_out))
        analytic = km.bilinear_resize_vjp(w, n_in)
        numeric = central_diff(lambda x: float((km.bilinear_resize(x, n_out) * w).sum()), m)
        assert_grad(analytic, numeric)


def test_seg_loss_grad():
    for kind in ("bce_dice", "jaccard"):
        for _ in range(20):
            maps = {1: RNG.normal(size=(2, 2, 2)) * 2.0, 2: RNG.normal(size=(2, 3, 3)) * 2.0}
            gt = RNG.integers(0, 2, size=(2, 4, 4)).astype(float)
            grads = km.seg_loss_grad(maps, gt, kind=kind)
            for i in (1, 2):
                def f(x, i=i):
                    trial = dict(maps)
                    trial[i] = x
                    return km.seg_loss(trial, gt, kind=kind)

                assert_grad(grads[i], central_diff(f, maps[i]))


def test_full_attention_chain_grad():
    """Gradient flows through attention + structure + both KD losses."""
    for _ in range(10):
        z_t = RNG.normal(size=(4, 4)) * 2.0
        z_s = RNG.normal(size=(4, 4)) * 2.0
        a_t = km.attention_map(z_t)
        s_t = km.symmetric_structure(a_t)
        t = 2.0

        def objective(z):
            a_s = km.attention_map(z)
            s_s = km.symmetric_structure(a_s)
            l_at = km.attention_kd_loss({1: a_t, 2: a_t}, {1: a_s, 2: a_s}, t)
            l_sgm = km.sgm_loss(s_t, s_s, t)
            return l_at + l_sgm

        a_s = km.attention_map(z_s)
        s_s = km.symmetric_structure(a_s)
        d_at = km.attention_kd_loss_grad({1: a_t, 2: a_t}, {1: a_s, 2: a_s}, t)
        d_a = d_at[1] + d_at[2]
        d_sgm = km.sgm_loss_grad(s_t, s_s, t)
        d_a = d_a + km.symmetric_structure_vjp(a_s, d_sgm)
        analytic = km.attention_map_vjp(z_s, d_a)
        assert_grad(analytic, central_diff(objective, z_s))
