"""
Checking analytic gradients with finite differences
====================================================

Every loss in the package ships a hand-written gradient. This script
verifies a few of them against central finite differences, the same
technique the test suite applies to all of them.
"""

import numpy as np

from kdas import kdmath as km

rng = np.random.default_rng(7)
STEP = 1e-5


def central_diff(f, x):
    """Numerically estimate df/dx, one coordinate at a time."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + STEP
        hi = f(x)
        flat[i] = keep - STEP
        lo = f(x)
        flat[i] = keep
        grad.ravel()[i] = (hi - lo) / (2 * STEP)
    return grad


def check(name, f, g, x):
    analytic = g(x)
    numeric = central_diff(f, x)
    dev = np.max(np.abs(analytic - numeric))
    print(f"{name:24s} max |analytic - numeric| = {dev:.3e}")


# Softened KL with respect to the student logits.
teacher = rng.standard_normal(12)
student = rng.standard_normal(12)
check("kl_softened (t=2)",
      lambda x: km.kl_softened(teacher, x, t=2.0),
      lambda x: km.kl_softened_grad(teacher, x, t=2.0),
      student.copy())

# Binary cross-entropy and dice over a 4x4 logit map.
target = (rng.random((4, 4)) > 0.5).astype(float)
logits = rng.standard_normal((4, 4))
check("bce_loss",
      lambda x: km.bce_loss(x, target),
      lambda x: km.bce_loss_grad(x, target),
      logits.copy())
check("dice_loss",
      lambda x: km.dice_loss(x, target),
      lambda x: km.dice_loss_grad(x, target),
      logits.copy())

# The attention transform is matrix-valued; probe it through a random
# linear functional so the check reduces to a scalar function.
probe = rng.standard_normal((4, 4))
check("attention_map",
      lambda x: float(np.sum(km.attention_map(x) * probe)),
      lambda x: km.attention_map_vjp(x, probe),
      rng.standard_normal((4, 4)))

# The full attention transfer loss across both supervision scales.
maps_t = {1: rng.standard_normal((1, 4, 4)), 2: rng.standard_normal((1, 4, 4))}


def unpack(x):
    return {1: x[:16].reshape(1, 4, 4), 2: x[16:].reshape(1, 4, 4)}


check("attention_kd_loss",
      lambda x: km.attention_kd_loss(maps_t, unpack(x), t=2.0),
      lambda x: np.concatenate([
          km.attention_kd_loss_grad(maps_t, unpack(x), t=2.0)[s].ravel()
          for s in (1, 2)]),
      rng.standard_normal(32))

print("\nall deviations should sit near 1e-9, far below the 1e-4 gate")
