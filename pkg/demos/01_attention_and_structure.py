"""
Attention maps, symmetric structure, and softened KL
=====================================================

A walk through the three signal transforms the distillation losses
compare: the self-attention transform of a logit map, its symmetrized
sigmoid-squashed structure, and the temperature-softened KL divergence
that measures teacher/student disagreement.
"""

import numpy as np

from kdas import attention_map, kl_softened, row_softmax, symmetric_structure

np.set_printoptions(precision=4, suppress=True)

# A logit map is a square grid of pre-sigmoid scores. Treat each row as a
# token: attention mixes rows by their pairwise dot-product similarity.
z = np.array([
    [3.0, -1.0, 0.5, 0.0],
    [2.5, -0.5, 0.4, 0.1],
    [-2.0, 1.5, -0.3, 0.2],
    [-1.8, 1.2, -0.2, 0.1],
])
print("logit map z:")
print(z)

a = attention_map(z)
print("\nattention transform A = softmax(z z^T / sqrt(4)) z:")
print(a)

# Each output row is a convex combination of input rows, so every column
# of A stays inside the value range of the matching column of z.
print("\ncolumn ranges of z:", list(zip(z.min(0).round(2), z.max(0).round(2))))
print("column ranges of A:", list(zip(a.min(0).round(2), a.max(0).round(2))))

# Rows 0/1 and rows 2/3 are near-duplicates; attention pools them together,
# which is why consecutive rows of A look alike.

# The structure map symmetrizes the attention matrix and squashes it into
# (0, 1). It is exactly symmetric by construction.
s = symmetric_structure(a)
print("\nsymmetric structure S = sigmoid(A + A^T):")
print(s)
print("S equals S.T exactly:", np.array_equal(s, s.T))

# Softened KL compares two logit vectors after a temperature-softened
# softmax. Higher temperature flattens both distributions, so the measured
# disagreement falls; the loss later rescales by t^2 to compensate.
teacher = np.array([2.0, 0.0, -1.0, 0.5])
student = np.array([0.5, 0.2, -0.5, 0.1])
for t in (1.0, 2.0, 4.0):
    print(f"\nt={t:g}")
    print("  softened teacher:", row_softmax(teacher[None], t=t)[0])
    print("  softened student:", row_softmax(student[None], t=t)[0])
    print(f"  kl_softened = {kl_softened(teacher, student, t=t):.6f}")

# Identical inputs always measure zero, the anchor the self-distillation
# check in the test suite relies on.
print("\nkl on identical inputs:", kl_softened(teacher, teacher, t=2.0))
