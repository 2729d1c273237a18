"""What the structural distillation term sees, and what it ignores.

Hidden states are split into column groups; each group is summarized by its
left singular vectors. Two models whose features differ by a rotation inside
every group share that summary, so the structural loss is zero for them while
plain feature matching still charges a large penalty.

    python demos/structure_distillation.py
"""
import numpy as np

from finer import lgfd
from finer import numerics as nx

rng = np.random.default_rng(0)
n, d, groups = 6, 8, 2
old = rng.normal(size=(n, d))

# rotate each 4-column group by its own random orthogonal matrix
rotated = old.copy()
w = d // groups
for g in range(groups):
    q, _ = np.linalg.qr(rng.normal(size=(w, w)))
    rotated[:, g * w:(g + 1) * w] = old[:, g * w:(g + 1) * w] @ q

noisy = old + 0.5 * rng.normal(size=old.shape)

print("                      feature  structural")
for name, new in (("identical", old), ("rotated per group", rotated), ("noise 0.5", noisy)):
    fd = nx.scalar(lgfd.feature_distillation(old, new))
    skd = nx.scalar(lgfd.structural_distillation(old, new, groups))
    print(f"{name:20s} {fd:9.4f} {skd:11.2e}")

# sign convention: the largest-magnitude entry of every singular vector is positive
f = nx.svd(old[:, :w])
print("\npivot entries of U (all >= 0):", np.round(f.u[np.argmax(np.abs(f.u), axis=0), range(f.u.shape[1])], 3))

# the tape gradient of the structural term agrees with finite differences
err, _, _ = nx.check_gradient(lambda h: lgfd.structural_distillation(old, h, groups), noisy)
print(f"gradient check, relative error {err:.1e}")
