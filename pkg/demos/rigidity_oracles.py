"""Small numerical tour of the rigidity machinery: closest rotations, ARAP and Procrustes.

Run: python3 demos/rigidity_oracles.py
"""
import numpy as np
import torch
from scipy.spatial.transform import Rotation

from deformcorr import linalg3 as la, losses as L
from deformcorr.autodiff import DTYPE

rng = np.random.default_rng(0)

# A reflection is as far from a rotation as it gets: sigma_3 is pulled to det(UV^T) = -1,
# and the determinant penalty adds one more unit on top.
j = torch.diag(torch.tensor([1.0, 1.0, -1.0], dtype=DTYPE))[None]
print(f"L_lr(reflection) = {float(L.loss_lr(j))}  only ARAP = {float(L.loss_lr(j, 'only_arap'))}")

# The ARAP energy of a small neighbourhood equals a sum over singular values.
jac = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
dec = la.svd3(jac)
r, _ = la.closest_rotation(jac)
d = rng.normal(size=(100_000, 3))
d /= np.linalg.norm(d, axis=1, keepdims=True)
ds = 0.05
mc = 4 * np.pi * np.mean(np.sum(((jac - r) @ (ds * d).T) ** 2, axis=0))
s = dec.sigma
closed = 4 * np.pi / 3 * ds ** 2 * ((s[0] - 1) ** 2 + (s[1] - 1) ** 2 + (s[2] - dec.det_uv) ** 2)
print(f"sphere integral {mc:.6e}  closed form {closed:.6e}  ratio {mc / closed:.4f}")

# Weighted Procrustes: the closed form recovers a rigid motion exactly and
# reports a positive residual for a mirrored copy.
src = rng.normal(size=(12, 3))
w = rng.uniform(0.5, 1.5, 12)
rot = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
res, r_est, t_est = la.procrustes_residual(src, src @ rot.T + [0.1, 0.2, 0.3], w)
print(f"rigid copy: residual {res:.2e}  rotation error {np.degrees(la.rotation_angle(r_est @ rot.T)):.2e} deg")
res, _, _ = la.procrustes_residual(src, src * [-1, 1, 1], w)
print(f"mirrored copy: residual {res:.4f}")
