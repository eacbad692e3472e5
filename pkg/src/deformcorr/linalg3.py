"""Exact 3x3 linear algebra: SVD, closest rotation and the weighted rigid alignment residual.

Every routine accepts a single matrix of shape ``(3, 3)`` or a stack ``(..., 3, 3)``;
the batched entry points (``svd3_batch`` and friends) are what the training loop calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIE_TOL = 1e-7
DEGENERATE_TOL = 1e-9
RESIDUAL_CLAMP = 1e-9
_JACOBI_SWEEPS = 30


class InvalidInputError(ValueError):
    pass


class DegenerateDecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class Mat3Decomposition:
    m: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    det_uv: float

    def reconstruct(self) -> np.ndarray:
        return self.u @ np.diag(self.sigma) @ self.v.T


def _symmetric_eig3(a):
    """Cyclic Jacobi eigen-decomposition for stacks of symmetric 3x3 matrices.

    Returns eigenvalues sorted descending and the matching eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    vec = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    rows = np.arange(n)
    scale = np.maximum(np.abs(a).reshape(n, -1).max(axis=1), 1e-300)
    for _ in range(_JACOBI_SWEEPS):
        off = np.abs(a[:, 0, 1]) + np.abs(a[:, 0, 2]) + np.abs(a[:, 1, 2])
        if np.all(off <= 1e-18 * scale):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            app = a[:, p, p]
            aqq = a[:, q, q]
            theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            rot[rows, p, p] = c
            rot[rows, q, q] = c
            rot[rows, p, q] = s
            rot[rows, q, p] = -s
            a = np.swapaxes(rot, 1, 2) @ a @ rot
            a[rows, p, q] = np.where(active, 0.0, a[:, p, q])
            a[rows, q, p] = a[rows, p, q]
            vec = vec @ rot
    evals = np.stack([a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]], axis=1)
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    vec = np.take_along_axis(vec, order[:, None, :], axis=2)
    return evals, vec


def _sign_canonical(cols):
    # Flip each column so its first entry of magnitude > 1e-12 is positive.
    n = cols.shape[0]
    absval = np.abs(cols)
    first = np.argmax(absval > 1e-12, axis=1)  # (n, 3) index along rows, per column
    lead = np.take_along_axis(cols, first[:, None, :], axis=1)[:, 0, :]
    flip = np.where(lead < 0.0, -1.0, 1.0)
    return cols * flip[:, None, :].reshape(n, 1, 3)


def svd3_batch(m):
    """SVD of a stack of 3x3 matrices.

    Returns ``(u, sigma, v, det_uv)`` with sigma descending and non-negative.
    """
    m = np.asarray(m, dtype=np.float64)
    batch_shape = m.shape[:-2]
    if m.shape[-2:] != (3, 3):
        raise InvalidInputError(f"expected (..., 3, 3) input, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("svd3 input contains non-finite entries")
    mm = m.reshape(-1, 3, 3)
    n = mm.shape[0]

    _, v = _symmetric_eig3(np.swapaxes(mm, 1, 2) @ mm)
    v = _sign_canonical(v)
    b = mm @ v
    sig = np.linalg.norm(b, axis=1)  # column norms, (n, 3)
    scale = np.maximum(sig[:, 0], 1e-300)

    u = np.zeros_like(mm)
    u1_ok = sig[:, 0] > 1e-300
    u[:, :, 0] = np.where(u1_ok[:, None], b[:, :, 0] / np.where(u1_ok, sig[:, 0], 1.0)[:, None], v[:, :, 0])

    b2 = b[:, :, 1] - np.sum(u[:, :, 0] * b[:, :, 1], axis=1, keepdims=True) * u[:, :, 0]
    nb2 = np.linalg.norm(b2, axis=1)
    u2_ok = nb2 > 1e-12 * scale
    fallback = _any_perpendicular(u[:, :, 0])
    u[:, :, 1] = np.where(u2_ok[:, None], b2 / np.where(u2_ok, nb2, 1.0)[:, None], fallback)
    u[:, :, 2] = np.cross(u[:, :, 0], u[:, :, 1])

    s3 = np.sum(u[:, :, 2] * b[:, :, 2], axis=1)
    flip = s3 < 0.0
    u[flip, :, 2] *= -1.0
    sig = np.stack([sig[:, 0], np.sum(u[:, :, 1] * b[:, :, 1], axis=1), np.abs(s3)], axis=1)
    sig = np.maximum(sig, 0.0)

    # Re-sort in case round-off swapped the trailing pair.
    order = np.argsort(-sig, axis=1, kind="stable")
    if np.any(order != np.arange(3)):
        sig = np.take_along_axis(sig, order, axis=1)
        u = np.take_along_axis(u, order[:, None, :], axis=2)
        v = np.take_along_axis(v, order[:, None, :], axis=2)

    det_uv = np.sign(np.linalg.det(u) * np.linalg.det(v))
    det_uv = np.where(det_uv == 0.0, 1.0, det_uv)
    return (
        u.reshape(batch_shape + (3, 3)),
        sig.reshape(batch_shape + (3,)),
        v.reshape(batch_shape + (3, 3)),
        det_uv.reshape(batch_shape),
    )


def _any_perpendicular(a):
    # Unit vector orthogonal to each row of ``a``, chosen from the least-aligned axis.
    axis = np.argmin(np.abs(a), axis=1)
    e = np.eye(3)[axis]
    p = e - np.sum(e * a, axis=1, keepdims=True) * a
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def svd3(m) -> Mat3Decomposition:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidInputError(f"svd3 expects a 3x3 matrix, got shape {m.shape}")
    u, sig, v, d = svd3_batch(m[None])
    return Mat3Decomposition(m=m.copy(), u=u[0], sigma=sig[0], v=v[0], det_uv=float(d[0]))


def closest_rotation_batch(m, u=None, sigma=None, v=None, det_uv=None):
    if u is None:
        u, sigma, v, det_uv = svd3_batch(m)
    small = np.sum(sigma < DEGENERATE_TOL, axis=-1)
    if np.any(small >= 2):
        raise DegenerateDecompositionError(
            f"{int(np.sum(small >= 2))} matrices have two or more singular values below {DEGENERATE_TOL}"
        )
    s = np.ones(sigma.shape)
    s[..., 2] = det_uv
    r = (u * s[..., None, :]) @ np.swapaxes(v, -1, -2)
    return r, det_uv


def closest_rotation(m):
    """Closest proper rotation in the Frobenius norm, ``U diag(1, 1, det(UV^T)) V^T``."""
    r, d = closest_rotation_batch(np.asarray(m, dtype=np.float64)[None])
    return r[0], float(d[0])


def s_sigma(m):
    """Signed singular-value sum and its gradient (the closest proper rotation)."""
    dec = svd3(m)
    r, _ = closest_rotation_batch(dec.m[None], dec.u[None], dec.sigma[None], dec.v[None], np.array([dec.det_uv]))
    s = dec.sigma
    value = s[0] + s[1] + dec.det_uv * s[2]
    return float(value), r[0]


def weighted_centroid(points, weights):
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    return weights @ points / weights.sum()


def procrustes_residual(src, dst, weights=None):
    """Minimal weighted rigid alignment error between two corresponding point lists.

    Evaluated in closed form from the centred cross-covariance; returns
    ``(residual, r, t)`` such that ``r @ src_i + t`` best matches ``dst_i``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(src) != len(dst):
        raise InvalidInputError(f"point lists must be equal-length and non-empty, got {len(src)} and {len(dst)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(src):
        raise InvalidInputError(f"expected {len(src)} weights, got {len(w)}")
    if np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("weights must be non-negative with positive total")

    src_c = weighted_centroid(src, w)
    dst_c = weighted_centroid(dst, w)
    x = src - src_c
    y = dst - dst_c
    energy = np.sum(w * (np.sum(x * x, axis=1) + np.sum(y * y, axis=1)))
    # X W Y^T maps x to y in the transposed sense; the rotation aligning x onto y
    # is the closest rotation of its transpose.
    cov = (x * w[:, None]).T @ y
    u, sig, v, d = svd3_batch(cov[None])
    s_val = sig[0, 0] + sig[0, 1] + d[0] * sig[0, 2]
    residual = energy - 2.0 * s_val
    if residual < 0.0:
        if residual < -RESIDUAL_CLAMP * max(energy, 1.0):
            raise ArithmeticError(f"closed-form residual {residual:g} is negative beyond round-off")
        residual = 0.0

    if np.sum(sig[0] < DEGENERATE_TOL) >= 2:
        # Centred sets span at most a line; any rotation about it is optimal.
        if sig[0, 0] < DEGENERATE_TOL:
            r = np.eye(3)
        else:
            r = _align_vectors(u[0, :, 0], v[0, :, 0])
    else:
        r, _ = closest_rotation_batch(cov.T[None], v, sig, u, d)
        r = r[0]
    t = dst_c - r @ src_c
    return float(residual), r, t


def _align_vectors(a, b):
    # Rotation taking unit vector a onto unit vector b (minimal angle).
    c = np.cross(a, b)
    s = np.linalg.norm(c)
    d = float(np.dot(a, b))
    if s < 1e-15:
        if d > 0:
            return np.eye(3)
        p = _any_perpendicular(a[None])[0]
        return 2.0 * np.outer(p, p) - np.eye(3)
    k = c / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - d) * kx @ kx


def rotation_angle(r) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
