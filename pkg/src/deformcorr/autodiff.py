"""Reverse-mode differentiation primitives used by the losses.

Tensors are ``torch.Tensor`` objects in float64; torch's autograd graph plays the role
of the tape. The 3x3 SVD quantities get hand-written backward rules built on
:mod:`deformcorr.linalg3` so the forward kernel and its derivative stay under our control.
"""
from __future__ import annotations

import enum
from typing import Callable

import numpy as np
import torch

from . import linalg3

DTYPE = torch.float64
SVD_GAP_TOL = 1e-6
SMOOTH_L1_BETA = 1.0

torch.set_default_dtype(DTYPE)


class ShapeError(ValueError):
    pass


class SVDGradMode(str, enum.Enum):
    """How gradients pass through the closest rotation used by the neighbourhood loss."""

    ANALYTIC_S_SIGMA = "analytic_s_sigma"
    STOP_GRADIENT_ROTATION = "stop_gradient_rotation"

    @classmethod
    def parse(cls, value) -> "SVDGradMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ValueError(
                f"unknown svd3_grad_mode {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


def tensor(data, requires_grad=False) -> torch.Tensor:
    return torch.tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE, requires_grad=requires_grad)


def _check_same(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# -- elementwise and linear primitives -------------------------------------------------

def add(a, b):
    _check_same(a, b, "add")
    return a + b


def sub(a, b):
    _check_same(a, b, "sub")
    return a - b


def mul(a, b):
    _check_same(a, b, "mul")
    return a * b


def scale(a, c: float):
    return a * c


def matvec(m, v):
    if m.shape[-1] != v.shape[-1]:
        raise ShapeError(f"matvec: shape mismatch {tuple(m.shape)} vs {tuple(v.shape)}")
    return (m @ v.unsqueeze(-1)).squeeze(-1)


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def sine(x, omega: float = 1.0):
    return torch.sin(omega * x)


def relu(x):
    return torch.relu(x)


def absolute(x):
    return torch.abs(x)


def exp(x):
    return torch.exp(x)


def norm(v, eps: float = 0.0):
    """L2 norm over the last axis; ``eps`` keeps the backward finite at the origin."""
    if eps:
        return torch.sqrt(torch.sum(v * v, dim=-1) + eps * eps)
    return torch.linalg.vector_norm(v, dim=-1)


def total(x):
    return torch.sum(x)


def mean(x):
    return torch.mean(x)


def smooth_l1(x, target, beta: float = SMOOTH_L1_BETA):
    """``0.5 d^2 / beta`` if ``|d| < beta`` else ``|d| - 0.5 beta``, with ``d = x - target``."""
    d = torch.abs(x - target)
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def softmax(x):
    return torch.softmax(x, dim=-1)


def cosine_similarity3(a, b, eps: float = 1e-12):
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cosine_similarity3: expected 3-vectors, got {tuple(a.shape)} and {tuple(b.shape)}")
    num = torch.sum(a * b, dim=-1)
    den = torch.sqrt(torch.sum(a * a, dim=-1) * torch.sum(b * b, dim=-1) + eps * eps)
    return num / den


def clamp_min(x, lo: float):
    return torch.clamp_min(x, lo)


def det3(m):
    """Determinant of stacked 3x3 matrices by cofactor expansion."""
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


# -- 3x3 SVD primitives ------------------------------------------------------------------

def _svd_np(m: torch.Tensor):
    u, s, v, d = linalg3.svd3_batch(m.detach().cpu().numpy())
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(DTYPE)
    return as_t(u), as_t(s), as_t(v), as_t(d)


def _tie_average(grad_sigma, sigma):
    # Within a group of (near) equal singular values only the summed gradient is
    # basis-independent, so each member gets the group mean.
    g = grad_sigma.clone()
    tie01 = (sigma[..., 0] - sigma[..., 1]) < SVD_GAP_TOL
    tie12 = (sigma[..., 1] - sigma[..., 2]) < SVD_GAP_TOL
    all3 = tie01 & tie12
    m3 = g.mean(dim=-1)
    m01 = 0.5 * (g[..., 0] + g[..., 1])
    m12 = 0.5 * (g[..., 1] + g[..., 2])
    g0 = torch.where(all3, m3, torch.where(tie01, m01, g[..., 0]))
    g1 = torch.where(all3, m3, torch.where(tie01, m01, torch.where(tie12, m12, g[..., 1])))
    g2 = torch.where(all3, m3, torch.where(tie12 & ~tie01, m12, g[..., 2]))
    return torch.stack([g0, g1, g2], dim=-1)


class _SingularValues(torch.autograd.Function):
    @staticmethod
    def forward(ctx, m):
        u, s, v, d = _svd_np(m)
        ctx.save_for_backward(u, s, v)
        ctx.mark_non_differentiable(d)
        return s, d

    @staticmethod
    def backward(ctx, grad_s, _grad_d):
        u, s, v = ctx.saved_tensors
        g = _tie_average(grad_s, s)
        # d sigma_i = u_i^T dM v_i
        return (u * g.unsqueeze(-2)) @ v.transpose(-1, -2)


def svd3_singular_values(m):
    """Singular values (descending) and ``det(U V^T)`` of stacked 3x3 matrices."""
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"svd3_singular_values: expected (..., 3, 3), got {tuple(m.shape)}")
    return _SingularValues.apply(m)


class _SSigma(torch.autograd.Function):
    @staticmethod
    def forward(ctx, m):
        u, s, v, d = _svd_np(m)
        sign = torch.ones_like(s)
        sign[..., 2] = d
        r = (u * sign.unsqueeze(-2)) @ v.transpose(-1, -2)
        ctx.save_for_backward(r)
        return s[..., 0] + s[..., 1] + d * s[..., 2]

    @staticmethod
    def backward(ctx, grad):
        (r,) = ctx.saved_tensors
        return grad[..., None, None] * r


def s_sigma(m):
    """Signed singular-value sum; its gradient is the closest proper rotation of ``m``."""
    if m.shape[-2:] != (3, 3):
        raise ShapeError(f"s_sigma: expected (..., 3, 3), got {tuple(m.shape)}")
    return _SSigma.apply(m)


class _ClosestRotation(torch.autograd.Function):
    @staticmethod
    def forward(ctx, m):
        u, s, v, d = _svd_np(m)
        sign = torch.ones_like(s)
        sign[..., 2] = d
        r = (u * sign.unsqueeze(-2)) @ v.transpose(-1, -2)
        ctx.save_for_backward(r, v, s * sign)
        return r

    @staticmethod
    def backward(ctx, grad_r):
        # M = R P with P = V S' V^T (S' signed singular values). For dR = R Omega,
        # V^T Omega V has entries K_ij / (s'_i + s'_j); pairs with a vanishing
        # denominator are not differentiable and get no gradient.
        r, v, ss = ctx.saved_tensors
        a = v.transpose(-1, -2) @ r.transpose(-1, -2) @ grad_r @ v
        den = ss.unsqueeze(-1) + ss.unsqueeze(-2)
        ok = den.abs() > SVD_GAP_TOL
        c = torch.where(ok, a / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(a))
        return r @ v @ (c - c.transpose(-1, -2)) @ v.transpose(-1, -2)


def closest_rotation(m, mode: SVDGradMode | str = SVDGradMode.STOP_GRADIENT_ROTATION):
    """Closest proper rotation of stacked 3x3 matrices, differentiated per ``mode``."""
    mode = SVDGradMode.parse(mode)
    if mode is SVDGradMode.STOP_GRADIENT_ROTATION:
        r = _ClosestRotation.apply(m.detach())
        return r
    return _ClosestRotation.apply(m)


def primitive_set() -> dict[str, Callable]:
    return {
        "add": add,
        "sub": sub,
        "mul": mul,
        "matvec": matvec,
        "matmul": matmul,
        "sine": sine,
        "scale": scale,
        "relu": relu,
        "abs": absolute,
        "exp": exp,
        "norm": norm,
        "sum": total,
        "mean": mean,
        "smooth_l1": smooth_l1,
        "softmax": softmax,
        "cosine_similarity3": cosine_similarity3,
        "clamp_min": clamp_min,
        "svd3_singular_values": svd3_singular_values,
        "s_sigma": s_sigma,
        "closest_rotation": closest_rotation,
        "det3": det3,
    }


# -- driver ---------------------------------------------------------------------------

def backward(loss: torch.Tensor, params) -> dict:
    """Gradients of a scalar loss with respect to each parameter.

    ``params`` is a mapping name -> tensor or a sequence of tensors; parameters the
    loss does not reach get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if isinstance(params, dict):
        keys, tensors = list(params.keys()), list(params.values())
    else:
        tensors = list(params)
        keys = list(range(len(tensors)))
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {k: (torch.zeros_like(t) if g is None else g) for k, t, g in zip(keys, tensors, grads)}


def finite_diff_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-5) -> float:
    """Max relative error between the autograd gradient of ``f`` at ``x`` and central differences."""
    x0 = x.detach().clone().to(DTYPE)
    xg = x0.clone().requires_grad_(True)
    y = f(xg)
    if not torch.isfinite(y).all():
        raise FloatingPointError(f"function value is not finite: {y}")
    (g,) = torch.autograd.grad(y.reshape(()), xg, allow_unused=True)
    g = torch.zeros_like(x0) if g is None else g
    flat = x0.reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xp[i] += step
            xm = flat.clone()
            xm[i] -= step
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise FloatingPointError(f"function value is not finite at coordinate {i}")
            fd[i] = (fp - fm).reshape(()) / (2.0 * step)
    err = (g.reshape(-1) - fd).abs() / (fd.abs() + 1e-8)
    return float(err.max())
