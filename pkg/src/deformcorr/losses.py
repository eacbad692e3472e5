"""Training objectives, each evaluable on its own.

Per-point terms are averaged over the points of a batch (not summed), which keeps
the default weights independent of batch size.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import torch

from . import autodiff as ad
from .autodiff import SVDGradMode

RHO_DELTA = 100.0
NBR_SIGMA = 0.05
NBR_SAMPLES = 8
PART_MIN_WEIGHT = 1e-6

LR_VARIANTS = ("full", "only_arap", "wo_arap", "elastic")


@dataclass(frozen=True)
class LossWeights:
    w_s: float = 3e2
    w_n: float = 50.0
    w_Eik: float = 5.0
    w_rho: float = 50.0
    w_recon: float = 5e3
    w_reg: float = 1e5
    w_reg_tmpl: float = 1e5
    w_lr: float = 10.0
    w_nbr: float = 5e4
    w_pr: float = 3e3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def to_dict(self):
        return asdict(self)

    def with_overrides(self, **kw) -> "LossWeights":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise KeyError(f"unknown loss weight(s): {sorted(unknown)}")
        return replace(self, **{k: float(v) for k, v in kw.items()})


# -- local rigidity -----------------------------------------------------------------------

def loss_arap(jac, beta: float = ad.SMOOTH_L1_BETA, elastic: bool = False):
    """Per-matrix ARAP term on stacked Jacobians (..., 3, 3).

    The smallest singular value is pulled to det(UV^T), so reflections cost at least
    the distance from sigma_3 to -1. ``elastic`` pulls all three to 1 instead.
    """
    sigma, det_uv = ad.svd3_singular_values(jac)
    one = torch.ones_like(sigma[..., 0])
    target3 = one if elastic else det_uv
    return (
        ad.smooth_l1(sigma[..., 0], one, beta)
        + ad.smooth_l1(sigma[..., 1], one, beta)
        + ad.smooth_l1(sigma[..., 2], target3, beta)
    )


def det_penalty(jac):
    return ad.relu(-ad.det3(jac))


def loss_lr_points(jac, variant: str = "full"):
    """Per-point local rigid loss; ``variant`` selects the ablations of the two terms."""
    if variant == "full":
        return loss_arap(jac) + det_penalty(jac)
    if variant == "only_arap":
        return loss_arap(jac)
    if variant == "wo_arap":
        return det_penalty(jac)
    if variant == "elastic":
        return loss_arap(jac, elastic=True)
    raise ValueError(f"unknown local rigid variant {variant!r}; expected one of {LR_VARIANTS}")


def loss_lr(jac, variant: str = "full"):
    return ad.mean(loss_lr_points(jac, variant))


# -- neighbourhood rigidity ---------------------------------------------------------------

def gaussian_offsets(n_points, n_samples=NBR_SAMPLES, sigma=NBR_SIGMA, generator=None, batch=()):
    return torch.randn(*batch, n_points, n_samples, 3, generator=generator, dtype=ad.DTYPE) * sigma


def loss_nbr(points, corr, jac, src_field, tmpl_field, offsets, mode=SVDGradMode.STOP_GRADIENT_ROTATION):
    """Mean squared SDF disagreement between a Gaussian neighbourhood and its rigid image.

    points, corr: (..., M, 3); jac: (..., M, 3, 3); offsets: (..., M, G, 3).
    ``src_field`` / ``tmpl_field`` map (..., K, 3) points to (..., K) SDF values.
    Returns (loss, n_skipped) where skipped points had a degenerate Jacobian.
    """
    sigma, _ = ad.svd3_singular_values(jac.detach())
    ok = (sigma < 1e-9).sum(dim=-1) < 2
    n_skipped = int((~ok).sum())
    if n_skipped:
        jac = torch.where(ok[..., None, None], jac, torch.eye(3, dtype=jac.dtype).expand_as(jac))
    rot = ad.closest_rotation(jac, mode)
    G = offsets.shape[-2]
    src_pts = points.unsqueeze(-2) + offsets
    rotated = torch.einsum("...ij,...gj->...gi", rot, offsets)
    tmpl_pts = corr.unsqueeze(-2) + rotated
    flat = lambda x: x.reshape(*x.shape[:-3], -1, 3)
    s_src = src_field(flat(src_pts)).reshape(src_pts.shape[:-1])
    s_tmpl = tmpl_field(flat(tmpl_pts)).reshape(tmpl_pts.shape[:-1])
    diff = (s_tmpl - s_src) ** 2
    w = ok.to(diff.dtype).unsqueeze(-1).expand_as(diff)
    denom = torch.clamp_min(w.sum(), 1.0)
    return (diff * w).sum() / denom, n_skipped


# -- piece-wise rigidity ------------------------------------------------------------------

def part_residuals(points, corr, probs, min_weight=PART_MIN_WEIGHT):
    """Closed-form minimal weighted rigid alignment error for every part.

    points, corr: (..., n, 3); probs: (..., n, H). Returns (..., H).
    """
    w = probs
    wsum = w.sum(dim=-2)  # (..., H)
    valid = wsum >= min_weight
    safe = torch.where(valid, wsum, torch.ones_like(wsum))
    cx = torch.einsum("...nh,...ni->...hi", w, points) / safe.unsqueeze(-1)
    cy = torch.einsum("...nh,...ni->...hi", w, corr) / safe.unsqueeze(-1)
    xx = torch.einsum("...nh,...n->...h", w, (points * points).sum(-1))
    yy = torch.einsum("...nh,...n->...h", w, (corr * corr).sum(-1))
    energy = xx - wsum * (cx * cx).sum(-1) + yy - wsum * (cy * cy).sum(-1)
    cov = torch.einsum("...nh,...ni,...nj->...hij", w, points, corr)
    cov = cov - wsum[..., None, None] * cx.unsqueeze(-1) * cy.unsqueeze(-2)
    res = energy - 2.0 * ad.s_sigma(cov)
    res = torch.clamp_min(res, 0.0)
    return torch.where(valid, res, torch.zeros_like(res))


def loss_pr(points, corr, probs):
    """Sum over parts of the minimal rigid alignment error, averaged per point."""
    n = points.shape[-2]
    return ad.mean(part_residuals(points, corr, probs).sum(dim=-1) / n)


def loss_rigid(l_lr, l_nbr, l_pr, weights: LossWeights, ramp: float = 1.0):
    return ramp * (weights.w_lr * l_lr + weights.w_nbr * l_nbr + weights.w_pr * l_pr)


# -- SDF supervision ----------------------------------------------------------------------

def rho(s, delta=RHO_DELTA):
    return ad.exp(-delta * ad.absolute(s))


def normal_term(grad, normals):
    return ad.mean(1.0 - ad.cosine_similarity3(grad, normals))


def eikonal_term(grad):
    return ad.mean(ad.absolute(ad.norm(grad, eps=1e-12) - 1.0))


def loss_sdf(phi, grad, sdf_gt, is_surface, normals=None, delta=RHO_DELTA):
    """Raw terms of the direct SDF supervision: value, normal, eikonal and off-surface.

    phi, sdf_gt, is_surface: (..., N); grad: (..., N, 3); normals: (..., N_s, 3) for the
    surface points (in the order they appear in ``is_surface``).
    """
    if bool(is_surface.any()) and normals is None:
        raise ValueError("surface samples require ground-truth normals")
    value = ad.mean(ad.absolute(phi - sdf_gt))
    eik = eikonal_term(grad)
    off = ~is_surface
    r = ad.mean(rho(phi[off], delta)) if bool(off.any()) else phi.new_zeros(())
    n = normal_term(grad[is_surface], normals.reshape(-1, 3)) if bool(is_surface.any()) else phi.new_zeros(())
    return {"sdf": value, "normal": n, "eik": eik, "rho": r}


def loss_pbs(query_sdf, sdf_gt):
    """|Phi(D(p))| where the queried SDF disagrees in sign with (or touches) the ground truth."""
    gate = (sdf_gt * query_sdf) <= 0
    return ad.mean(torch.where(gate, ad.absolute(query_sdf), torch.zeros_like(query_sdf)))


def loss_pbn(query_grad_p, normals):
    """1 - cos between the gradient of the queried field w.r.t. p and the true normal."""
    return normal_term(query_grad_p, normals)


def pfn_points(tmpl_grad, jac, normals, eps=1e-12):
    """Per-point 1 - cos(grad Phi_tmpl(D(p)), J n); second output flags usable points."""
    jn = ad.matvec(jac, normals)
    ok = ad.norm(jn) > eps
    cos = ad.cosine_similarity3(tmpl_grad, jn)
    return 1.0 - cos, ok


def loss_pfn(tmpl_grad, jac, normals):
    vals, ok = pfn_points(tmpl_grad, jac, normals)
    if not bool(ok.any()):
        return vals.new_zeros(()), int((~ok).sum())
    return ad.mean(vals[ok]), int((~ok).sum())


def loss_recon(points, mapped):
    return ad.mean(torch.sum((points - mapped) ** 2, dim=-1))


def nearest_code(latents, code) -> int:
    """Index of the training code closest to ``code``; ties go to the lowest index."""
    d = torch.sum((latents.detach() - code.detach()) ** 2, dim=-1)
    return int(torch.argmin(d))  # argmin returns the first minimum


def loss_reg(latents, template_code, eps=1e-12):
    """Latent regulariser: mean code norm, and the template's squared distance to its nearest code.

    The nearest code is re-selected on every call and treated as a constant, so the
    second term only pulls the template code. Returns (reg, reg_template, nearest_index).
    """
    reg = ad.mean(ad.norm(latents, eps=eps))
    idx = nearest_code(latents, template_code)
    target = latents[idx].detach()
    reg_t = torch.sum((template_code - target) ** 2)
    return reg, reg_t, idx
