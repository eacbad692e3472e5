"""Evaluation protocols and applications: latent fitting, correspondence error, editing, texture transfer."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry as G
from . import losses as L
from .autodiff import DTYPE
from .nets import DeformModel

CHUNK = 16384


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))


def _code(model, code):
    if code is None:
        return model.template_code.detach().reshape(1, -1)
    c = code if isinstance(code, torch.Tensor) else _t(code)
    return c.detach().reshape(1, -1)


# -- fields and warps -----------------------------------------------------------------

def warp_to_template(model: DeformModel, points, code) -> np.ndarray:
    """D_{code -> tmpl}(p) for an (N, 3) array, evaluated in chunks."""
    c = _code(model, code)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = []
    with torch.no_grad():
        for i in range(0, len(pts), CHUNK):
            q, *_ = model.deform(_t(pts[i:i + CHUNK])[None], c)
            out.append(q[0].numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def warp_from_template(model: DeformModel, points, code) -> np.ndarray:
    """D_{tmpl -> code}(p): encode with the template code, decode with ``code``."""
    c = _code(model, code)
    t = model.template_code.detach().reshape(1, -1)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = []
    with torch.no_grad():
        for i in range(0, len(pts), CHUNK):
            q, *_ = model.deform(_t(pts[i:i + CHUNK])[None], t, dst_code=c)
            out.append(q[0].numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def reconstruction_field(model: DeformModel, code):
    """Numpy field p -> Phi(D(p | code) | tmpl), the shape as a deformed template."""
    c = _code(model, code)

    def f(p):
        with torch.no_grad():
            q, *_ = model.deform(_t(p)[None], c)
            return model.template_sdf_field(q)[0][0].numpy()

    return f


def shape_field(model: DeformModel, code):
    """Numpy field p -> Phi(p | code), the directly conditioned SDF."""
    c = _code(model, code)

    def f(p):
        with torch.no_grad():
            return model.sdf(_t(p)[None], c)[0][0].numpy()

    return f


def template_field(model: DeformModel):
    def f(p):
        with torch.no_grad():
            return model.template_sdf_field(_t(p))[0].numpy()

    return f


@dataclass
class ReconMetrics:
    iou: float
    cd: float  # chamfer x 1000
    n_vertices: int


def evaluate_reconstruction(field_fn, gt_field, gt_surface, resolution=64, bounds=(-1.0, 1.0), n_samples=10000, seed=0):
    """IoU against the ground-truth field and CD x 1000 against ground-truth surface samples."""
    i = G.iou(field_fn, gt_field, bounds, resolution)
    mesh = G.marching_cubes(field_fn, bounds, resolution)
    if mesh.n_triangles == 0:
        return ReconMetrics(i, math.inf, 0)
    cd = G.chamfer(mesh.sample_surface(n_samples, seed), gt_surface) * 1000.0
    return ReconMetrics(i, cd, mesh.n_vertices)


# -- latent fitting ------------------------------------------------------------------

@dataclass
class Observation:
    surface_points: np.ndarray
    surface_normals: np.ndarray
    free_points: np.ndarray | None = None
    free_sdf: np.ndarray | None = None

    def __post_init__(self):
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, 3)
        self.surface_normals = np.asarray(self.surface_normals, dtype=np.float64).reshape(-1, 3)
        if len(self.surface_points) == 0:
            raise ValueError("observation needs at least one surface point")
        if len(self.surface_normals) != len(self.surface_points):
            raise ValueError("every surface point needs a normal")
        if (self.free_points is None) != (self.free_sdf is None):
            raise ValueError("free points and their SDF must be given together")
        if self.free_points is not None:
            self.free_points = np.asarray(self.free_points, dtype=np.float64).reshape(-1, 3)
            self.free_sdf = np.asarray(self.free_sdf, dtype=np.float64).reshape(-1)

    def transformed(self, rot, trans=np.zeros(3)) -> "Observation":
        """The observation moved by x -> R x + t (normals rotated)."""
        rot = np.asarray(rot, dtype=np.float64)
        f = None if self.free_points is None else self.free_points @ rot.T + trans
        return Observation(self.surface_points @ rot.T + trans, self.surface_normals @ rot.T, f, self.free_sdf)

    def restricted(self, mask) -> "Observation":
        return Observation(self.surface_points[mask], self.surface_normals[mask], self.free_points, self.free_sdf)


@dataclass(frozen=True)
class FitConfig:
    steps: int = 800
    lr: float = 1e-3
    pose_lr: float = 1e-2
    decay_every: int = 200
    decay: float = 0.5
    n_surface: int = 512
    n_free: int = 512
    resolution: int = 64
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class FitResult:
    alpha: np.ndarray
    axis_angle: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    mesh: G.TriMesh | None
    losses: list = field(default_factory=list)
    aborted: bool = False


def axis_angle_to_matrix(v):
    """Rodrigues' formula, differentiable and finite at the zero vector."""
    theta2 = torch.sum(v * v)
    theta = torch.sqrt(theta2 + 1e-30)
    k = torch.zeros(3, 3, dtype=v.dtype)
    k = torch.stack([
        torch.stack([torch.zeros((), dtype=v.dtype), -v[2], v[1]]),
        torch.stack([v[2], torch.zeros((), dtype=v.dtype), -v[0]]),
        torch.stack([-v[1], v[0], torch.zeros((), dtype=v.dtype)]),
    ])
    small = theta2 < 1e-12
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / (theta2 + 1e-30))
    return torch.eye(3, dtype=v.dtype) + a * k + b * (k @ k)


def fitting_losses(model: DeformModel, alpha, rot, trans, surf, normals, free=None, free_sdf=None):
    """Raw terms of the fitting objective for observation points moved by x -> R x + t."""
    n = surf.shape[0]
    p = surf @ rot.T + trans
    nrm = normals @ rot.T
    pts = p if free is None else torch.cat([p, free @ rot.T + trans])
    gt = torch.zeros(n, dtype=DTYPE) if free is None else torch.cat([torch.zeros(n, dtype=DTYPE), free_sdf])
    code = alpha.reshape(1, -1)
    sdf_p = model.sdf_params(code)
    phi, grad = model.sdf_with(sdf_p, pts[None], grad=True)
    is_surface = torch.zeros(1, len(pts), dtype=torch.bool)
    is_surface[:, :n] = True
    out = L.loss_sdf(phi, grad, gt[None], is_surface, nrm[None])
    enc_p = model.enc_hyper(code)
    l, dl = model.encode_with(enc_p, pts[None], phi, grad, n_jac=n)
    dec = model.dec_hyper(model.template_code.reshape(1, -1))
    q, jac = model.decode_with(dec, l, dl)
    q_sdf, q_grad = model.template_sdf_field(q, grad=True)
    out["pbs"] = L.loss_pbs(q_sdf, gt[None])
    grad_p = torch.einsum("bmji,bmj->bmi", jac, q_grad[:, :n])
    out["pbn"] = L.loss_pbn(grad_p, nrm[None])
    out["pfn"], _ = L.loss_pfn(q_grad[:, :n], jac, nrm[None])
    out["reg"] = L.ad.norm(alpha, eps=1e-12)
    return out


def fitting_total(raw, weights: L.LossWeights):
    return (weights.w_s * (raw["sdf"] + raw["pbs"]) + weights.w_n * (raw["normal"] + raw["pbn"] + raw["pfn"])
            + weights.w_Eik * raw["eik"] + weights.w_rho * raw["rho"] + weights.w_reg * raw["reg"])


def model_checksum(model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().astype("<f8").tobytes())
    return h.hexdigest()


def fit_latent(model: DeformModel, obs: Observation, config: FitConfig = FitConfig(),
               weights: L.LossWeights | None = None, init_alpha=None) -> FitResult:
    """Optimise a latent code and a rigid transform of the observation with the network frozen."""
    weights = weights or L.LossWeights()
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        a0 = model.latents.detach().mean(dim=0) if init_alpha is None else _t(init_alpha)
        alpha = a0.clone().requires_grad_(True)
        aa = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        tr = torch.zeros(3, dtype=DTYPE, requires_grad=True)
        opt = torch.optim.Adam([
            {"params": [alpha], "lr": config.lr},
            {"params": [aa, tr], "lr": config.pose_lr},
        ], betas=(0.9, 0.999), eps=1e-8)
        base = [config.lr, config.pose_lr]
        surf_all, nrm_all = _t(obs.surface_points), _t(obs.surface_normals)
        free_all = None if obs.free_points is None else _t(obs.free_points)
        free_sdf_all = None if obs.free_sdf is None else _t(obs.free_sdf)
        rng = np.random.default_rng([config.seed, 0xF17])
        trace = []
        last = (alpha.detach().clone(), aa.detach().clone(), tr.detach().clone())
        aborted = False
        for step in range(config.steps):
            factor = config.decay ** (step // config.decay_every)
            for g, b in zip(opt.param_groups, base):
                g["lr"] = b * factor
            i = rng.integers(0, len(surf_all), min(config.n_surface, len(surf_all)))
            free = fsdf = None
            if free_all is not None:
                j = rng.integers(0, len(free_all), min(config.n_free, len(free_all)))
                free, fsdf = free_all[j], free_sdf_all[j]
            rot = axis_angle_to_matrix(aa)
            raw = fitting_losses(model, alpha, rot, tr, surf_all[i], nrm_all[i], free, fsdf)
            loss = fitting_total(raw, weights)
            if not torch.isfinite(loss):
                aborted = True
                break
            last = (alpha.detach().clone(), aa.detach().clone(), tr.detach().clone())
            trace.append(float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
        else:
            last = (alpha.detach().clone(), aa.detach().clone(), tr.detach().clone())
    finally:
        for p, f in zip(model.parameters(), frozen):
            p.requires_grad_(f)
    alpha_f, aa_f, tr_f = last
    with torch.no_grad():
        rot_f = axis_angle_to_matrix(aa_f).numpy()
    mesh = None
    if config.resolution:
        mesh = G.marching_cubes(reconstruction_field(model, alpha_f), (-1.0, 1.0), config.resolution)
    return FitResult(alpha_f.numpy(), aa_f.numpy(), rot_f, tr_f.numpy(), mesh, trace, aborted)


# -- correspondence ------------------------------------------------------------------

@dataclass
class CorrResult:
    mean: float
    errors: np.ndarray
    n_skipped: int


def predict_correspondence(q_a, q_b):
    """For each template-space point of A, the index of the nearest template-space point of B."""
    idx, _ = G.nearest(q_b, q_a)
    return idx


def geodesic_errors(mesh_b: G.TriMesh, predicted, ground_truth):
    """Edge-graph geodesic distance between predicted and true points, both snapped to vertices.

    Pairs on different connected components are skipped; returns (errors, n_skipped).
    """
    vp, _ = G.nearest(mesh_b.vertices, predicted)
    vg, _ = G.nearest(mesh_b.vertices, ground_truth)
    uniq, inv = np.unique(vg, return_inverse=True)
    d = G.geodesic_from(mesh_b, uniq)
    err = d[inv.reshape(-1), vp]
    ok = np.isfinite(err)
    return err[ok], int((~ok).sum())


def corr_metric(model: DeformModel, code_a, points_a, code_b, points_b, gt_points, mesh_b: G.TriMesh) -> CorrResult:
    """Mean geodesic error of template-space nearest-neighbour correspondence from A to B.

    ``points_a`` are surface samples of A, ``points_b`` the candidate surface samples of B,
    ``gt_points`` the true images of ``points_a`` on B and ``mesh_b`` the surface of B.
    """
    q_a = warp_to_template(model, points_a, code_a)
    q_b = warp_to_template(model, points_b, code_b)
    return corr_from_warped(q_a, q_b, points_b, gt_points, mesh_b)


def corr_from_warped(q_a, q_b, points_b, gt_points, mesh_b: G.TriMesh) -> CorrResult:
    """Correspondence error given template-space images of A's and B's samples."""
    pred = np.asarray(points_b)[predict_correspondence(q_a, q_b)]
    err, skipped = geodesic_errors(mesh_b, pred, gt_points)
    return CorrResult(float(err.mean()) if len(err) else math.nan, err, skipped)


def random_corr_metric(points_b, gt_points, mesh_b: G.TriMesh, seed=0) -> CorrResult:
    """Baseline: each point of A is matched to a uniformly random point of B."""
    rng = np.random.default_rng(seed)
    pred = np.asarray(points_b)[rng.integers(0, len(points_b), len(gt_points))]
    err, skipped = geodesic_errors(mesh_b, pred, gt_points)
    return CorrResult(float(err.mean()) if len(err) else math.nan, err, skipped)


def evaluate_model(model: DeformModel, spec, sets, poses, resolution=64, corr_points=500, seed=0):
    """Reconstruction rows per pose and correspondence rows for every ordered pose pair.

    ``corr_points`` samples of each pose A are matched; zero skips correspondence.
    Ground truth comes from the analytic articulated field ``spec``; B's surface is the
    marching-cubes mesh of its exact field at ``resolution``.
    """
    from . import datagen

    rows, meshes = [], {}
    for k in poses:
        gt = lambda p, k=k: datagen.analytic_sdf(spec, k, p)[0]
        m = evaluate_reconstruction(reconstruction_field(model, model.latents[k]), gt, sets[k].surface_points,
                                    resolution, seed=seed)
        rows.append({"pose": k, "cd_x1000": m.cd, "iou": m.iou})
        meshes[k] = G.marching_cubes(gt, (-1.0, 1.0), resolution)
    corr_rows = []
    if corr_points <= 0:
        return rows, corr_rows
    q_surf = {k: warp_to_template(model, sets[k].surface_points, model.latents[k]) for k in poses}
    rng = np.random.default_rng([seed, 0xC022])
    for i in poses:
        idx = rng.choice(len(sets[i].surface_points), min(corr_points, len(sets[i].surface_points)), replace=False)
        pa, sa = sets[i].surface_points[idx], sets[i].surface_segments[idx]
        q_a = warp_to_template(model, pa, model.latents[i])
        for j in poses:
            if i == j:
                continue
            gt_pts = datagen.correspondence_oracle(spec, i, j, pa, sa)
            r = corr_from_warped(q_a, q_surf[j], sets[j].surface_points, gt_pts, meshes[j])
            corr_rows.append({"pose_a": i, "pose_b": j, "corr": r.mean, "skipped": r.n_skipped})
    return rows, corr_rows


# -- editing -------------------------------------------------------------------------

@dataclass
class EditConstraintSet:
    p1: np.ndarray  # points on the template surface
    p2: np.ndarray  # their target positions

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 3)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 3)
        if len(self.p1) == 0 or len(self.p1) != len(self.p2):
            raise ValueError("constraints need matching, non-empty source and target lists")

    def validate(self, model: DeformModel, tol=1e-2):
        s = template_field(model)(self.p1)
        bad = np.abs(s) >= tol
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} constraint source point(s) are not on the template surface (|sdf| >= {tol})")


@dataclass(frozen=True)
class EditWeights:
    w1: float = 1.0
    w2: float = 10.0
    w3: float = 1e-2 * L.LossWeights().w_pr
    w4: float = 1.0


@dataclass
class EditResult:
    alpha: np.ndarray
    mesh: G.TriMesh | None
    residuals: np.ndarray  # |D_{tmpl->edit}(p1) - p2|
    surface_residuals: np.ndarray  # |Phi(p2 | alpha)|
    losses: list


def edit_shape(model: DeformModel, constraints: EditConstraintSet, weights: EditWeights = EditWeights(),
               steps=500, lr=1e-3, n_box=512, resolution=64, seed=0, validate=True) -> EditResult:
    """Optimise a new latent so the template points p1 move to the targets p2."""
    if validate:
        constraints.validate(model)
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        tmpl = model.template_code.detach().clone()
        alpha = tmpl.clone().requires_grad_(True)
        opt = torch.optim.Adam([alpha], lr=lr, betas=(0.9, 0.999), eps=1e-8)
        p1, p2 = _t(constraints.p1), _t(constraints.p2)
        rng = np.random.default_rng([seed, 0xED17])
        tmesh = G.marching_cubes(template_field(model), (-1.0, 1.0), 32)
        pts = tmesh.vertices if tmesh.n_vertices else np.zeros((0, 3))
        box_pts = np.concatenate([pts, constraints.p2])
        lo, hi = box_pts.min(0), box_pts.max(0)
        dec_t = model.dec_hyper(tmpl.reshape(1, -1))
        trace = []
        for _ in range(steps):
            code = alpha.reshape(1, -1)
            loss = torch.zeros((), dtype=DTYPE)
            if weights.w1 or weights.w2:
                phi2, _ = model.sdf(p2[None], code)
                enc = model.enc_hyper(code)
                l2, _ = model.encode_with(enc, p2[None], phi2)
                q2, _ = model.decode_with(dec_t, l2)
                qs, _ = model.template_sdf_field(q2)
                loss = loss + weights.w1 * (phi2.abs().mean() + qs.abs().mean())
                loss = loss + weights.w2 * torch.sum((q2[0] - p1) ** 2, dim=-1).mean()
            if weights.w3:
                x = _t(rng.uniform(lo, hi, size=(n_box, 3)))[None]
                phix, _ = model.sdf(x, code)
                enc = model.enc_hyper(code)
                lx, _ = model.encode_with(enc, x, phix)
                qx, _ = model.decode_with(dec_t, lx)
                probs = model.part_probs(lx, qx)
                loss = loss + weights.w3 * L.loss_pr(x, qx, probs)
            loss = loss + weights.w4 * torch.sum((alpha - tmpl) ** 2)
            trace.append(float(loss.detach()))
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p, f in zip(model.parameters(), frozen):
            p.requires_grad_(f)
    a = alpha.detach()
    moved = warp_from_template(model, constraints.p1, a)
    res = np.linalg.norm(moved - constraints.p2, axis=1)
    surf = np.abs(shape_field(model, a)(constraints.p2))
    mesh = G.marching_cubes(reconstruction_field(model, a), (-1.0, 1.0), resolution) if resolution else None
    return EditResult(a.numpy(), mesh, res, surf, trace)


# -- texture transfer ----------------------------------------------------------------

def texture_transfer(model: DeformModel, code_src, points_src, colors_src, code_dst, points_dst):
    """Colour each destination point with the colour of its nearest source point in template space.

    Returns (colors, source index per destination point).
    """
    colors_src = np.asarray(colors_src)
    if len(colors_src) != len(points_src):
        raise ValueError("every source point needs a colour")
    q_s = warp_to_template(model, points_src, code_src)
    q_d = warp_to_template(model, points_dst, code_dst)
    return transfer_colors(q_s, colors_src, q_d)


def transfer_colors(q_src, colors_src, q_dst):
    """Nearest-neighbour colour lookup between template-space point sets."""
    colors_src = np.asarray(colors_src)
    idx, _ = G.nearest(q_src, q_dst)
    return colors_src[idx], idx


# -- reporting -----------------------------------------------------------------------

def write_metrics_csv(path, rows, fieldnames=None) -> Path:
    path = Path(path)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            for k in r:
                if k not in fieldnames:
                    fieldnames.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
