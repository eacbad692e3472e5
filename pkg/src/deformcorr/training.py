"""Joint optimisation of the template field, deformation, part nets and latent codes."""
from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .autodiff import DTYPE, SVDGradMode
from .datagen import ShapeSampleSet
from .nets import ArchConfig, DeformModel

CHECKPOINT_MAGIC = b"DCTPLCKP"
CHECKPOINT_VERSION = 1

WEIGHTED_TERMS = {
    # term -> (weight name, scaled by the rigid ramp)
    "sdf": ("w_s", False),
    "normal": ("w_n", False),
    "eik": ("w_Eik", False),
    "rho": ("w_rho", False),
    "pbs": ("w_s", False),
    "pbn": ("w_n", False),
    "eik_tmpl": ("w_Eik", False),
    "rho_tmpl": ("w_rho", False),
    "pfn": ("w_n", False),
    "recon": ("w_recon", False),
    "reg": ("w_reg", False),
    "reg_tmpl": ("w_reg_tmpl", False),
    "lr": ("w_lr", True),
    "nbr": ("w_nbr", True),
    "pr": ("w_pr", True),
}
TERMS = tuple(WEIGHTED_TERMS)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, step):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.term = term
        self.step = step


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    lr_min: float = 1e-5
    steps: int = 20000
    batch_poses: int = 4
    points_per_category: int = 512
    template_points: int = 512
    warmup_steps: int = 1000
    svd3_grad_mode: str = SVDGradMode.STOP_GRADIENT_ROTATION.value
    lr_variant: str = "full"
    nbr_samples: int = L.NBR_SAMPLES
    nbr_sigma: float = L.NBR_SIGMA
    grad_clip: float = 10.0
    detach_sdf_input: bool = False
    nbr_detach_source: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_poses", "points_per_category", "template_points", "nbr_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must lie in [0, steps]")
        if self.lr < 0 or self.lr_min < 0:
            raise ValueError("learning rates must be non-negative")
        SVDGradMode.parse(self.svd3_grad_mode)
        if self.lr_variant not in L.LR_VARIANTS:
            raise ValueError(f"unknown lr_variant {self.lr_variant!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        known = {f.name: f.type for f in fields(self)}
        unknown = set(kw) - set(known)
        if unknown:
            raise KeyError(f"unknown train config key(s): {sorted(unknown)}")
        cast = {}
        for k, v in kw.items():
            cur = getattr(self, k)
            if isinstance(cur, bool):
                cast[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                cast[k] = type(cur)(v)
        return replace(self, **cast)


def rigid_ramp(step: int, warmup_steps: int) -> float:
    """Linear 0 -> 1 over the warm-up, then 1."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return 1.0
    return step / warmup_steps


def learning_rate(step: int, config: TrainConfig) -> float:
    """Cosine decay from ``lr`` to ``lr_min`` over the run."""
    t = min(max(step, 0), config.steps) / config.steps
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + math.cos(math.pi * t))


# Desk-scale defaults: the full architecture runs at several seconds per step on one
# CPU core, so the toy runs use narrower networks, fewer points and fewer steps.
DESK_ARCH = ArchConfig(latent_dim=32, hyper_hidden=64, hidden=32, part_hidden=32)
DESK_CONFIG = TrainConfig(lr=5e-4, lr_min=5e-5, steps=10000, points_per_category=128, template_points=128,
                          warmup_steps=1000, nbr_detach_source=True)
DESK_WEIGHTS = L.LossWeights(w_reg=1.0)  # template pull keeps its full weight


# -- state ------------------------------------------------------------------------------

@dataclass
class ModelState:
    model: DeformModel
    optimizer: torch.optim.Adam
    weights: L.LossWeights
    config: TrainConfig
    pose_ids: list
    step: int = 0

    @classmethod
    def create(cls, arch: ArchConfig, pose_ids, config: TrainConfig, weights: L.LossWeights | None = None):
        model = DeformModel(arch, len(pose_ids), seed=config.seed)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
        return cls(model, opt, weights or L.LossWeights(), config, [int(p) for p in pose_ids])

    def named_parameters(self):
        return dict(self.model.named_parameters())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
        return h.hexdigest()


# -- batches ---------------------------------------------------------------------------

@dataclass
class Batch:
    shape_idx: torch.Tensor  # (B,) index into the latent table
    surface: torch.Tensor  # (B, n, 3)
    normals: torch.Tensor  # (B, n, 3)
    interior: torch.Tensor
    interior_sdf: torch.Tensor
    free: torch.Tensor
    free_sdf: torch.Tensor
    template_uniform: torch.Tensor  # (T, 3)
    nbr_offsets: torch.Tensor  # (B, n, G, 3)

    @property
    def points(self):
        return torch.cat([self.surface, self.interior, self.free], dim=1)

    @property
    def sdf_gt(self):
        zeros = torch.zeros(self.surface.shape[:2], dtype=DTYPE)
        return torch.cat([zeros, self.interior_sdf, self.free_sdf], dim=1)

    @property
    def n(self):
        return self.surface.shape[1]


def step_rng(seed: int, step: int) -> np.random.Generator:
    # Every step's randomness derives from (seed, step) alone, so a resumed run
    # draws exactly the batches an uninterrupted one would.
    return np.random.default_rng([int(seed), int(step), 0x5EED])


def make_batch(sets, config: TrainConfig, step: int) -> Batch:
    rng = step_rng(config.seed, step)
    n_shapes = len(sets)
    B = min(config.batch_poses, n_shapes)
    idx = np.sort(rng.choice(n_shapes, size=B, replace=False))
    n = config.points_per_category
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))
    cols = {k: [] for k in ("s", "n", "i", "isdf", "f", "fsdf")}
    for k in idx:
        s: ShapeSampleSet = sets[k]
        a = rng.integers(0, len(s.surface_points), n)
        b = rng.integers(0, len(s.interior_points), n)
        c = rng.integers(0, len(s.free_points), n)
        cols["s"].append(s.surface_points[a])
        cols["n"].append(s.surface_normals[a])
        cols["i"].append(s.interior_points[b])
        cols["isdf"].append(s.interior_sdf[b])
        cols["f"].append(s.free_points[c])
        cols["fsdf"].append(s.free_sdf[c])
    st = {k: t(np.stack(v)) for k, v in cols.items()}
    uni = rng.uniform(-1.0, 1.0, size=(config.template_points, 3))
    off = rng.standard_normal((B, n, config.nbr_samples, 3)) * config.nbr_sigma
    return Batch(torch.from_numpy(idx.astype(np.int64)), st["s"], st["n"], st["i"], st["isdf"], st["f"], st["fsdf"], t(uni), t(off))


# -- objective -------------------------------------------------------------------------

def compute_losses(model: DeformModel, batch: Batch, config: TrainConfig):
    """Raw values of every loss term on one batch, plus diagnostics."""
    B, n = batch.surface.shape[:2]
    M = 2 * n  # surface + interior points carry Jacobians
    pts = batch.points
    codes = model.latents[batch.shape_idx]
    tmpl = model.template_code

    # Shape fields supervised directly.
    sdf_p = model.sdf_params(codes)
    phi, grad = model.sdf_with(sdf_p, pts, grad=True)
    is_surface = torch.zeros(pts.shape[:2], dtype=torch.bool)
    is_surface[:, :n] = True
    out = L.loss_sdf(phi, grad, batch.sdf_gt, is_surface, batch.normals)

    # Deformation into template space with Jacobians on S0 and S-.
    enc_in_val = phi.detach() if config.detach_sdf_input else phi
    enc_in_grad = grad.detach() if config.detach_sdf_input else grad
    enc_p = model.enc_hyper(codes)
    l, dl = model.encode_with(enc_p, pts, enc_in_val, enc_in_grad, n_jac=M)
    dec_t = model.dec_hyper(tmpl.unsqueeze(0)).expand(B, -1)
    q, jac = model.decode_with(dec_t, l, dl)

    # Template field queried through the correspondence.
    q_sdf, q_grad = model.template_sdf_field(q, grad=True)
    out["pbs"] = L.loss_pbs(q_sdf, batch.sdf_gt)
    grad_p = torch.einsum("bmji,bmj->bmi", jac[:, :n], q_grad[:, :n])  # J^T grad
    out["pbn"] = L.loss_pbn(grad_p, batch.normals)
    out["pfn"], n_pfn_skip = L.loss_pfn(q_grad[:, :n], jac[:, :n], batch.normals)

    u_sdf, u_grad = model.template_sdf_field(batch.template_uniform, grad=True)
    out["eik_tmpl"] = L.eikonal_term(u_grad)
    out["rho_tmpl"] = L.rho(u_sdf).mean()

    # Self-correspondence for the shapes and the template.
    dec_s = model.dec_hyper(codes)
    p_self, _ = model.decode_with(dec_s, l)
    tu = batch.template_uniform.unsqueeze(0)
    enc_t = model.enc_hyper(tmpl.unsqueeze(0))
    tu_val = u_sdf.detach().unsqueeze(0) if config.detach_sdf_input else u_sdf.unsqueeze(0)
    l_t, _ = model.encode_with(enc_t, tu, tu_val)
    tu_self, _ = model.decode_with(dec_t[:1], l_t)
    out["recon"] = 0.5 * (L.loss_recon(pts, p_self) + L.loss_recon(tu, tu_self))

    out["reg"], out["reg_tmpl"], nearest = L.loss_reg(model.latents, tmpl)

    # Rigidity.
    out["lr"] = L.loss_lr(jac, config.lr_variant)
    if config.nbr_detach_source:
        src_field = lambda x: model.sdf_with(sdf_p.detach(), x)[0].detach()
    else:
        src_field = lambda x: model.sdf_with(sdf_p, x)[0]
    tmpl_field = lambda x: model.template_sdf_field(x)[0]
    out["nbr"], n_nbr_skip = L.loss_nbr(
        batch.surface, q[:, :n], jac[:, :n], src_field, tmpl_field, batch.nbr_offsets,
        SVDGradMode.parse(config.svd3_grad_mode),
    )
    probs = model.part_probs(l[:, :M], q[:, :M])
    out["pr"] = L.loss_pr(pts[:, :M], q[:, :M], probs)
    diag = {"nbr_skipped": n_nbr_skip, "pfn_skipped": n_pfn_skip, "nearest_code": nearest}
    return out, diag


def weighted_terms(raw: dict, weights: L.LossWeights, ramp: float) -> dict:
    w = weights.to_dict()
    res = {}
    for term, (wname, ramped) in WEIGHTED_TERMS.items():
        res[term] = raw[term] * (w[wname] * (ramp if ramped else 1.0))
    return res


def total_loss(raw: dict, weights: L.LossWeights, ramp: float):
    return sum(weighted_terms(raw, weights, ramp).values())


@dataclass
class StepResult:
    step: int
    lr: float
    ramp: float
    total: float
    raw: dict
    weighted: dict
    grad_norm: float
    clipped: bool


def train_step(state: ModelState, batch: Batch) -> StepResult:
    """One Adam update; raises NonFiniteLossError (state untouched) on a non-finite term."""
    cfg = state.config
    ramp = rigid_ramp(state.step, cfg.warmup_steps)
    lr = learning_rate(state.step, cfg)
    raw, _ = compute_losses(state.model, batch, cfg)
    for k in TERMS:
        if not torch.isfinite(raw[k]):
            raise NonFiniteLossError(k, state.step)
    wt = weighted_terms(raw, state.weights, ramp)
    loss = sum(wt.values())
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    params = [p for p in state.model.parameters()]
    gn = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip, error_if_nonfinite=False))
    if not math.isfinite(gn):
        state.optimizer.zero_grad(set_to_none=False)
        raise NonFiniteLossError("gradient", state.step)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    res = StepResult(
        state.step, lr, ramp, float(loss.detach()),
        {k: float(raw[k].detach()) for k in TERMS},
        {k: float(wt[k].detach()) for k in TERMS},
        gn, gn > cfg.grad_clip,
    )
    state.step += 1
    return res


class LossLog:
    """CSV trace: step, lr, ramp, total, grad norm, then raw and weighted values of every term."""

    header = ["step", "lr", "ramp", "total", "grad_norm", "clipped"] + [f"raw_{t}" for t in TERMS] + [f"w_{t}" for t in TERMS]

    def __init__(self, path=None, append=False):
        self.rows = []
        self.path = None if path is None else Path(path)
        if self.path is not None and not (append and self.path.exists()):
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.header)

    def add(self, r: StepResult):
        row = [r.step, repr(r.lr), repr(r.ramp), repr(r.total), repr(r.grad_norm), int(r.clipped)]
        row += [repr(r.raw[t]) for t in TERMS] + [repr(r.weighted[t]) for t in TERMS]
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def train(state: ModelState, sets, steps: int | None = None, log: LossLog | None = None,
          checkpoint_path=None, checkpoint_every: int = 0, callback=None):
    """Run until ``state.step`` reaches ``steps`` (default: the configured total)."""
    end = state.config.steps if steps is None else steps
    if len(sets) != state.model.n_shapes:
        raise ValueError(f"model has {state.model.n_shapes} latents but {len(sets)} sample sets were given")
    results = []
    while state.step < end:
        batch = make_batch(sets, state.config, state.step)
        try:
            r = train_step(state, batch)
        except NonFiniteLossError:
            if checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
            raise
        results.append(r)
        if log is not None:
            log.add(r)
        if callback is not None:
            callback(r)
        if checkpoint_path is not None and checkpoint_every and state.step % checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return results


# -- checkpoints -----------------------------------------------------------------------
# Layout: magic (8 bytes) | uint32 version | uint64 header length | JSON header | raw
# little-endian float64 tensors in header order.

def _state_tensors(state: ModelState):
    out = [(f"param/{k}", v.detach()) for k, v in state.model.named_parameters()]
    names = {id(p): k for k, p in state.model.named_parameters()}
    for p in state.model.parameters():
        st = state.optimizer.state.get(p)
        if not st:
            continue
        k = names[id(p)]
        out.append((f"adam_m/{k}", st["exp_avg"]))
        out.append((f"adam_v/{k}", st["exp_avg_sq"]))
        out.append((f"adam_step/{k}", torch.as_tensor(st["step"], dtype=DTYPE).reshape(1)))
    return out


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    tensors = _state_tensors(state)
    header = {
        "arch": state.model.arch.to_dict(),
        "weights": state.weights.to_dict(),
        "config": state.config.to_dict(),
        "pose_ids": state.pose_ids,
        "latent_keys": {str(pid): i for i, pid in enumerate(state.pose_ids)},
        "step": state.step,
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for _, t in tensors:
            fh.write(t.detach().cpu().numpy().astype("<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    arch = ArchConfig.from_dict(header["arch"])
    config = TrainConfig.from_dict(header["config"])
    state = ModelState.create(arch, header["pose_ids"], config, L.LossWeights(**header["weights"]))
    state.step = int(header["step"])
    params = dict(state.model.named_parameters())
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"checkpoint truncated while reading {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[name] = torch.from_numpy(arr.astype(np.float64))
        offset += nbytes
    with torch.no_grad():
        for k, p in params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise CheckpointFormatError(f"checkpoint lacks parameter {k}")
            p.copy_(arrays[key])
    for k, p in params.items():
        if f"adam_m/{k}" in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"adam_step/{k}"][0])),
                "exp_avg": arrays[f"adam_m/{k}"].clone(),
                "exp_avg_sq": arrays[f"adam_v/{k}"].clone(),
            }
    return state


# -- template --------------------------------------------------------------------------

def extract_template(state_or_model, resolution: int = 64, bounds=(-1.0, 1.0)):
    """Marching-cubes mesh of the template field's zero level set."""
    from . import geometry

    model = state_or_model.model if isinstance(state_or_model, ModelState) else state_or_model

    def field(p):
        with torch.no_grad():
            v, _ = model.template_sdf_field(torch.from_numpy(np.asarray(p, dtype=np.float64)))
        return v.numpy()

    mesh = geometry.marching_cubes(field, bounds, resolution)
    if mesh.n_vertices == 0:
        warnings.warn("template field has an empty zero level set inside the bounds")
    return mesh
