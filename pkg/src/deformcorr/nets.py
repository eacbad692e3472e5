"""Hypernetwork-conditioned sine MLPs: the SDF field, the deformation encoder/decoder
and the two part-probability networks.

Input derivatives (SDF gradients, deformation Jacobians) are propagated forward as
tangents alongside the activations, so they are ordinary differentiable tensors and
the losses built on them can be back-propagated to every weight.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .autodiff import DTYPE


@dataclass(frozen=True)
class ArchConfig:
    latent_dim: int = 128
    hyper_hidden: int = 256
    hyper_layers: int = 5
    hidden: int = 128
    sdf_layers: int = 5
    encoder_layers: int = 5
    decoder_layers: int = 4
    bottleneck: int = 8
    part_hidden: int = 128
    part_e_layers: int = 4
    part_d_layers: int = 3
    n_parts: int = 20
    omega: float = 30.0
    part_omega: float = 15.0
    hyper_init_scale: float = 1e-2
    latent_init_std: float = 0.01
    sdf_input: bool = True
    use_part_e: bool = True
    separate_template: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


FULL_ARCH = ArchConfig()


def layer_dims(in_dim, hidden, out_dim, n_layers):
    """Widths of an ``n_layers`` fully connected stack."""
    if n_layers < 2:
        raise ValueError("a network needs at least two layers")
    return [in_dim] + [hidden] * (n_layers - 1) + [out_dim]


def param_count(dims) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def siren_init(dims, omega, generator=None) -> torch.Tensor:
    """Flattened sine-network initialisation, layer by layer ``[W (out, in), b (out)]``."""
    chunks = []
    for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / i if k == 0 else math.sqrt(6.0 / i) / omega
        w = (torch.rand(o, i, generator=generator, dtype=DTYPE) * 2 - 1) * bound
        b = (torch.rand(o, generator=generator, dtype=DTYPE) * 2 - 1) * (1.0 / math.sqrt(i))
        chunks += [w.reshape(-1), b]
    return torch.cat(chunks)


def siren_apply(flat, x, dims, omega, tangent=None):
    """Evaluate a batch of sine MLPs with per-batch parameters.

    flat: (B, P) parameters; x: (B, N, in). ``tangent`` (B, M, k, in) carries input
    derivatives for the first M points; returns ``(y, dy)`` with dy (B, M, k, out).
    Hidden layers use ``sin(omega * (W x + b))``; the last layer is linear.
    """
    B, N, _ = x.shape
    if tangent is not None:
        M, k = tangent.shape[1], tangent.shape[2]
        h = torch.cat([x, tangent.reshape(B, M * k, -1)], dim=1)
    else:
        h = x
    offset = 0
    n_layers = len(dims) - 1
    for li, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        w = flat[:, offset:offset + i * o].reshape(B, o, i)
        offset += i * o
        b = flat[:, offset:offset + o]
        offset += o
        z = torch.bmm(h, w.transpose(1, 2))
        if tangent is None:
            z = z + b.unsqueeze(1)
            h = z if li == n_layers - 1 else torch.sin(omega * z)
            continue
        zv = z[:, :N] + b.unsqueeze(1)
        zt = z[:, N:]
        if li == n_layers - 1:
            h = torch.cat([zv, zt], dim=1)
        else:
            scale = omega * torch.cos(omega * zv[:, :M])
            ht = (zt.reshape(B, M, k, o) * scale.unsqueeze(2)).reshape(B, M * k, o)
            h = torch.cat([torch.sin(omega * zv), ht], dim=1)
    if tangent is None:
        return h, None
    return h[:, :N], h[:, N:].reshape(B, M, k, -1)


class HyperNet(nn.Module):
    """ReLU MLP mapping a latent code to the flattened parameters of one target network."""

    def __init__(self, latent_dim, hidden, n_layers, target_dims, omega, init_scale=1e-2, generator=None):
        super().__init__()
        self.target_dims = list(target_dims)
        self.omega = omega
        out = param_count(self.target_dims)
        dims = layer_dims(latent_dim, hidden, out, n_layers)
        layers = []
        for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
            lin = nn.Linear(i, o, dtype=DTYPE)
            nn.init.kaiming_normal_(lin.weight, nonlinearity="relu", generator=generator)
            nn.init.zeros_(lin.bias)
            layers.append(lin)
            if k < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        last = self.net[-1]
        with torch.no_grad():
            last.weight.mul_(init_scale / math.sqrt(2.0))
            last.bias.copy_(siren_init(self.target_dims, omega, generator))
        if last.bias.numel() != param_count(self.target_dims):
            raise AssertionError("hypernetwork output does not match the target parameter count")

    @property
    def n_target_params(self) -> int:
        return param_count(self.target_dims)

    def forward(self, codes):
        return self.net(codes)


class PartNet(nn.Module):
    """Sine MLP with its own weights, producing softmax part probabilities."""

    def __init__(self, in_dim, hidden, n_layers, n_parts, omega, generator=None):
        super().__init__()
        self.dims = layer_dims(in_dim, hidden, n_parts, n_layers)
        self.omega = omega
        self.flat = nn.Parameter(siren_init(self.dims, omega, generator))

    def logits(self, x):
        shape = x.shape
        y, _ = siren_apply(self.flat.unsqueeze(0), x.reshape(1, -1, shape[-1]), self.dims, self.omega)
        return y.reshape(*shape[:-1], -1)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=-1)


class DeformModel(nn.Module):
    """Template SDF field plus latent-conditioned deformation into template space."""

    def __init__(self, arch: ArchConfig, n_shapes: int, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.n_shapes = n_shapes
        g = torch.Generator().manual_seed(seed)
        a = arch
        self.sdf_dims = layer_dims(3, a.hidden, 1, a.sdf_layers)
        enc_in = 4 if a.sdf_input else 3
        self.enc_dims = layer_dims(enc_in, a.hidden, a.bottleneck, a.encoder_layers)
        self.dec_dims = layer_dims(a.bottleneck, a.hidden, 3, a.decoder_layers)
        self.sdf_hyper = HyperNet(a.latent_dim, a.hyper_hidden, a.hyper_layers, self.sdf_dims, a.omega, a.hyper_init_scale, g)
        self.enc_hyper = HyperNet(a.latent_dim, a.hyper_hidden, a.hyper_layers, self.enc_dims, a.omega, a.hyper_init_scale, g)
        self.dec_hyper = HyperNet(a.latent_dim, a.hyper_hidden, a.hyper_layers, self.dec_dims, a.omega, a.hyper_init_scale, g)
        self.part_e = PartNet(a.bottleneck, a.part_hidden, a.part_e_layers, a.n_parts, a.part_omega, g)
        self.part_d = PartNet(3, a.part_hidden, a.part_d_layers, a.n_parts, a.part_omega, g)
        self.latents = nn.Parameter(torch.randn(n_shapes, a.latent_dim, generator=g, dtype=DTYPE) * a.latent_init_std)
        self.template_code = nn.Parameter(torch.randn(a.latent_dim, generator=g, dtype=DTYPE) * a.latent_init_std)
        if a.separate_template:
            self.template_sdf = nn.Parameter(siren_init(self.sdf_dims, a.omega, g))
        else:
            self.register_parameter("template_sdf", None)

    # -- parameter generation ---------------------------------------------------------
    def sdf_params(self, codes):
        return self.sdf_hyper(codes)

    def template_sdf_params(self):
        if self.template_sdf is not None:
            return self.template_sdf.unsqueeze(0)
        return self.sdf_hyper(self.template_code.unsqueeze(0))

    # -- fields -------------------------------------------------------------------------
    def sdf_with(self, params, points, grad=False):
        """Phi(p) = phi(p) + |p| for per-batch parameters; optionally its gradient in p."""
        B, N, _ = points.shape
        r = torch.sqrt(torch.sum(points * points, dim=-1) + 1e-24)
        if not grad:
            y, _ = siren_apply(params, points, self.sdf_dims, self.arch.omega)
            return y[..., 0] + r, None
        seed = torch.eye(3, dtype=DTYPE).expand(B, N, 3, 3)
        y, dy = siren_apply(params, points, self.sdf_dims, self.arch.omega, tangent=seed)
        g = dy[..., 0] + points / r.unsqueeze(-1)
        return y[..., 0] + r, g

    def sdf(self, points, codes, grad=False):
        return self.sdf_with(self.sdf_params(codes), points, grad)

    def template_sdf_field(self, points, grad=False):
        """Template field at points of shape (N, 3) or (B, N, 3)."""
        squeeze = points.dim() == 2
        pts = points.unsqueeze(0) if squeeze else points
        B = pts.shape[0]
        params = self.template_sdf_params()
        flat = pts.reshape(1, -1, 3)
        val, g = self.sdf_with(params, flat, grad)
        val = val.reshape(pts.shape[:-1])
        g = None if g is None else g.reshape(pts.shape)
        if squeeze:
            return val[0], (None if g is None else g[0])
        return val, g

    def encode_with(self, params, points, sdf_val, sdf_grad=None, n_jac=0):
        """Bottleneck code l(p) and, for the first ``n_jac`` points, dl/dp (B, M, 3, 8)."""
        if self.arch.sdf_input:
            x = torch.cat([points, sdf_val.unsqueeze(-1)], dim=-1)
        else:
            x = points
        if n_jac == 0:
            return siren_apply(params, x, self.enc_dims, self.arch.omega)
        B = points.shape[0]
        eye = torch.eye(3, dtype=DTYPE).expand(B, n_jac, 3, 3)
        if self.arch.sdf_input:
            tangent = torch.cat([eye, sdf_grad[:, :n_jac].unsqueeze(-1)], dim=-1)
        else:
            tangent = eye
        return siren_apply(params, x, self.enc_dims, self.arch.omega, tangent=tangent)

    def decode_with(self, params, code, dcode=None):
        """Decoder output and, given dl/dp (B, M, 3, 8), the Jacobian as (B, M, 3, 3) rows=outputs."""
        if dcode is None:
            return siren_apply(params, code, self.dec_dims, self.arch.omega)
        y, dy = siren_apply(params, code, self.dec_dims, self.arch.omega, tangent=dcode)
        return y, dy.transpose(-1, -2)

    # -- convenience wrappers used outside training ----------------------------------
    def deform(self, points, src_codes, dst_code=None, detach_sdf=False, n_jac=0):
        """D_{src -> dst}(p) for points (B, N, 3); dst defaults to the template code.

        Returns (q, l, jac, sdf, sdf_grad); jac is None unless ``n_jac`` > 0.
        """
        B = points.shape[0]
        need_grad = n_jac > 0
        sdf_val, sdf_grad = self.sdf(points, src_codes, grad=need_grad)
        if detach_sdf:
            sdf_val = sdf_val.detach()
            sdf_grad = None if sdf_grad is None else sdf_grad.detach()
        enc_p = self.enc_hyper(src_codes)
        l, dl = self.encode_with(enc_p, points, sdf_val, sdf_grad, n_jac)
        if dst_code is None:
            dst_code = self.template_code
        dec_p = self.dec_hyper(dst_code.reshape(-1, self.arch.latent_dim))
        if dec_p.shape[0] == 1 and B > 1:
            dec_p = dec_p.expand(B, -1)
        q, jac = self.decode_with(dec_p, l, dl)
        return q, l, jac, sdf_val, sdf_grad

    def part_probs(self, l, q):
        """Concatenated part probabilities [psi_e(l), psi_d(q)] (or psi_d alone when psi_e is ablated)."""
        pd = self.part_d(q)
        if not self.arch.use_part_e:
            return pd
        return torch.cat([self.part_e(l), pd], dim=-1)


def jacobian_fd(f, p, h=1e-6):
    """Central-difference Jacobian of ``f: (N, 3) -> (N, 3)``, rows are outputs."""
    cols = []
    for k in range(3):
        e = torch.zeros(3, dtype=DTYPE)
        e[k] = h
        cols.append((f(p + e) - f(p - e)) / (2 * h))
    return torch.stack(cols, dim=-1)
