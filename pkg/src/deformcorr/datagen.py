"""Procedural articulated shapes with exact SDF, normals and dense correspondence.

A shape is a chain of capsules joined end to end. The middle segment stays fixed and
every joint rotates the part of the chain on its far side, so each segment moves
rigidly and canonical (rest pose) coordinates give exact ground-truth correspondence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
INDEX_NAME = "index.json"
_SURFACE_EPS = 1e-6


class GeometryTooThinError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


def _axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


@dataclass
class ArticulatedSpec:
    segments: list  # (length, radius) per segment
    joint_angles: np.ndarray  # (n_poses, n_segments - 1), radians
    joint_axes: list = field(default_factory=list)

    def __post_init__(self):
        self.segments = [(float(l), float(r)) for l, r in self.segments]
        if not self.segments:
            raise ValueError("at least one segment is required")
        if any(l <= 0 or r <= 0 for l, r in self.segments):
            raise ValueError(f"segment lengths and radii must be positive: {self.segments}")
        n_joints = len(self.segments) - 1
        angles = np.asarray(self.joint_angles, dtype=np.float64)
        if n_joints == 0:
            # A single rigid segment: keep the pose count from the leading axis.
            self.joint_angles = angles.reshape(angles.shape[0] if angles.ndim == 2 else 1, 0)
        else:
            self.joint_angles = angles.reshape(-1, n_joints)
        if not self.joint_axes:
            self.joint_axes = [(0.0, 0.0, 1.0)] * n_joints
        if len(self.joint_axes) != n_joints:
            raise ValueError(f"expected {n_joints} joint axes, got {len(self.joint_axes)}")
        self.joint_axes = [tuple(float(c) for c in a) for a in self.joint_axes]

    @property
    def n_poses(self) -> int:
        return self.joint_angles.shape[0]

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def root(self) -> int:
        return self.n_segments // 2

    def rest_endpoints(self):
        """Rest-pose (a, b) endpoints: segments laid along +x, root centred at the origin."""
        lengths = np.array([l for l, _ in self.segments])
        starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
        offset = starts[self.root] + 0.5 * lengths[self.root]
        a = np.zeros((self.n_segments, 3))
        b = np.zeros((self.n_segments, 3))
        a[:, 0] = starts - offset
        b[:, 0] = starts + lengths - offset
        return a, b

    def segment_transforms(self, pose: int):
        """Per-segment rigid motions ``x_posed = R x_rest + t`` as (R, t) arrays."""
        a, b = self.rest_endpoints()
        n = self.n_segments
        rots = np.zeros((n, 3, 3))
        trans = np.zeros((n, 3))
        rots[self.root] = np.eye(3)
        angles = self.joint_angles[pose]
        for k in range(self.root + 1, n):
            # joint k-1 sits at the shared end b[k-1] == a[k]
            local = _axis_rotation(self.joint_axes[k - 1], angles[k - 1])
            pivot = a[k]
            rots[k] = rots[k - 1] @ local
            trans[k] = rots[k - 1] @ pivot + trans[k - 1] - rots[k] @ pivot
        for k in range(self.root - 1, -1, -1):
            local = _axis_rotation(self.joint_axes[k], -angles[k])
            pivot = b[k]
            rots[k] = rots[k + 1] @ local
            trans[k] = rots[k + 1] @ pivot + trans[k + 1] - rots[k] @ pivot
        return rots, trans

    def posed_endpoints(self, pose: int):
        a, b = self.rest_endpoints()
        rots, trans = self.segment_transforms(pose)
        pa = np.einsum("kij,kj->ki", rots, a) + trans
        pb = np.einsum("kij,kj->ki", rots, b) + trans
        return pa, pb

    def extent(self, pose: int) -> float:
        pa, pb = self.posed_endpoints(pose)
        radii = np.array([r for _, r in self.segments])
        return float(np.max(np.maximum(np.abs(pa), np.abs(pb)) + radii[:, None]))

    def normalized(self, margin: float = 0.95) -> "ArticulatedSpec":
        """Uniformly rescaled copy whose every pose fits inside ``[-margin, margin]^3``."""
        worst = max(self.extent(i) for i in range(self.n_poses))
        s = min(1.0, margin / worst)
        return ArticulatedSpec([(l * s, r * s) for l, r in self.segments], self.joint_angles.copy(), list(self.joint_axes))

    def to_dict(self) -> dict:
        return {
            "segments": [list(s) for s in self.segments],
            "joint_angles": self.joint_angles.tolist(),
            "joint_axes": [list(a) for a in self.joint_axes],
        }

    @classmethod
    def from_dict(cls, d) -> "ArticulatedSpec":
        return cls(d["segments"], np.asarray(d["joint_angles"], dtype=np.float64), d.get("joint_axes") or [])


def default_spec(n_poses=20, seed=0, max_angle_deg=100.0, segments=None) -> ArticulatedSpec:
    """Three-segment chain with distinct lengths and radii, random planar bends."""
    if segments is None:
        segments = [(0.45, 0.10), (0.6, 0.14), (0.40, 0.08)]
    rng = np.random.default_rng(seed)
    lim = np.deg2rad(max_angle_deg)
    angles = rng.uniform(-lim, lim, size=(n_poses, len(segments) - 1))
    return ArticulatedSpec(segments, angles).normalized()


# -- analytic field ---------------------------------------------------------------------

def _capsule_sdf(p, a, b, r):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    diff = p - closest
    dist = np.linalg.norm(diff, axis=1)
    return dist - r, diff, dist


def analytic_sdf(spec: ArticulatedSpec, pose: int, p):
    """Union-of-capsules SDF, its gradient and the owning segment for each query point.

    Exact outside the shape; inside overlapping capsules it is a lower bound.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    pa, pb = spec.posed_endpoints(pose)
    best = np.full(len(p), np.inf)
    normal = np.zeros_like(p)
    seg = np.zeros(len(p), dtype=np.int64)
    for k, (_, r) in enumerate(spec.segments):
        d, diff, dist = _capsule_sdf(p, pa[k], pb[k], r)
        win = d < best
        best = np.where(win, d, best)
        safe = np.where(dist > 1e-300, dist, 1.0)[:, None]
        n_k = np.where(dist[:, None] > 1e-300, diff / safe, np.array([1.0, 0.0, 0.0]))
        normal = np.where(win[:, None], n_k, normal)
        seg = np.where(win, k, seg)
    return best, normal, seg


def _segment_sdfs(spec, pose, p):
    pa, pb = spec.posed_endpoints(pose)
    return np.stack([_capsule_sdf(p, pa[k], pb[k], r)[0] for k, (_, r) in enumerate(spec.segments)], axis=1)


# -- sampling ---------------------------------------------------------------------------

@dataclass
class ShapeSampleSet:
    pose_id: int
    surface_points: np.ndarray
    surface_normals: np.ndarray
    surface_segments: np.ndarray
    surface_canonical: np.ndarray
    interior_points: np.ndarray
    interior_sdf: np.ndarray
    interior_segments: np.ndarray
    interior_canonical: np.ndarray
    free_points: np.ndarray
    free_sdf: np.ndarray

    _ARRAYS = (
        "surface_points", "surface_normals", "surface_segments", "surface_canonical",
        "interior_points", "interior_sdf", "interior_segments", "interior_canonical",
        "free_points", "free_sdf",
    )

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self._ARRAYS}


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_rest_capsule(rng, length, radius, n):
    """Uniform-area samples on a rest-pose capsule along +x from 0 to ``length``."""
    cyl = 2 * np.pi * radius * length
    sph = 4 * np.pi * radius ** 2
    on_cyl = rng.random(n) < cyl / (cyl + sph)
    theta = rng.uniform(0, 2 * np.pi, n)
    x = rng.uniform(0, length, n)
    pts = np.stack([x, radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    nrm = np.stack([np.zeros(n), np.cos(theta), np.sin(theta)], axis=1)
    u = _unit_vectors(rng, n)
    centre = np.where(u[:, :1] < 0, 0.0, length)
    cap_pts = u * radius
    cap_pts[:, 0] += centre[:, 0]
    pts = np.where(on_cyl[:, None], pts, cap_pts)
    nrm = np.where(on_cyl[:, None], nrm, u)
    return pts, nrm


def sample_pose(spec: ArticulatedSpec, pose: int, n_surface=5000, n_interior=2000, n_free=3000,
                noise_sigma=None, seed=0) -> ShapeSampleSet:
    if min(n_surface, n_interior, n_free) <= 0:
        raise ValueError("sample counts must be positive")
    rng = np.random.default_rng([seed, pose])
    a_rest, b_rest = spec.rest_endpoints()
    rots, trans = spec.segment_transforms(pose)
    lengths = np.array([l for l, _ in spec.segments])
    radii = np.array([r for _, r in spec.segments])
    areas = 2 * np.pi * radii * lengths + 4 * np.pi * radii ** 2

    pts_list, nrm_list, seg_list, can_list = [], [], [], []
    got = 0
    attempts = 0
    while got < n_surface:
        attempts += 1
        if attempts > 50:
            raise GeometryTooThinError("surface sampling failed to collect enough visible points")
        n_try = int(1.5 * (n_surface - got)) + 16
        counts = rng.multinomial(n_try, areas / areas.sum())
        for k, c in enumerate(counts):
            if c == 0:
                continue
            local, nloc = _sample_rest_capsule(rng, lengths[k], radii[k], c)
            canonical = local + a_rest[k]
            posed = canonical @ rots[k].T + trans[k]
            nposed = nloc @ rots[k].T
            others = np.delete(_segment_sdfs(spec, pose, posed), k, axis=1)
            keep = np.all(others >= -_SURFACE_EPS, axis=1) if others.size else np.ones(c, bool)
            pts_list.append(posed[keep])
            nrm_list.append(nposed[keep])
            seg_list.append(np.full(keep.sum(), k))
            can_list.append(canonical[keep])
            got += int(keep.sum())
    order = rng.permutation(got)[:n_surface]
    surface_points = np.concatenate(pts_list)[order]
    surface_normals = np.concatenate(nrm_list)[order]
    surface_segments = np.concatenate(seg_list)[order]
    surface_canonical = np.concatenate(can_list)[order]

    pa, pb = spec.posed_endpoints(pose)
    lo = np.minimum(pa, pb).min(axis=0) - radii.max()
    hi = np.maximum(pa, pb).max(axis=0) + radii.max()
    inside, tried = [], 0
    while sum(len(x) for x in inside) < n_interior:
        q = rng.uniform(lo, hi, size=(4 * n_interior, 3))
        tried += len(q)
        d, _, _ = analytic_sdf(spec, pose, q)
        inside.append(q[d < 0])
        if tried >= 100 * n_interior and sum(len(x) for x in inside) < 0.01 * tried:
            raise GeometryTooThinError(
                f"interior acceptance rate {sum(len(x) for x in inside) / tried:.4f} is below 1%"
            )
    interior_points = np.concatenate(inside)[:n_interior]
    interior_sdf, _, interior_segments = analytic_sdf(spec, pose, interior_points)
    interior_canonical = np.einsum("nji,nj->ni", rots[interior_segments], interior_points - trans[interior_segments])

    free_points = rng.uniform(-1.0, 1.0, size=(n_free, 3))
    free_sdf, _, _ = analytic_sdf(spec, pose, free_points)

    if noise_sigma:
        interior_sdf = interior_sdf + rng.normal(0.0, noise_sigma, size=interior_sdf.shape)
        free_sdf = free_sdf + rng.normal(0.0, noise_sigma, size=free_sdf.shape)

    return ShapeSampleSet(
        pose_id=pose,
        surface_points=surface_points,
        surface_normals=surface_normals,
        surface_segments=surface_segments,
        surface_canonical=surface_canonical,
        interior_points=interior_points,
        interior_sdf=interior_sdf,
        interior_segments=interior_segments,
        interior_canonical=interior_canonical,
        free_points=free_points,
        free_sdf=free_sdf,
    )


def correspondence_oracle(spec: ArticulatedSpec, pose_a: int, pose_b: int, points, segments):
    """Map points of pose ``a`` to pose ``b`` through their owning segment's rigid motions."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    segments = np.asarray(segments, dtype=np.int64).reshape(-1)
    ra, ta = spec.segment_transforms(pose_a)
    rb, tb = spec.segment_transforms(pose_b)
    canonical = np.einsum("nji,nj->ni", ra[segments], points - ta[segments])
    return np.einsum("nij,nj->ni", rb[segments], canonical) + tb[segments]


def canonical_to_pose(spec: ArticulatedSpec, pose: int, canonical, segments):
    rots, trans = spec.segment_transforms(pose)
    segments = np.asarray(segments, dtype=np.int64).reshape(-1)
    return np.einsum("nij,nj->ni", rots[segments], np.atleast_2d(canonical)) + trans[segments]


def interpolated_spec(spec: ArticulatedSpec, pose_a: int, pose_b: int) -> ArticulatedSpec:
    """One-pose spec whose joint angles lie midway between two poses."""
    mid = 0.5 * (spec.joint_angles[pose_a] + spec.joint_angles[pose_b])
    return ArticulatedSpec(spec.segments, mid[None], list(spec.joint_axes))


def partial_view(points, normals, direction, threshold=-0.2):
    """Mask of surface points facing an orthographic camera looking along ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    return np.asarray(normals) @ d < threshold


# -- persistence ------------------------------------------------------------------------

def generate_dataset(spec: ArticulatedSpec, counts=(5000, 2000, 3000), noise_sigma=None, seed=0):
    return [sample_pose(spec, i, *counts, noise_sigma=noise_sigma, seed=seed) for i in range(spec.n_poses)]


def save_dataset(path, spec: ArticulatedSpec, sample_sets, seed=0, noise_sigma=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for s in sample_sets:
        name = f"pose_{s.pose_id:04d}.npz"
        arrays = {k: np.ascontiguousarray(v, dtype="<i8" if v.dtype.kind in "iu" else "<f8") for k, v in s.arrays().items()}
        np.savez(path / name, format_version=np.array(FORMAT_VERSION, dtype="<i8"),
                 pose_id=np.array(s.pose_id, dtype="<i8"), **arrays)
        files.append(name)
    index = {
        "format": "deformcorr-dataset",
        "format_version": FORMAT_VERSION,
        "pose_ids": [s.pose_id for s in sample_sets],
        "files": files,
        "seed": seed,
        "noise_sigma": noise_sigma,
        "spec": spec.to_dict(),
    }
    (path / INDEX_NAME).write_text(json.dumps(index, indent=2))
    return path


def load_dataset(path):
    path = Path(path)
    index_file = path / INDEX_NAME
    if not index_file.exists():
        raise FileNotFoundError(f"no dataset index at {index_file}")
    index = json.loads(index_file.read_text())
    if index.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {index.get('format_version')}")
    spec = ArticulatedSpec.from_dict(index["spec"])
    sets = []
    for name in index["files"]:
        with np.load(path / name) as z:
            if int(z["format_version"]) != FORMAT_VERSION:
                raise DatasetFormatError(f"{name}: unsupported format version")
            sets.append(ShapeSampleSet(pose_id=int(z["pose_id"]), **{k: z[k] for k in ShapeSampleSet._ARRAYS}))
    return spec, sets, index
