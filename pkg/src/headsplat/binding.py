"""Rigging of Gaussians to mesh triangles, plus densification and pruning.

Each splat stores its parameters in the local frame of one triangle
(origin = centroid, x-axis = first edge, z-axis = normal, scaled by
sqrt(2 * area)).  Posing the mesh moves the frames; the splats follow
rigidly.  Bindings are fixed after creation except through densify/prune
inheritance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import quat
from .errors import GeometryError, ParameterError
from .gaussian_scene import GaussianPrimitive, sh_coeff_count
from .head_model import Mesh

DEGENERATE_AREA = 1e-12

# Declared defaults; the Gaussian-avatar lineage does not publish these.
DEFAULT_INIT_LOCAL_SCALE = (0.5, 0.5, 0.01)
DEFAULT_INIT_OPACITY = 0.5
SPLIT_SCALE_FACTOR = 1.6


@dataclass
class TriangleFrame:
    """Local similarity frame of one mesh triangle."""

    origin: np.ndarray     # centroid, (3,)
    rotation: np.ndarray   # unit quaternion, columns (edge, normal x edge, normal)
    tri_scale: float       # sqrt(2 * area), meters

    def rotation_matrix(self) -> np.ndarray:
        return quat.to_matrix(self.rotation)


@dataclass
class BoundGaussian:
    """A splat parameterized in its triangle's local frame."""

    triangle_id: int
    local_mu: np.ndarray        # (3,), in tri_scale units
    local_scale: np.ndarray     # (3,), positive, in tri_scale units
    local_rotation: np.ndarray  # (4,), unit quaternion
    opacity: float
    sh: np.ndarray              # (coeffs, 3)

    def __post_init__(self):
        self.local_mu = np.asarray(self.local_mu, dtype=np.float64)
        self.local_scale = np.asarray(self.local_scale, dtype=np.float64)
        self.local_rotation = quat.check_unit(np.asarray(self.local_rotation, dtype=np.float64))
        self.sh = np.asarray(self.sh, dtype=np.float64)
        self.opacity = float(self.opacity)
        if self.triangle_id < 0:
            raise ParameterError("triangle_id must be non-negative")
        if np.any(self.local_scale <= 0):
            raise ParameterError("local_scale must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ParameterError(f"opacity {self.opacity} outside [0, 1]")

    def copy(self) -> "BoundGaussian":
        return BoundGaussian(
            triangle_id=self.triangle_id,
            local_mu=self.local_mu.copy(),
            local_scale=self.local_scale.copy(),
            local_rotation=self.local_rotation.copy(),
            opacity=self.opacity,
            sh=self.sh.copy(),
        )


@dataclass
class BoundScene:
    """All bound splats plus the per-triangle occupancy counts."""

    bound: List[BoundGaussian]
    per_triangle_count: np.ndarray  # (F,) non-negative ints
    sh_degree: int = 0

    def __post_init__(self):
        self.per_triangle_count = np.asarray(self.per_triangle_count, dtype=np.int64)
        counts = recount(self.bound, len(self.per_triangle_count))
        if not np.array_equal(counts, self.per_triangle_count):
            raise ParameterError("per_triangle_count inconsistent with bound list")

    def __len__(self) -> int:
        return len(self.bound)


def recount(bound: List[BoundGaussian], num_triangles: int) -> np.ndarray:
    counts = np.zeros(num_triangles, dtype=np.int64)
    for b in bound:
        if b.triangle_id >= num_triangles:
            raise ParameterError(f"triangle_id {b.triangle_id} out of range")
        counts[b.triangle_id] += 1
    return counts


def triangle_frame(mesh: Mesh, tri: int) -> TriangleFrame:
    """Frame from the triangle's centroid, first edge, and normal."""
    v0, v1, v2 = mesh.vertices[mesh.triangles[tri]]
    e1 = v1 - v0
    n = np.cross(e1, v2 - v0)
    area = 0.5 * np.linalg.norm(n)
    if area < DEGENERATE_AREA:
        raise GeometryError(f"triangle {tri} is degenerate (area {area})")
    x = e1 / np.linalg.norm(e1)
    z = n / np.linalg.norm(n)
    y = np.cross(z, x)
    rot = quat.from_matrix(np.column_stack([x, y, z]))
    return TriangleFrame(
        origin=(v0 + v1 + v2) / 3.0,
        rotation=rot,
        tri_scale=float(np.sqrt(2.0 * area)),
    )


def triangle_frames(mesh: Mesh) -> List[TriangleFrame]:
    return [triangle_frame(mesh, f) for f in range(mesh.triangles.shape[0])]


def globalize(b: BoundGaussian, frame: TriangleFrame) -> GaussianPrimitive:
    """Map a bound splat through its triangle's similarity frame."""
    r = frame.rotation_matrix()
    return GaussianPrimitive(
        mu=frame.origin + frame.tri_scale * (r @ b.local_mu),
        scale=frame.tri_scale * b.local_scale,
        rotation=quat.multiply(frame.rotation, b.local_rotation),
        opacity=b.opacity,
        sh=b.sh.copy(),
    )


def globalize_scene(scene: BoundScene, frames: List[TriangleFrame]) -> List[GaussianPrimitive]:
    return [globalize(b, frames[b.triangle_id]) for b in scene.bound]


def initialize_binding(mesh: Mesh, sh_degree: int = 0) -> BoundScene:
    """One splat per triangle: centroid-centered, thin along the normal."""
    num_tris = mesh.triangles.shape[0]
    coeffs = sh_coeff_count(sh_degree)
    bound = []
    for f in range(num_tris):
        triangle_frame(mesh, f)  # raises GeometryError on degenerate input
        bound.append(
            BoundGaussian(
                triangle_id=f,
                local_mu=np.zeros(3),
                local_scale=np.array(DEFAULT_INIT_LOCAL_SCALE),
                local_rotation=quat.IDENTITY.copy(),
                opacity=DEFAULT_INIT_OPACITY,
                sh=np.zeros((coeffs, 3)),  # mid-gray via the +0.5 SH offset
            )
        )
    return BoundScene(
        bound=bound,
        per_triangle_count=np.ones(num_tris, dtype=np.int64),
        sh_degree=sh_degree,
    )


def densify(
    scene: BoundScene,
    grad_norms: np.ndarray,
    tau_grad: float,
    size_split: float,
    rng: Optional[np.random.Generator] = None,
) -> BoundScene:
    """Split large high-gradient splats, clone small ones.

    Splats with view-space positional gradient above tau_grad are replaced
    by two children sampled from the parent density (scales / 1.6) when
    max(local_scale) > size_split, or cloned in place otherwise.  Offspring
    inherit the parent's triangle.
    """
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if grad_norms.shape != (len(scene.bound),):
        raise ParameterError(
            f"grad_norms must have length {len(scene.bound)}, got {grad_norms.shape}"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    out: List[BoundGaussian] = []
    for b, g in zip(scene.bound, grad_norms):
        if g <= tau_grad:
            out.append(b.copy())
        elif np.max(b.local_scale) > size_split:
            rot = quat.to_matrix(b.local_rotation)
            for _ in range(2):
                offset = rot @ (rng.normal(size=3) * b.local_scale)
                child = b.copy()
                child.local_mu = b.local_mu + offset
                child.local_scale = b.local_scale / SPLIT_SCALE_FACTOR
                out.append(child)
        else:
            out.append(b.copy())
            out.append(b.copy())
    counts = recount(out, len(scene.per_triangle_count))
    return BoundScene(bound=out, per_triangle_count=counts, sh_degree=scene.sh_degree)


def prune(scene: BoundScene, alpha_min: float) -> BoundScene:
    """Drop low-opacity splats, always keeping each triangle's best one."""
    if not (0.0 < alpha_min < 1.0):
        raise ParameterError(f"alpha_min must lie in (0, 1), got {alpha_min}")
    num_tris = len(scene.per_triangle_count)
    best = {}  # triangle -> index of max-opacity splat (first wins ties)
    for i, b in enumerate(scene.bound):
        j = best.get(b.triangle_id)
        if j is None or b.opacity > scene.bound[j].opacity:
            best[b.triangle_id] = i
    keep = [
        b.copy()
        for i, b in enumerate(scene.bound)
        if b.opacity >= alpha_min or best.get(b.triangle_id) == i
    ]
    counts = recount(keep, num_tris)
    return BoundScene(bound=keep, per_triangle_count=counts, sh_degree=scene.sh_degree)
