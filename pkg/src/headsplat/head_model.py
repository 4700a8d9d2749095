"""Linear parametric head model: template + blendshapes + weighted jaw rotation.

A deliberately small stand-in for a full morphable head: vertices are
`template + shape_basis @ shape + expression_basis @ expression`, then a
per-vertex weighted jaw rotation about a fixed joint, then a global rigid
transform.  The parameter interface (shape / expression / jaw / pose /
translation) matches what the animation and fitting stages expect.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat
from .errors import GeometryError, InputError, ParameterError


def _as_f64(a, name: str, shape=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise ParameterError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError(f"{name} contains non-finite values")
    return a


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - v0
    e2 = vertices[triangles[:, 2]] - v0
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


@dataclass
class TemplateMesh:
    """Neutral mesh: V x 3 vertices (meters) and F x 3 triangle indices."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = _as_f64(self.vertices, "vertices")
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParameterError("vertices must be V x 3")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ParameterError("triangles must be F x 3")
        v, f = self.vertices.shape[0], self.triangles.shape[0]
        if v < 4 or f < 1:
            raise ParameterError(f"need V >= 4 and F >= 1, got V={v}, F={f}")
        if self.triangles.min() < 0 or self.triangles.max() >= v:
            raise ParameterError("triangle indices out of range")
        if np.any(triangle_areas(self.vertices, self.triangles) <= 0.0):
            raise GeometryError("template contains degenerate triangles")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass
class Mesh:
    """A posed mesh sharing its template's topology."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = _as_f64(self.vertices, "vertices")
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParameterError("vertices must be V x 3")


@dataclass
class BlendshapeBasis:
    """Shape/expression displacement bases plus the jaw joint and mask.

    jaw_weight is 0 for vertices above the jaw joint (template up-axis = +y)
    and blends up to 1 on the fully articulated jaw region.
    """

    shape_basis: np.ndarray       # V x 3 x B_s
    expression_basis: np.ndarray  # V x 3 x B_e
    jaw_joint: np.ndarray         # (3,)
    jaw_weight: np.ndarray        # (V,) in [0, 1]

    def __post_init__(self):
        self.shape_basis = _as_f64(self.shape_basis, "shape_basis")
        self.expression_basis = _as_f64(self.expression_basis, "expression_basis")
        self.jaw_joint = _as_f64(self.jaw_joint, "jaw_joint", (3,))
        self.jaw_weight = _as_f64(self.jaw_weight, "jaw_weight")
        for name, b in (("shape_basis", self.shape_basis), ("expression_basis", self.expression_basis)):
            if b.ndim != 3 or b.shape[1] != 3:
                raise ParameterError(f"{name} must be V x 3 x B")
        if self.jaw_weight.ndim != 1 or self.jaw_weight.shape[0] != self.shape_basis.shape[0]:
            raise ParameterError("jaw_weight must be a V-vector")
        if np.any(self.jaw_weight < 0) or np.any(self.jaw_weight > 1):
            raise ParameterError("jaw_weight must lie in [0, 1]")

    @property
    def num_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def num_expression(self) -> int:
        return self.expression_basis.shape[2]


@dataclass
class HeadParams:
    """Low-dimensional head state: shape, expression, jaw, global pose."""

    shape: np.ndarray
    expression: np.ndarray
    jaw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_rotation: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.shape = _as_f64(self.shape, "shape")
        self.expression = _as_f64(self.expression, "expression")
        self.jaw = _as_f64(self.jaw, "jaw", (3,))
        self.global_rotation = quat.check_unit(_as_f64(self.global_rotation, "global_rotation", (4,)))
        self.translation = _as_f64(self.translation, "translation", (3,))

    @classmethod
    def zeros(cls, num_shape: int, num_expression: int) -> "HeadParams":
        return cls(shape=np.zeros(num_shape), expression=np.zeros(num_expression))


def jaw_rotate(vertices: np.ndarray, jaw: np.ndarray, joint: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Rotate vertices about `joint` by axis-angle `jaw`, scaled per vertex.

    weight 0 leaves a vertex fixed, weight 1 applies the full rotation;
    intermediate weights scale the rotation angle (not the displacement),
    so the map stays a rotation per vertex.
    """
    angle = np.linalg.norm(jaw)
    if angle < 1e-14:
        return vertices.copy()
    axis = jaw / angle
    theta = weight * angle  # per-vertex angle
    rel = vertices - joint
    cos_t = np.cos(theta)[:, None]
    sin_t = np.sin(theta)[:, None]
    cross = np.cross(np.broadcast_to(axis, rel.shape), rel)
    dot = rel @ axis
    rotated = rel * cos_t + cross * sin_t + np.outer(dot * (1.0 - cos_t.ravel()), axis)
    return rotated + joint


def pose_mesh(template: TemplateMesh, basis: BlendshapeBasis, params: HeadParams) -> Mesh:
    """Apply blendshapes, jaw rotation, and the global rigid transform."""
    if basis.shape_basis.shape[0] != template.num_vertices:
        raise ParameterError("basis vertex count does not match template")
    if params.shape.shape != (basis.num_shape,):
        raise ParameterError(
            f"shape coefficients must have length {basis.num_shape}, got {params.shape.shape}"
        )
    if params.expression.shape != (basis.num_expression,):
        raise ParameterError(
            f"expression coefficients must have length {basis.num_expression}, got {params.expression.shape}"
        )
    v = template.vertices + basis.shape_basis @ params.shape + basis.expression_basis @ params.expression
    v = jaw_rotate(v, params.jaw, basis.jaw_joint, basis.jaw_weight)
    v = v @ quat.to_matrix(params.global_rotation).T + params.translation
    return Mesh(vertices=v, triangles=template.triangles)


def compute_template(meshes) -> TemplateMesh:
    """Per-vertex mean of a sequence of meshes with identical topology."""
    meshes = list(meshes)
    if not meshes:
        raise InputError("cannot average an empty mesh sequence")
    first = meshes[0]
    acc = np.zeros_like(first.vertices)
    for m in meshes:
        if m.vertices.shape != first.vertices.shape or not np.array_equal(m.triangles, first.triangles):
            raise InputError("meshes do not share topology")
        acc += m.vertices
    return TemplateMesh(vertices=acc / len(meshes), triangles=first.triangles.copy())


def _octahedron() -> tuple[np.ndarray, np.ndarray]:
    v = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
    )
    f = np.array(
        [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]],
        dtype=np.int64,
    )
    return v, f


def _subdivide(v: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    verts = list(map(tuple, v))
    index = {tuple(p): i for i, p in enumerate(v)}
    faces = []

    def midpoint(a, b):
        m = tuple(0.5 * (np.array(a) + np.array(b)))
        if m not in index:
            index[m] = len(verts)
            verts.append(m)
        return index[m]

    for tri in f:
        a, b, c = (tuple(v[i]) for i in tri)
        ia, ib, ic = (index[p] for p in (a, b, c))
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        faces += [[ia, ab, ca], [ab, ib, bc], [ca, bc, ic], [ab, bc, ca]]
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def _box() -> tuple[np.ndarray, np.ndarray]:
    v = np.array(
        [
            [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
        ],
        dtype=np.float64,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # back  (z = -1)
            [4, 5, 6], [4, 6, 7],  # front (z = +1)
            [0, 1, 5], [0, 5, 4],  # bottom
            [2, 3, 7], [2, 7, 6],  # top
            [0, 4, 7], [0, 7, 3],  # left
            [1, 2, 6], [1, 6, 5],  # right
        ],
        dtype=np.int64,
    )
    return v, f


def synthetic_head(
    num_shape: int = 16,
    num_expression: int = 16,
    seed: int = 0,
    kind: str = "sphere",
    subdivisions: int = 1,
    radius: float = 0.09,
) -> tuple[TemplateMesh, BlendshapeBasis]:
    """Deterministic, seeded head-like mesh with smooth random blendshapes.

    kind "sphere" is a subdivided octahedron squashed into a head-ish
    ellipsoid; kind "box" is an 8-vertex, 12-triangle cuboid for the
    smallest fitting experiments.  Up-axis is +y; the jaw joint sits in the
    lower half and jaw_weight ramps from 0 at the joint height down to 1 at
    the chin.
    """
    if kind == "sphere":
        v, f = _octahedron()
        for _ in range(max(0, int(subdivisions))):
            v, f = _subdivide(v, f)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
        v = v * np.array([0.85, 1.0, 0.9])  # slightly elongated skull
    elif kind == "box":
        v, f = _box()
        v = v * np.array([0.75, 1.0, 0.8])
    else:
        raise ParameterError(f"unknown synthetic head kind {kind!r}")
    v = v * radius

    rng = np.random.default_rng(seed)
    y = v[:, 1]
    joint_y = -0.15 * radius
    joint = np.array([0.0, joint_y, 0.25 * radius])
    ramp = (joint_y - y) / (0.6 * radius)
    jaw_weight = np.clip(ramp, 0.0, 1.0)

    def smooth_basis(n: int, scale: float, offset: int) -> np.ndarray:
        # Low-frequency random fields: sums of a few sinusoids of the
        # vertex coordinates, so neighboring vertices move coherently.
        out = np.zeros((v.shape[0], 3, n))
        for b in range(n):
            amp = rng.normal(size=(4, 3)) * scale
            freq = rng.uniform(5.0, 20.0, size=(4, 3))
            phase = rng.uniform(0, 2 * np.pi, size=(4, 3))
            for k in range(4):
                arg = v @ freq[k] + phase[k, 0]
                out[:, :, b] += np.sin(arg)[:, None] * amp[k]
        return out

    shape_basis = smooth_basis(num_shape, 0.004 * radius / 0.09, 0)
    expr_basis = smooth_basis(num_expression, 0.006 * radius / 0.09, 1)
    # Expressions act mostly on the lower face.
    expr_basis *= (0.25 + 0.75 * jaw_weight)[:, None, None]

    template = TemplateMesh(vertices=v, triangles=f)
    basis = BlendshapeBasis(
        shape_basis=shape_basis,
        expression_basis=expr_basis,
        jaw_joint=joint,
        jaw_weight=jaw_weight,
    )
    return template, basis
