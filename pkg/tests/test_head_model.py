import numpy as np
import pytest

from headsplat import quat
from headsplat.errors import ParameterError
from headsplat.head_model import (
    BlendshapeBasis, HeadParams, Mesh, TemplateMesh, compute_template,
    jaw_rotate, pose_mesh, synthetic_head, triangle_areas,
)

from helpers import quat_matrix


def test_quaternion_round_trips():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = quat.random_unit(rng)
        m = quat.to_matrix(q)
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(m), 1.0, atol=1e-12)
        q2 = quat.from_matrix(m)
        assert np.allclose(q2, q, atol=1e-9) or np.allclose(q2, -q, atol=1e-9)


def test_quaternion_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = quat.random_unit(rng), quat.random_unit(rng)
        assert np.allclose(quat.to_matrix(quat.multiply(a, b)),
                           quat.to_matrix(a) @ quat.to_matrix(b), atol=1e-12)


def test_from_axis_angle_matches_rodrigues():
    rng = np.random.default_rng(2)
    for _ in range(100):
        aa = rng.normal(0, 1, size=3)
        angle = np.linalg.norm(aa)
        axis = aa / angle
        K = np.array([[0, -axis[2], axis[1]],
                      [axis[2], 0, -axis[0]],
                      [-axis[1], axis[0], 0]])
        expected = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
        assert np.allclose(quat.to_matrix(quat.from_axis_angle(aa)), expected, atol=1e-12)


def _tiny_head(num_vertices=10, seed=3):
    rng = np.random.default_rng(seed)
    verts = rng.normal(0, 0.1, size=(num_vertices, 3))
    tris = np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]])
    return verts, tris


def test_jaw_rotation_brute_force_binary_mask():
    verts, _ = _tiny_head()
    joint = np.array([0.0, -0.02, 0.0])
    weight = np.zeros(10)
    weight[:5] = 1.0
    jaw = np.array([0.3, 0.0, 0.0])
    out = jaw_rotate(verts, jaw, joint, weight)
    R = quat_matrix(quat.from_axis_angle(jaw))
    for i in range(10):
        if weight[i] == 1.0:
            assert np.allclose(out[i], R @ (verts[i] - joint) + joint, atol=1e-12)
        else:
            assert np.array_equal(out[i], verts[i])


def test_jaw_rotation_fractional_weight_scales_the_angle():
    verts, _ = _tiny_head()
    joint = np.zeros(3)
    weight = np.full(10, 0.5)
    jaw = np.array([0.0, 0.4, 0.0])
    out = jaw_rotate(verts, jaw, joint, weight)
    R_half = quat_matrix(quat.from_axis_angle(jaw * 0.5))
    assert np.allclose(out, verts @ R_half.T, atol=1e-12)


def test_zero_jaw_is_identity():
    verts, _ = _tiny_head()
    out = jaw_rotate(verts, np.zeros(3), np.zeros(3), np.ones(10))
    assert np.allclose(out, verts, atol=0)


def test_pose_mesh_commutes_with_rigid_motion():
    template, basis = synthetic_head(seed=5)
    rng = np.random.default_rng(6)
    params = HeadParams(shape=rng.normal(0, 0.3, basis.num_shape),
                        expression=rng.normal(0, 0.3, basis.num_expression),
                        jaw=rng.normal(0, 0.1, 3))
    posed = pose_mesh(template, basis, params)
    q = quat.random_unit(rng)
    t = rng.normal(size=3)
    moved = posed.vertices @ quat_matrix(q).T + t
    composed = pose_mesh(template, basis, HeadParams(
        shape=params.shape, expression=params.expression, jaw=params.jaw,
        global_rotation=q, translation=t))
    assert np.allclose(moved, composed.vertices, atol=1e-9)


def test_blendshapes_are_linear_when_jaw_is_zero():
    template, basis = synthetic_head(seed=7)
    rng = np.random.default_rng(8)
    e1 = rng.normal(0, 0.3, basis.num_expression)
    e2 = rng.normal(0, 0.3, basis.num_expression)
    z = np.zeros(basis.num_shape)

    def offset(e):
        p = pose_mesh(template, basis, HeadParams(shape=z, expression=e))
        return p.vertices - template.vertices

    assert np.allclose(offset(e1 + e2), offset(e1) + offset(e2), atol=1e-10)


def test_compute_template_is_the_vertex_mean():
    template, basis = synthetic_head(seed=9)
    rng = np.random.default_rng(10)
    meshes = [Mesh(vertices=template.vertices + rng.normal(0, 0.001, template.vertices.shape),
                   triangles=template.triangles) for _ in range(5)]
    mean = compute_template(meshes)
    expected = np.mean(np.stack([m.vertices for m in meshes]), axis=0)
    assert np.allclose(mean.vertices, expected, atol=1e-12)
    assert np.array_equal(mean.triangles, template.triangles)


def test_synthetic_head_is_seeded_and_well_formed():
    for kind in ("sphere", "box"):
        t1, b1 = synthetic_head(seed=11, kind=kind)
        t2, b2 = synthetic_head(seed=11, kind=kind)
        t3, _ = synthetic_head(seed=12, kind=kind)
        assert np.array_equal(t1.vertices, t2.vertices)
        assert np.array_equal(b1.expression_basis, b2.expression_basis)
        assert not np.array_equal(b1.expression_basis,
                                  synthetic_head(seed=12, kind=kind)[1].expression_basis)
        assert np.all(triangle_areas(t1.vertices, t1.triangles) > 0)
        assert np.all(b1.jaw_weight >= 0) and np.all(b1.jaw_weight <= 1)
        assert t1.vertices.shape[0] >= 4
    tb, _ = synthetic_head(seed=11, kind="box")
    assert tb.num_triangles == 12


def test_template_validation():
    verts, tris = _tiny_head()
    TemplateMesh(vertices=verts, triangles=tris)
    with pytest.raises(ParameterError):
        TemplateMesh(vertices=verts[:3], triangles=np.array([[0, 1, 2]]))
    with pytest.raises(ParameterError):
        TemplateMesh(vertices=verts, triangles=np.array([[0, 1, 99]]))


def test_head_params_validation():
    HeadParams.zeros(4, 4)
    with pytest.raises(ParameterError):
        HeadParams(shape=np.zeros(4), expression=np.zeros(4),
                   global_rotation=np.array([1.0, 1.0, 0.0, 0.0]))
    with pytest.raises(ParameterError):
        HeadParams(shape=np.zeros(4), expression=np.zeros(4),
                   jaw=np.zeros(2))
