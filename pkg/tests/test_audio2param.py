import numpy as np
import pytest

from headsplat.audio2param import (
    A2PConfig, A2PTrainConfig, A2PTrainItem, A2PWeights, AudioFeatureSequence,
    PredictedMotion, StyleEmbedding, alignment_mask, animate, combine_style,
    jaw_isolated_gt, ppe, ppe_table, predict, style_encode, train, vertex_loss,
)
from headsplat.binding import initialize_binding
from headsplat.errors import ParameterError, StateError
from headsplat.head_model import HeadParams, pose_mesh, synthetic_head
from headsplat import synth


def small_setup(num_frames=20, seed=0):
    template, basis = synthetic_head(seed=seed, kind="box")
    config = A2PConfig(audio_dim=12, model_dim=32, layers=2, heads=2,
                       period=30, num_expression=basis.num_expression,
                       num_vertices=template.num_vertices)
    features = synth.synthetic_features(num_frames, audio_dim=12, seed=seed)
    gt = synth.motion_from_features(features, num_expression=basis.num_expression,
                                    num_shape=basis.num_shape, seed=seed + 1)
    return template, basis, config, features, gt


def test_ppe_is_periodic_and_bounded():
    v3 = ppe(3, model_dim=32, period=30)
    assert v3.shape == (32,)
    assert np.array_equal(v3, ppe(33, model_dim=32, period=30))
    assert np.array_equal(v3, ppe(63, model_dim=32, period=30))
    assert np.all(np.abs(v3) <= 1.0)
    # Distinct phases within one period.
    assert not np.array_equal(v3, ppe(4, model_dim=32, period=30))
    table = ppe_table(65, model_dim=32, period=30)
    assert table.shape == (65, 32)
    assert np.array_equal(table[3], v3)


def test_alignment_mask_is_strictly_causal():
    m = alignment_mask(6)
    assert m.shape == (6, 6)
    assert m.dtype == bool
    assert np.array_equal(m, np.tril(np.ones((6, 6), dtype=bool)))


def test_combine_style_adds_the_embedding_to_every_frame():
    rng = np.random.default_rng(0)
    latents = rng.normal(size=(7, 16))
    style = StyleEmbedding(vector=rng.normal(size=16))
    out = combine_style(latents, style)
    assert np.allclose(out, latents + style.vector, atol=0)


def test_predictions_are_causal():
    template, basis, config, features, _ = small_setup()
    weights = A2PWeights.initialize(config, seed=1)
    base = predict(features, template, weights)
    tampered = features.features.copy()
    tampered[12:] += 10.0  # rewrite the future
    alt = predict(AudioFeatureSequence(features=tampered,
                                       frame_rate=features.frame_rate),
                  template, weights)
    assert np.abs(base.jaw[:12] - alt.jaw[:12]).max() < 1e-9
    assert np.abs(base.expression[:12] - alt.expression[:12]).max() < 1e-9
    assert np.abs(base.jaw[12:] - alt.jaw[12:]).max() > 0


def test_style_embedding_shifts_the_output():
    template, basis, config, features, _ = small_setup()
    weights = A2PWeights.initialize(config, seed=2)
    s = style_encode(template, weights)
    assert s.vector.shape == (config.model_dim,)
    # A different identity (scaled template) produces different motion.
    from headsplat.head_model import TemplateMesh
    other = TemplateMesh(vertices=template.vertices * 1.2,
                         triangles=template.triangles)
    a = predict(features, template, weights)
    b = predict(features, other, weights)
    assert np.abs(a.jaw - b.jaw).max() > 0


def test_predicted_motion_is_bounded_by_the_output_activation():
    template, basis, config, features, _ = small_setup()
    weights = A2PWeights.initialize(config, seed=3)
    out = predict(features, template, weights)
    # The decoder reads a tanh-saturated latent, so outputs stay finite
    # and within the affine image of [-1, 1].
    w = weights.tensors["motion_out.weight"]
    b = weights.tensors["motion_out.bias"]
    bound = np.abs(w).sum(axis=1) + np.abs(b)
    assert np.all(np.abs(out.jaw) <= bound[:3][None, :] + 1e-12)
    assert np.all(np.abs(out.expression) <= bound[3:][None, :] + 1e-12)


def test_jaw_isolated_gt_ignores_everything_but_the_jaw():
    template, basis, _, _, gt = small_setup()
    noisy = [HeadParams(shape=np.ones(basis.num_shape),
                        expression=np.full(basis.num_expression, 0.5),
                        jaw=p.jaw, translation=np.array([1.0, 2.0, 3.0]))
             for p in gt]
    a = jaw_isolated_gt(gt, template, basis)
    b = jaw_isolated_gt(noisy, template, basis)
    for ma, mb in zip(a, b):
        assert np.allclose(ma.vertices, mb.vertices, atol=1e-12)


def test_vertex_loss_matches_per_frame_frobenius_sums():
    template, basis, _, _, gt = small_setup(num_frames=6)
    rng = np.random.default_rng(4)
    pred = PredictedMotion(jaw=rng.normal(0, 0.05, size=(6, 3)),
                           expression=rng.normal(0, 0.2, size=(6, basis.num_expression)))
    gt_meshes = jaw_isolated_gt(gt, template, basis)
    loss, (d_jaw, d_expr) = vertex_loss(pred, gt_meshes, template, basis)

    expected = 0.0
    for t in range(6):
        p = HeadParams(shape=np.zeros(basis.num_shape),
                       expression=pred.expression[t], jaw=pred.jaw[t])
        mesh = pose_mesh(template, basis, p)
        expected += np.linalg.norm(gt_meshes[t].vertices - mesh.vertices)
    assert loss == pytest.approx(expected, rel=1e-10)

    # Central finite differences on a few coordinates.
    eps = 1e-6
    for (t, j) in [(0, 0), (3, 2)]:
        up = pred.jaw.copy(); up[t, j] += eps
        dn = pred.jaw.copy(); dn[t, j] -= eps
        lu, _ = vertex_loss(PredictedMotion(jaw=up, expression=pred.expression),
                            gt_meshes, template, basis)
        ld, _ = vertex_loss(PredictedMotion(jaw=dn, expression=pred.expression),
                            gt_meshes, template, basis)
        fd = (lu - ld) / (2 * eps)
        assert abs(fd - d_jaw[t, j]) / max(abs(fd), 1e-8) < 1e-3
    for (t, j) in [(1, 0), (5, 7)]:
        up = pred.expression.copy(); up[t, j] += eps
        dn = pred.expression.copy(); dn[t, j] -= eps
        lu, _ = vertex_loss(PredictedMotion(jaw=pred.jaw, expression=up),
                            gt_meshes, template, basis)
        ld, _ = vertex_loss(PredictedMotion(jaw=pred.jaw, expression=dn),
                            gt_meshes, template, basis)
        fd = (lu - ld) / (2 * eps)
        assert abs(fd - d_expr[t, j]) / max(abs(fd), 1e-8) < 1e-3


def test_training_reduces_the_vertex_loss():
    template, basis, config, features, gt = small_setup(num_frames=16, seed=5)
    item = A2PTrainItem(audio=features, gt_params=gt, template=template, basis=basis)
    weights, curve = train([item], A2PTrainConfig(steps=80, seed=0),
                           model_config=config)
    assert weights.trained
    assert curve[-1] < curve[0]


def test_zero_training_steps_keeps_the_weights():
    template, basis, config, features, gt = small_setup(num_frames=8, seed=6)
    init = A2PWeights.initialize(config, seed=7)
    item = A2PTrainItem(audio=features, gt_params=gt, template=template, basis=basis)
    out, curve = train([item], A2PTrainConfig(steps=0), weights=init)
    for k in init.tensors:
        assert np.array_equal(out.tensors[k], init.tensors[k])


def test_weight_shape_mismatch_is_rejected():
    template, basis, config, features, _ = small_setup()
    wrong = A2PConfig(audio_dim=13, model_dim=32, layers=2, heads=2,
                      period=30, num_expression=basis.num_expression,
                      num_vertices=template.num_vertices)
    weights = A2PWeights.initialize(wrong, seed=0)
    with pytest.raises(ParameterError):
        predict(features, template, weights)


def test_animate_requires_trained_weights():
    template, basis, config, features, _ = small_setup(num_frames=4)
    weights = A2PWeights.initialize(config, seed=0)
    mesh = pose_mesh(template, basis,
                     HeadParams.zeros(basis.num_shape, basis.num_expression))
    avatar = initialize_binding(mesh)
    cam = synth.camera_ring(num_views=1, width=24, height=24)[0]
    ref = synth.reference_motion(4, num_shape=basis.num_shape,
                                 num_expression=basis.num_expression)
    with pytest.raises(StateError):
        animate(features, template, basis, avatar, weights, ref, cam)


def test_lip_only_differs_exactly_in_pose_and_expression_channels():
    template, basis, config, features, gt = small_setup(num_frames=6, seed=8)
    item = A2PTrainItem(audio=features, gt_params=gt, template=template, basis=basis)
    weights, _ = train([item], A2PTrainConfig(steps=5), model_config=config)
    mesh = pose_mesh(template, basis,
                     HeadParams.zeros(basis.num_shape, basis.num_expression))
    avatar = initialize_binding(mesh)
    cam = synth.camera_ring(num_views=1, width=24, height=24)[0]
    ref = synth.reference_motion(6, num_shape=basis.num_shape,
                                 num_expression=basis.num_expression, seed=9)
    _, full = animate(features, template, basis, avatar, weights, ref, cam)
    _, lip = animate(features, template, basis, avatar, weights, ref, cam,
                     lip_only=True)
    for t in range(6):
        # Same audio-driven jaw either way.
        assert np.array_equal(full[t].jaw, lip[t].jaw)
        # Expression suppressed, head pose frozen at the first frame.
        assert np.all(lip[t].expression == 0.0)
        assert np.array_equal(lip[t].global_rotation, ref[0].global_rotation)
        assert np.array_equal(lip[t].translation, ref[0].translation)
        assert np.array_equal(full[t].global_rotation, ref[t].global_rotation)
