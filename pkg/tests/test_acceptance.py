"""End-to-end acceptance suite: one test (or test group) per guarantee the
package makes, with explicit tolerances.  Slower experiments live at the
bottom; the whole file is sized to finish comfortably on a laptop CPU."""

import json
import time

import numpy as np
import pytest

from headsplat import quat, synth
from headsplat.binding import (
    BoundScene, densify, globalize_scene, initialize_binding, prune, recount,
    triangle_frames,
)
from headsplat.cli import main as cli_main
from headsplat.fitter import FitConfig, TrainingFrame, fit
from headsplat.gaussian_scene import covariance
from headsplat.head_model import HeadParams, Mesh, pose_mesh, synthetic_head
from headsplat.rasterizer import psnr, render, render_backward
from headsplat.stability import (
    KeypointTrajectory, stability_score, track_centroid,
)

from helpers import frontal_camera, naive_render, random_scene


# ---------------------------------------------------------------------------
# 1. Covariance property suite, 10,000 randomized cases in under 10 s.


def test_covariance_properties_10000_cases():
    rng = np.random.default_rng(42)
    start = time.monotonic()
    for _ in range(10_000):
        scale = np.exp(rng.normal(0.0, 1.0, size=3))
        q = quat.random_unit(rng)
        cov = covariance(scale, q)
        assert np.abs(cov - cov.T).max() < 1e-12 * np.abs(cov).max()
        eig = np.linalg.eigvalsh(cov)
        assert eig.min() > 0.0  # positive definite
        # eigenvalues are the squared scales, in some order; absolute
        # eigensolver error scales with the largest eigenvalue
        assert np.allclose(np.sort(eig), np.sort(scale**2),
                           rtol=1e-7, atol=1e-12 * eig.max())
        # rotating the primitive conjugates its covariance
        r = quat.random_unit(rng)
        rm = quat.to_matrix(r)
        rotated = covariance(scale, quat.multiply(r, q))
        assert np.allclose(rotated, rm @ cov @ rm.T, atol=1e-12)
    assert time.monotonic() - start < 10.0


# ---------------------------------------------------------------------------
# 2. Tiled renderer vs a naive per-pixel sort-and-blend oracle:
#    100 random scenes, up to 64 Gaussians, 32 x 32, within 1e-6 per channel.


def test_renderer_matches_naive_oracle_on_100_scenes():
    rng = np.random.default_rng(7)
    cam = frontal_camera(width=32, height=32)
    start = time.monotonic()
    worst = 0.0
    for case in range(100):
        n = int(rng.integers(1, 65))
        sh_degree = int(rng.integers(0, 4))
        scene = random_scene(rng, n, sh_degree=sh_degree)
        background = rng.uniform(0.0, 1.0, size=3)
        fast = render(scene, cam, background=background)
        slow = naive_render(scene, cam, background=background)
        err = np.abs(fast.rgba - slow).max()
        worst = max(worst, err)
        assert err < 1e-6, f"case {case}: max channel error {err:.3e}"
    assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# 3. Every exposed gradient matches central finite differences within 1e-3
#    relative error on small configurations.


def _render_scalar(scene, cam, background, dL):
    img = render(scene, cam, background=background)
    return float(np.sum(img.rgba * dL))


def _fd_check(get, set_, analytic, scene, cam, background, dL, eps=1e-6):
    base = get()
    flat = base.reshape(-1)
    ana = np.asarray(analytic).reshape(-1)
    for i in range(flat.size):
        for sign, store in ((+1, "up"), (-1, "dn")):
            pert = flat.copy()
            pert[i] += sign * eps
            set_(pert.reshape(base.shape))
            if store == "up":
                up = _render_scalar(scene, cam, background, dL)
            else:
                dn = _render_scalar(scene, cam, background, dL)
        set_(base)
        fd = (up - dn) / (2 * eps)
        if abs(fd) < 1e-7 and abs(ana[i]) < 1e-7:
            continue
        rel = abs(fd - ana[i]) / max(abs(fd), abs(ana[i]))
        assert rel < 1e-3, f"coordinate {i}: fd {fd:.6g} vs grad {ana[i]:.6g}"


def test_rasterizer_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    cam = frontal_camera(width=12, height=10, fx=16.0)
    scene = random_scene(rng, 3, sh_degree=1, spread=0.15)
    background = np.array([0.2, 0.1, 0.3])
    dL = rng.normal(size=(10, 12, 4))
    _, grads = render_backward(scene, cam, background, dL)

    for k, g in enumerate(scene):
        _fd_check(lambda: g.mu, lambda v: setattr(g, "mu", v),
                  grads.d_mu[k], scene, cam, background, dL)
        _fd_check(lambda: g.scale, lambda v: setattr(g, "scale", v),
                  grads.d_scale[k], scene, cam, background, dL)
        _fd_check(lambda: g.rotation, lambda v: setattr(g, "rotation", v),
                  grads.d_rotation[k], scene, cam, background, dL)
        _fd_check(lambda: np.array([g.opacity]),
                  lambda v: setattr(g, "opacity", float(v[0])),
                  [grads.d_opacity[k]], scene, cam, background, dL)
        _fd_check(lambda: g.sh, lambda v: setattr(g, "sh", v),
                  grads.d_sh[k], scene, cam, background, dL)


def test_audio2param_gradients_match_finite_differences():
    import torch
    from headsplat.audio2param import (
        A2PConfig, A2PWeights, jaw_isolated_gt, vertex_loss, PredictedMotion,
    )
    from headsplat.torchcore import t64

    template, basis = synthetic_head(seed=0, kind="box")
    gt = synth.motion_from_features(
        synth.synthetic_features(4, audio_dim=6, seed=0),
        num_expression=basis.num_expression, num_shape=basis.num_shape)
    gt_meshes = jaw_isolated_gt(gt, template, basis)
    rng = np.random.default_rng(1)
    pred = PredictedMotion(jaw=rng.normal(0, 0.05, size=(4, 3)),
                           expression=rng.normal(0, 0.2, size=(4, basis.num_expression)))
    loss0, (d_jaw, d_expr) = vertex_loss(pred, gt_meshes, template, basis)
    eps = 1e-6

    def eval_loss(jaw, expr):
        val, _ = vertex_loss(PredictedMotion(jaw=jaw, expression=expr),
                             gt_meshes, template, basis)
        return val

    for arr, grad in ((pred.jaw, d_jaw), (pred.expression, d_expr)):
        flat = arr.reshape(-1)
        g = grad.reshape(-1)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += eps
            dn[i] -= eps
            lu = eval_loss(up.reshape(arr.shape) if arr is pred.jaw else pred.jaw,
                           up.reshape(arr.shape) if arr is pred.expression else pred.expression)
            ld = eval_loss(dn.reshape(arr.shape) if arr is pred.jaw else pred.jaw,
                           dn.reshape(arr.shape) if arr is pred.expression else pred.expression)
            fd = (lu - ld) / (2 * eps)
            rel = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8)
            assert rel < 1e-3

    # The transformer itself: torch's double-precision gradcheck compares
    # every input and weight gradient against central differences.
    config = A2PConfig(audio_dim=4, model_dim=8, layers=1, heads=2, period=7,
                       num_expression=3, num_vertices=template.num_vertices)
    weights = A2PWeights.initialize(config, seed=2)
    model = weights.build_model()
    feats = t64(np.random.default_rng(3).normal(size=(3, 4))).requires_grad_(True)
    tv = t64(template.vertices)
    mh = t64(weights.mean_head)
    assert torch.autograd.gradcheck(lambda f: model(f, tv, mh), (feats,),
                                    eps=1e-6, atol=1e-5, rtol=1e-3)
    params = dict(model.named_parameters())
    names = ["motion_out.weight", "audio_proj.bias", "style_fc1.weight"]

    def with_weights(*tensors):
        return torch.func.functional_call(
            model, dict(zip(names, tensors)), (feats.detach(), tv, mh))

    inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
    assert torch.autograd.gradcheck(with_weights, inputs,
                                    eps=1e-6, atol=1e-5, rtol=1e-3)


# ---------------------------------------------------------------------------
# 4. The per-triangle floor survives 1,000 random densify/prune cycles, and
#    globalization is rigid-equivariant to 1e-9.


def test_densify_prune_floor_holds_for_1000_cycles():
    template, basis = synthetic_head(seed=0, kind="box")
    mesh = pose_mesh(template, basis,
                     HeadParams.zeros(basis.num_shape, basis.num_expression))
    rng = np.random.default_rng(0)
    scene = synth.textured_binding(template, basis, seed=0)
    num_tris = len(scene.per_triangle_count)
    start = time.monotonic()
    for _ in range(1000):
        grads = rng.exponential(1e-4, size=len(scene.bound))
        scene = densify(scene, grads, tau_grad=2e-4,
                        size_split=float(rng.uniform(0.05, 0.4)), rng=rng)
        scene = prune(scene, alpha_min=float(rng.uniform(0.5, 0.98)))
        assert scene.per_triangle_count.min() >= 1
        assert scene.per_triangle_count.sum() == len(scene.bound)
    # the population stays bounded rather than growing without limit
    assert len(scene.bound) < 100 * num_tris
    assert time.monotonic() - start < 30.0


def test_globalization_is_rigid_equivariant():
    template, basis = synthetic_head(seed=3, kind="box")
    mesh = pose_mesh(template, basis,
                     HeadParams.zeros(basis.num_shape, basis.num_expression))
    scene = synth.textured_binding(template, basis, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        r = quat.to_matrix(quat.random_unit(rng))
        t = rng.normal(0, 0.5, size=3)
        moved = Mesh(vertices=mesh.vertices @ r.T + t, triangles=mesh.triangles)
        a = globalize_scene(scene, triangle_frames(moved))
        b = globalize_scene(scene, triangle_frames(mesh))
        for ga, gb in zip(a, b):
            assert np.abs(ga.mu - (r @ gb.mu + t)).max() < 1e-9
            assert np.abs(ga.scale - gb.scale).max() < 1e-9
            ra = quat.to_matrix(ga.rotation)
            rb = quat.to_matrix(gb.rotation)
            assert np.abs(ra - r @ rb).max() < 1e-9


# ---------------------------------------------------------------------------
# 8. Stability metric: exact zeros on identical trajectories, monotonicity
#    over a wobble family, Parseval, and the compound-score arithmetic.


def _wobble_family_member(amplitude, num_frames=48):
    t = np.arange(num_frames, dtype=np.float64)
    base = np.stack([32.0 + 0.25 * t,
                     32.0 + 2.0 * np.sin(2 * np.pi * t / num_frames)], axis=1)
    gen = base.copy()
    gen[:, 1] += amplitude * np.sin(2 * np.pi * 0.45 * t)
    return (KeypointTrajectory(points=gen[:, None, :]),
            KeypointTrajectory(points=base[:, None, :]))


def test_stability_metric_acceptance():
    start = time.monotonic()
    gen, gt = _wobble_family_member(2.0)

    # identical trajectories: exactly zero motion terms
    report = stability_score(gen, gen)
    assert report.m_d == 0.0
    assert report.v_m == 0.0

    # strict monotonicity over the wobble amplitudes
    scores = []
    for a in (0.0, 1.0, 2.0, 4.0):
        g, ref = _wobble_family_member(a)
        scores.append(stability_score(g, ref).score)
    assert all(s0 < s1 for s0, s1 in zip(scores, scores[1:])), scores

    # Parseval: total spectral power equals N times the signal energy
    rng = np.random.default_rng(5)
    for _ in range(50):
        x = rng.normal(size=128)
        lhs = np.sum(np.abs(np.fft.fft(x)) ** 2)
        rhs = 128 * np.sum(x**2)
        assert abs(lhs - rhs) <= 1e-9 * rhs

    # compound score is the arithmetic mean of its three components
    assert report.score == pytest.approx((report.m_d + report.v_m + report.h_f) / 3,
                                         abs=1e-15)
    assert (0.3 + 0.6 + 0.9) / 3 == pytest.approx(0.6, abs=1e-15)
    assert time.monotonic() - start < 5.0


# ---------------------------------------------------------------------------
# 5. Self-reconstruction: a 20-Gaussian ground truth seen from 8 views is
#    recovered to PSNR > 35 dB on every view, identically for any thread
#    count.


def _twenty_splat_ground_truth(seed=0):
    rng = np.random.default_rng(seed)
    template, basis = synthetic_head(seed=seed, kind="box")
    bound = synth.textured_binding(template, basis, seed=seed)  # 12 splats
    extra = []
    for i in range(8):
        b = bound.bound[i].copy()
        b.local_mu = b.local_mu + rng.normal(0, 0.12, size=3)
        b.sh = b.sh + rng.normal(0, 0.25, size=b.sh.shape)
        b.opacity = float(np.clip(b.opacity + rng.normal(0, 0.1), 0.3, 0.95))
        extra.append(b)
    splats = bound.bound + extra
    gt = BoundScene(bound=splats, per_triangle_count=recount(splats, 12),
                    sh_degree=0)
    return template, basis, gt


def _self_recon_problem():
    template, basis, gt = _twenty_splat_ground_truth(seed=0)
    cams = synth.camera_ring(num_views=8, width=64, height=64)
    params = HeadParams.zeros(basis.num_shape, basis.num_expression)
    mesh = pose_mesh(template, basis, params)
    targets = [render(globalize_scene(gt, triangle_frames(mesh)), c)
               for c in cams]
    frames = [TrainingFrame(target=t, camera=c, params=params)
              for t, c in zip(targets, cams)]
    start = synth.perturb_binding(gt, seed=10, amount=0.25)
    return template, basis, mesh, cams, targets, frames, start


@pytest.mark.slow
def test_self_reconstruction_exceeds_35db_on_every_view():
    template, basis, mesh, cams, targets, frames, start = _self_recon_problem()
    assert len(start.bound) == 20
    config = FitConfig(iterations=150, densify_start=10**9,
                       optimize_head_params=False, seed=0)
    result = fit(frames, template, basis, config, scene=start)
    out = globalize_scene(result.scene, triangle_frames(mesh))
    values = [psnr(render(out, c), t) for c, t in zip(cams, targets)]
    assert min(values) > 35.0, values


@pytest.mark.slow
def test_self_reconstruction_is_thread_count_invariant():
    template, basis, mesh, cams, targets, frames, start = _self_recon_problem()
    scenes = []
    for threads in (1, 8):
        config = FitConfig(iterations=20, densify_start=10**9,
                           optimize_head_params=False, seed=0, threads=threads)
        result = fit(frames, template, basis, config, scene=start)
        scenes.append(result.scene)
    a, b = scenes
    assert result.loss_curve  # both runs actually did work
    for ga, gb in zip(a.bound, b.bound):
        assert np.array_equal(ga.local_mu, gb.local_mu)
        assert np.array_equal(ga.local_scale, gb.local_scale)
        assert np.array_equal(ga.local_rotation, gb.local_rotation)
        assert ga.opacity == gb.opacity
        assert np.array_equal(ga.sh, gb.sh)


# ---------------------------------------------------------------------------
# 6. Ablation direction: with mis-tracked (jittered) head parameters,
#    disabling head-parameter optimization must give a strictly worse final
#    photometric loss AND a strictly worse stability score of the tracked
#    keypoint trajectory.  Direction only, no magnitudes.


@pytest.mark.slow
def test_head_param_optimization_improves_mistracked_fits():
    num_frames = 8
    template, basis = synthetic_head(num_shape=2, num_expression=3,
                                     seed=0, kind="box")
    gt_bound = synth.textured_binding(template, basis, seed=0)
    cam = synth.camera_ring(num_views=1, width=32, height=32)[0]

    trues = []
    for t in range(num_frames):
        p = HeadParams.zeros(basis.num_shape, basis.num_expression)
        p.translation = np.array([0.02 * np.sin(2 * np.pi * t / num_frames),
                                  0.0, 0.0])
        trues.append(p)
    targets = []
    for p in trues:
        mesh = pose_mesh(template, basis, p)
        targets.append(render(globalize_scene(gt_bound, triangle_frames(mesh)),
                              cam))

    # what the fitter is told: the true motion plus alternating jitter
    jittered = []
    for t, p in enumerate(trues):
        q = HeadParams.zeros(basis.num_shape, basis.num_expression)
        q.translation = p.translation + np.array([0.008 * (-1) ** t,
                                                  0.004 * (-1) ** t, 0.0])
        jittered.append(q)
    frames = [TrainingFrame(target=img, camera=cam, params=q)
              for img, q in zip(targets, jittered)]
    start = synth.perturb_binding(gt_bound, seed=2, amount=0.4)
    roi = (8, 8, 16, 16)

    outcomes = {}
    for optimize in (True, False):
        config = FitConfig(iterations=150, densify_start=10**9,
                           optimize_head_params=optimize, seed=0)
        result = fit(frames, template, basis, config, scene=start)
        rendered = []
        for p in result.head_params:
            mesh = pose_mesh(template, basis, p)
            rendered.append(render(
                globalize_scene(result.scene, triangle_frames(mesh)), cam))
        report = stability_score(track_centroid(rendered, roi),
                                 track_centroid(targets, roi))
        outcomes[optimize] = (result.loss_curve[-1][3], report.score)

    assert outcomes[True][0] < outcomes[False][0], outcomes
    assert outcomes[True][1] < outcomes[False][1], outcomes


# ---------------------------------------------------------------------------
# 7. Audio-to-parameter overfit: on a 100-frame synthetic sequence the
#    vertex loss drops below 1% of its initial value at learning rate 1e-4,
#    and predictions are causal to 1e-9.


@pytest.mark.slow
def test_audio2param_overfits_100_frame_sequence():
    from headsplat.audio2param import (
        A2PConfig, A2PTrainConfig, A2PTrainItem, AudioFeatureSequence,
        PredictedMotion, jaw_isolated_gt, predict, train, vertex_loss,
    )

    template, basis = synthetic_head(seed=0, kind="box")
    features = synth.synthetic_features(100, audio_dim=16, seed=0)
    gt = synth.motion_from_features(features,
                                    num_expression=basis.num_expression,
                                    num_shape=basis.num_shape, seed=1,
                                    jaw_gain=0.05)
    config = A2PConfig(audio_dim=16, model_dim=32, layers=2, heads=2,
                       period=100, num_expression=basis.num_expression,
                       num_vertices=template.num_vertices)
    item = A2PTrainItem(audio=features, gt_params=gt,
                        template=template, basis=basis)
    weights, curve = train([item],
                           A2PTrainConfig(steps=3200, learning_rate=1e-4,
                                          seed=0),
                           model_config=config)
    assert len(curve) == 3200
    assert curve[-1] < 0.01 * curve[0], (curve[0], curve[-1])

    # sanity: the bar cannot be cleared by predicting no motion at all
    gt_meshes = jaw_isolated_gt(gt, template, basis)
    zeros = PredictedMotion(jaw=np.zeros((100, 3)),
                            expression=np.zeros((100, basis.num_expression)))
    zero_loss, _ = vertex_loss(zeros, gt_meshes, template, basis)
    assert zero_loss > 0.01 * curve[0]

    # causality: rewriting the future never changes the past
    base = predict(features, template, weights)
    tampered = features.features.copy()
    tampered[60:] += 100.0
    alt = predict(AudioFeatureSequence(features=tampered,
                                       frame_rate=features.frame_rate),
                  template, weights)
    assert np.abs(base.jaw[:60] - alt.jaw[:60]).max() < 1e-9
    assert np.abs(base.expression[:60] - alt.expression[:60]).max() < 1e-9


# ---------------------------------------------------------------------------
# 9. End-to-end pipeline through the command line: synthesize an identity,
#    fit an avatar, train the audio model, animate, and score stability.
#    Every stage exits 0 and the final report is finite.


@pytest.mark.slow
def test_cli_pipeline_end_to_end(tmp_path):
    data = tmp_path / "identity"
    steps = [
        ["synth", "--case", "identity", "--out", str(data),
         "--views", "4", "--image-size", "32", "--num-frames", "10",
         "--audio-dim", "8", "--head-kind", "box"],
        ["fit", "--frames", str(data / "frames"),
         "--template", str(data / "template.obj"),
         "--basis", str(data / "basis.bin"),
         "--out", str(tmp_path / "avatar.ply"),
         "--iterations", "60", "--densify-start", "1000000"],
        ["train-a2p", "--features", str(data / "features.bin"),
         "--gt-params", str(data / "gt_params.bin"),
         "--template", str(data / "template.obj"),
         "--basis", str(data / "basis.bin"),
         "--out", str(tmp_path / "weights.bin"),
         "--steps", "120", "--model-dim", "16", "--layers", "1",
         "--heads", "2"],
        ["animate", "--weights", str(tmp_path / "weights.bin"),
         "--avatar", str(tmp_path / "avatar.ply"),
         "--audio-features", str(data / "features.bin"),
         "--ref-motion", str(data / "ref_motion.bin"),
         "--camera", str(data / "camera.json"),
         "--out", str(tmp_path / "anim")],
        ["stability", "--gen-frames", str(tmp_path / "anim"),
         "--roi", "4,4,24,24", "--no-gt",
         "--out", str(tmp_path / "report.json")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv[0]

    assert len(list((tmp_path / "anim").glob("frame_*.png"))) == 10
    report = json.loads((tmp_path / "report.json").read_text())
    for key in ("M_d", "V_m", "H_f", "score"):
        assert np.isfinite(report[key]), report
    assert report["reference"] == "self-smoothed"
