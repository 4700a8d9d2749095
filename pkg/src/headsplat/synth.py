"""Seeded synthetic data: heads, avatars, camera rigs, audio features,
motion sequences, and moving-blob test clips.

Everything here is deterministic given its seed so the test suite and the
`synth` CLI subcommand need no external assets.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import quat
from .audio2param import AudioFeatureSequence
from .binding import BoundScene, globalize_scene, initialize_binding, triangle_frames
from .errors import ParameterError
from .gaussian_scene import Scene
from .head_model import BlendshapeBasis, HeadParams, TemplateMesh, pose_mesh, synthetic_head
from .rasterizer import Camera, Image, look_at_camera, render
from .stability import KeypointTrajectory


def synthetic_features(num_frames: int, audio_dim: int = 29,
                       frame_rate: float = 25.0, seed: int = 0) -> AudioFeatureSequence:
    """Band-limited filterbank energies of a seeded waveform.

    A multi-tone waveform is synthesized at 16 kHz, cut into one window
    per output frame, and reduced to log energies of `audio_dim` equal
    spectral bands. This mimics the shape of learned speech features
    without any pretrained model.
    """
    if num_frames < 1 or audio_dim < 1:
        raise ParameterError("num_frames and audio_dim must be positive")
    rng = np.random.default_rng(seed)
    sample_rate = 16000
    window = int(round(sample_rate / frame_rate))
    n = num_frames * window
    t = np.arange(n) / sample_rate
    wave = np.zeros(n)
    for _ in range(12):
        freq = rng.uniform(60.0, 4000.0)
        amp = rng.uniform(0.2, 1.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        # Slow seeded amplitude envelope so band energies move over time.
        env = 1.0 + 0.8 * np.sin(2.0 * np.pi * rng.uniform(0.3, 2.0) * t
                                 + rng.uniform(0.0, 2.0 * np.pi))
        wave += amp * env * np.sin(2.0 * np.pi * freq * t + phase)
    frames = wave.reshape(num_frames, window)
    spec = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    bands = np.array_split(np.arange(spec.shape[1]), audio_dim)
    energy = np.stack([spec[:, b].sum(axis=1) for b in bands], axis=1)
    feats = np.log1p(energy)
    feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-8)
    return AudioFeatureSequence(features=feats, frame_rate=frame_rate)


def _smooth(x: np.ndarray, width: int = 5) -> np.ndarray:
    kernel = np.ones(width) / width
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        out[:, j] = np.convolve(np.pad(x[:, j], width, mode="edge"),
                                kernel, mode="same")[width:-width]
    return out


def motion_from_features(features: AudioFeatureSequence, num_expression: int,
                         seed: int = 0, jaw_gain: float = 0.15,
                         expression_gain: float = 0.5,
                         num_shape: int = 16) -> List[HeadParams]:
    """Ground-truth jaw/expression sequence as a fixed seeded readout of
    the audio features, smoothed over frames. Causal and learnable."""
    rng = np.random.default_rng(seed)
    feats = features.features
    w_jaw = rng.normal(scale=1.0 / np.sqrt(feats.shape[1]), size=(feats.shape[1], 3))
    w_expr = rng.normal(scale=1.0 / np.sqrt(feats.shape[1]), size=(feats.shape[1], num_expression))
    jaw = np.tanh(_smooth(feats @ w_jaw)) * jaw_gain
    expr = np.tanh(_smooth(feats @ w_expr)) * expression_gain
    return [HeadParams(shape=np.zeros(num_shape), expression=expr[i],
                       jaw=jaw[i]) for i in range(feats.shape[0])]


def reference_motion(num_frames: int, num_shape: int = 16, num_expression: int = 16,
                     seed: int = 0, swing: float = 0.15,
                     shift: float = 0.01) -> List[HeadParams]:
    """Smooth seeded head pose swings for motion transfer."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_frames) / max(num_frames - 1, 1)
    axes = rng.normal(size=(2, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    f1, f2 = rng.uniform(0.5, 2.0, size=2)
    out = []
    for i in range(num_frames):
        angle = swing * (0.6 * np.sin(2 * np.pi * f1 * t[i])
                         + 0.4 * np.sin(2 * np.pi * f2 * t[i] + 1.0))
        rot = quat.from_axis_angle(axes[0] * angle)
        trans = shift * np.sin(2 * np.pi * f2 * t[i]) * axes[1]
        out.append(HeadParams(shape=np.zeros(num_shape),
                              expression=np.zeros(num_expression),
                              global_rotation=rot, translation=trans))
    return out


def camera_ring(num_views: int = 8, radius: float = 0.45, fx: float = 90.0,
                width: int = 64, height: int = 64,
                elevation: float = 0.12) -> List[Camera]:
    """Cameras on a ring around the origin, all looking at it."""
    cams = []
    for i in range(num_views):
        a = 2.0 * np.pi * i / num_views
        eye = np.array([radius * np.sin(a), elevation * np.sin(2 * a),
                        radius * np.cos(a)])
        cams.append(look_at_camera(eye=eye, target=np.zeros(3),
                                   up=np.array([0.0, 1.0, 0.0]),
                                   fx=fx, fy=fx, width=width, height=height))
    return cams


def textured_binding(template: TemplateMesh, basis: BlendshapeBasis,
                     seed: int = 0, sh_degree: int = 0) -> BoundScene:
    """One splat per triangle with seeded colors, opacities and shapes.

    The default binding is uniform gray; this variant randomizes the
    appearance so reconstruction targets carry signal.
    """
    mesh = pose_mesh(template, basis, HeadParams.zeros(
        basis.shape_basis.shape[2], basis.expression_basis.shape[2]))
    bound = initialize_binding(mesh, sh_degree=sh_degree)
    rng = np.random.default_rng(seed)
    for g in bound.bound:
        g.sh[0] = rng.uniform(-0.4, 1.2, size=3)  # spans dark to saturated
        if g.sh.shape[0] > 1:
            g.sh[1:] = rng.normal(scale=0.08, size=g.sh[1:].shape)
        g.opacity = float(rng.uniform(0.55, 0.95))
        g.local_mu = rng.normal(scale=0.05, size=3)
        g.local_scale = g.local_scale * rng.uniform(0.7, 1.3, size=3)
    return bound


def perturb_binding(bound: BoundScene, seed: int = 0, amount: float = 1.0) -> BoundScene:
    """Degraded copy of a binding, used as a fitting start point."""
    rng = np.random.default_rng(seed)
    out = []
    for g in bound.bound:
        c = g.copy()
        c.local_mu = c.local_mu + amount * rng.normal(scale=0.05, size=3)
        c.local_scale = c.local_scale * np.exp(amount * rng.normal(scale=0.2, size=3))
        c.local_rotation = quat.normalize(
            c.local_rotation + amount * rng.normal(scale=0.05, size=4))
        c.opacity = float(np.clip(c.opacity + amount * rng.normal(scale=0.1), 0.05, 0.95))
        c.sh = c.sh + amount * rng.normal(scale=0.1, size=c.sh.shape)
        out.append(c)
    return BoundScene(bound=out, per_triangle_count=bound.per_triangle_count.copy(),
                      sh_degree=bound.sh_degree)


def render_ground_truth(bound: BoundScene, template: TemplateMesh,
                        basis: BlendshapeBasis, cameras: Sequence[Camera],
                        params: Optional[Sequence[HeadParams]] = None,
                        background=(0.0, 0.0, 0.0)) -> List[Image]:
    """One rendered view per camera; params may vary per view."""
    images = []
    for i, cam in enumerate(cameras):
        p = params[i] if params is not None else HeadParams.zeros(
            basis.shape_basis.shape[2], basis.expression_basis.shape[2])
        mesh = pose_mesh(template, basis, p)
        scene = Scene(gaussians=globalize_scene(bound, triangle_frames(mesh)),
                      sh_degree=bound.sh_degree)
        images.append(render(scene, cam, background=background))
    return images


def blob_clip(num_frames: int = 48, size: int = 64, amplitude: float = 0.0,
              drift: float = 0.25, sway: Optional[float] = None,
              sigma: float = 3.0, seed: int = 0,
              jitter: str = "sinusoidal"
              ) -> Tuple[List[Image], KeypointTrajectory]:
    """A bright Gaussian blob on black, drifting horizontally with a slow
    vertical sway, plus optional vertical jitter of +-amplitude pixels.

    Returns the frames and the smooth ground-truth center trajectory
    (without the jitter). jitter is "alternating" (+a, -a, ...) or
    "sinusoidal" at 0.45 cycles per frame. sway defaults to 6% of the
    frame size; set it to 0 for a pure horizontal drift.
    """
    if size < 16 or num_frames < 4:
        raise ParameterError("clip too small")
    if sway is None:
        sway = 0.06 * size
    cx0 = size * 0.3
    cy0 = size * 0.5
    ys, xs = np.mgrid[0:size, 0:size]
    frames: List[Image] = []
    gt_pts = np.empty((num_frames, 1, 2))
    for t in range(num_frames):
        cx = cx0 + drift * t
        cy = cy0 + sway * np.sin(2.0 * np.pi * t / num_frames)
        gt_pts[t, 0] = (cx + 0.5, cy + 0.5)  # pixel-center convention
        if jitter == "alternating":
            jy = amplitude * (1.0 if t % 2 == 0 else -1.0)
        elif jitter == "sinusoidal":
            jy = amplitude * np.sin(2.0 * np.pi * 0.45 * t)
        else:
            raise ParameterError("jitter must be 'alternating' or 'sinusoidal'")
        g = np.exp(-((xs - cx) ** 2 + (ys - (cy + jy)) ** 2) / (2.0 * sigma ** 2))
        rgba = np.zeros((size, size, 4))
        rgba[:, :, :3] = g[:, :, None]
        rgba[:, :, 3] = g
        frames.append(Image(rgba=rgba, background=np.zeros(3)))
    return frames, KeypointTrajectory(points=gt_pts, fps=25.0)


def identity_bundle(seed: int = 0, kind: str = "sphere", num_frames: int = 48):
    """Everything the end-to-end pipeline needs for one synthetic person.

    Returns (template, basis, bound ground-truth avatar, cameras, audio
    features, ground-truth motion params, reference motion).
    """
    template, basis = synthetic_head(seed=seed, kind=kind)
    bound = textured_binding(template, basis, seed=seed + 1)
    cameras = camera_ring(num_views=8)
    features = synthetic_features(num_frames, seed=seed + 2)
    gt_motion = motion_from_features(
        features, num_expression=basis.expression_basis.shape[2],
        num_shape=basis.shape_basis.shape[2], seed=seed + 3)
    ref_motion = reference_motion(
        num_frames, num_shape=basis.shape_basis.shape[2],
        num_expression=basis.expression_basis.shape[2], seed=seed + 4)
    return template, basis, bound, cameras, features, gt_motion, ref_motion
