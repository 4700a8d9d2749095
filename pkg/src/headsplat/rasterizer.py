"""Deterministic CPU tile rasterizer for 3D Gaussian scenes.

Forward: project each Gaussian to a screen-space 2D Gaussian, globally
depth-sort, alpha-composite front to back per pixel.  Backward: exact
reverse-mode gradients of the forward compositing (torch autograd over the
same kernel), plus the per-Gaussian view-space positional gradient norms
consumed by densification.

Compositing constants (alpha clamp 0.99, per-pixel alpha cutoff and
transmittance stop at 1/255, +0.3*I covariance dilation) are configurable
through RenderSettings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from . import quat, torchcore
from .errors import ParameterError
from .gaussian_scene import GaussianPrimitive, sh_color
from .torchcore import RenderSettings, t64

__all__ = [
    "Camera",
    "Projected2D",
    "Image",
    "RenderSettings",
    "project",
    "render",
    "render_backward",
    "psnr",
]


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, rigid world-to-cam transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # world-to-cam unit quaternion
    translation: np.ndarray  # world-to-cam translation (meters)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = quat.check_unit(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.width <= 0 or self.height <= 0:
            raise ParameterError("viewport must have positive size")
        if self.fx <= 0 or self.fy <= 0:
            raise ParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError("principal point must lie inside the viewport")

    def rotation_matrix(self) -> np.ndarray:
        return quat.to_matrix(self.rotation)

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix().T @ self.translation

    def extrinsic4x4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_extrinsic4x4(cls, fx, fy, cx, cy, extrinsic, width, height) -> "Camera":
        extrinsic = np.asarray(extrinsic, dtype=np.float64)
        return cls(
            fx=fx, fy=fy, cx=cx, cy=cy,
            rotation=quat.from_matrix(extrinsic[:3, :3]),
            translation=extrinsic[:3, 3].copy(),
            width=width, height=height,
        )


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray,
    fx: float,
    fy: float,
    width: int,
    height: int,
) -> Camera:
    """Camera at `eye` looking toward `target` (+z forward, +y down image)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])  # rows: world axes of cam x, y, z
    return Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        rotation=quat.from_matrix(r),
        translation=-r @ eye,
        width=width, height=height,
    )


@dataclass
class Projected2D:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray       # (2,) pixels
    cov2d: np.ndarray        # (2, 2) pixels^2, includes the +0.3*I dilation
    depth: float             # cam-space z, meters
    color: np.ndarray        # (3,) view-dependent RGB (unclamped)
    base_opacity: float


@dataclass
class Image:
    """RGBA raster in [0, 1] with the background it was composed over."""

    rgba: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.rgba = np.asarray(self.rgba, dtype=np.float64)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise ParameterError("rgba must be H x W x 4")
        if not np.all(np.isfinite(self.rgba)):
            raise ParameterError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    def rgb(self) -> np.ndarray:
        return self.rgba[:, :, :3]


def _scene_tensors(scene: Sequence[GaussianPrimitive]):
    mu = t64(np.stack([g.mu for g in scene]))
    scale = t64(np.stack([g.scale for g in scene]))
    quats = t64(np.stack([g.rotation for g in scene]))
    opacity = t64(np.array([g.opacity for g in scene]))
    sh = t64(np.stack([g.sh for g in scene]))
    return mu, scale, quats, opacity, sh


def project(
    g: GaussianPrimitive,
    cam: Camera,
    settings: RenderSettings = torchcore.DEFAULT_SETTINGS,
) -> Optional[Projected2D]:
    """Screen-space 2D Gaussian for one splat, or None when culled."""
    mu = t64(g.mu[None])
    rot = torchcore.quat_to_mat_t(t64(g.rotation[None]))
    scale = t64(g.scale[None])
    mean2d, cov2d, depth, _, valid = torchcore.project_t(
        mu, rot, scale,
        t64(cam.rotation_matrix()), t64(cam.translation),
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
        settings,
    )
    if not bool(valid[0]):
        return None
    view_dir = g.mu - cam.center()
    view_dir = view_dir / np.linalg.norm(view_dir)
    return Projected2D(
        mean2d=mean2d[0].numpy(),
        cov2d=cov2d[0].numpy(),
        depth=float(depth[0]),
        color=sh_color(g.sh, view_dir),
        base_opacity=g.opacity,
    )


def render(
    scene: Sequence[GaussianPrimitive],
    cam: Camera,
    background: np.ndarray = (0.0, 0.0, 0.0),
    settings: RenderSettings = torchcore.DEFAULT_SETTINGS,
) -> Image:
    """Forward render; deterministic for any input-list permutation."""
    background = np.asarray(background, dtype=np.float64)
    if len(scene) == 0:
        rgba = np.zeros((cam.height, cam.width, 4))
        rgba[:, :, :3] = background
        return Image(rgba=rgba, background=background)
    mu, scale, quats, opacity, sh = _scene_tensors(scene)
    with torch.no_grad():
        img, _ = torchcore.render_t(
            mu, torchcore.quat_to_mat_t(quats), scale, opacity, sh,
            t64(cam.rotation_matrix()), t64(cam.translation),
            cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
            t64(background), settings,
        )
    return Image(rgba=img.numpy(), background=background)


@dataclass
class SceneGradients:
    """Per-Gaussian gradients from render_backward."""

    d_mu: np.ndarray         # (N, 3)
    d_scale: np.ndarray      # (N, 3)
    d_rotation: np.ndarray   # (N, 4)
    d_opacity: np.ndarray    # (N,)
    d_sh: np.ndarray         # (N, C, 3)
    viewspace_grad_norms: np.ndarray  # (N,) |dL/d mean2d|


def render_backward(
    scene: Sequence[GaussianPrimitive],
    cam: Camera,
    background: np.ndarray,
    dL_dImage: np.ndarray,
    settings: RenderSettings = torchcore.DEFAULT_SETTINGS,
) -> tuple[Image, SceneGradients]:
    """Exact gradients of the forward compositing.

    The transmittance stop rule is treated as a fixed active set.  Returns
    the rendered image and per-Gaussian gradients, including the
    view-space positional gradient norms used by densify.
    """
    background = np.asarray(background, dtype=np.float64)
    dL = np.asarray(dL_dImage, dtype=np.float64)
    if dL.shape != (cam.height, cam.width, 4):
        raise ParameterError(
            f"dL_dImage must have shape {(cam.height, cam.width, 4)}, got {dL.shape}"
        )
    mu, scale, quats, opacity, sh = _scene_tensors(scene)
    for t in (mu, scale, quats, opacity, sh):
        t.requires_grad_(True)
    img, mean2d = torchcore.render_t(
        mu, torchcore.quat_to_mat_t(quats), scale, opacity, sh,
        t64(cam.rotation_matrix()), t64(cam.translation),
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
        t64(background), settings,
    )
    grads = torch.autograd.grad(
        outputs=img,
        inputs=[mu, scale, quats, opacity, sh, mean2d],
        grad_outputs=t64(dL),
        allow_unused=True,
    )
    n = len(scene)
    shapes = [(n, 3), (n, 3), (n, 4), (n,), (n,) + scene[0].sh.shape, (n, 2)]
    out = [
        g.detach().numpy() if g is not None else np.zeros(s)
        for g, s in zip(grads, shapes)
    ]
    return (
        Image(rgba=img.detach().numpy(), background=background),
        SceneGradients(
            d_mu=out[0],
            d_scale=out[1],
            d_rotation=out[2],
            d_opacity=out[3],
            d_sh=out[4],
            viewspace_grad_norms=np.linalg.norm(out[5], axis=1),
        ),
    )


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio over the RGB channels (peak 1.0)."""
    mse = float(np.mean((a.rgb() - b.rgb()) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)
