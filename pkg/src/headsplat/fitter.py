"""Joint optimization of bound splats and per-frame head parameters.

Splat parameters get analytic gradients (autograd through globalize and
the rasterizer, with opacity in logit space and scale in log space); head
parameters are refined by central finite differences over their low
dimension.  Densify/prune run on a fixed iteration schedule.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import binding, quat, torchcore
from .binding import BoundGaussian, BoundScene
from .errors import ParameterError, StateError
from .head_model import BlendshapeBasis, HeadParams, TemplateMesh, pose_mesh
from .rasterizer import Camera, Image, RenderSettings
from .torchcore import t64

_LOGIT_EPS = 1e-6


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


@dataclass
class FitConfig:
    iterations: int = 2000
    lr_mu: float = 2e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 2.5e-2
    lr_sh: float = 2.5e-3
    lr_head: float = 1e-3
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    densify_start: int = 500
    densify_stop: int = 5000
    densify_interval: int = 200
    densify_tau_grad: float = 2e-4  # per 100 px of image width
    densify_size_split: float = 1.0  # local (tri_scale) units
    prune_alpha_min: float = 0.005
    optimize_head_params: bool = True
    head_opt_interval: int = 1
    head_fd_step: float = 1e-4
    divergence_factor: float = 10.0
    seed: int = 0
    threads: int = 1  # coarse-grained only; numerics are thread-invariant
    settings: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        for name in ("lr_mu", "lr_scale", "lr_rotation", "lr_opacity", "lr_sh", "lr_head"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.lambda_l1 < 0 or self.lambda_ssim < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.iterations < 0:
            raise ParameterError("iterations must be non-negative")


@dataclass
class TrainingFrame:
    target: Image
    camera: Camera
    params: HeadParams

    def __post_init__(self):
        if (self.target.height, self.target.width) != (self.camera.height, self.camera.width):
            raise ParameterError("target image size does not match camera viewport")


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


_SSIM_WINDOW = _gaussian_window()


def ssim_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """SSIM over HxWx3 tensors, 11x11 Gaussian window, valid padding."""
    h, w, _ = a.shape
    if h < 11 or w < 11:
        raise ParameterError("SSIM needs images of at least 11x11 pixels")
    win = _SSIM_WINDOW.expand(3, 1, 11, 11)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x = torch.nn.functional.conv2d(x, win, groups=3)
    mu_y = torch.nn.functional.conv2d(y, win, groups=3)
    xx = torch.nn.functional.conv2d(x * x, win, groups=3) - mu_x**2
    yy = torch.nn.functional.conv2d(y * y, win, groups=3) - mu_y**2
    xy = torch.nn.functional.conv2d(x * y, win, groups=3) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return (num / den).mean()


def _photometric_t(rendered_rgb: torch.Tensor, target_rgb: torch.Tensor,
                   lambda_l1: float, lambda_ssim: float):
    l1 = (rendered_rgb - target_rgb).abs().mean()
    if lambda_ssim > 0:
        ssim_val = ssim_t(rendered_rgb, target_rgb)
    else:
        ssim_val = torch.ones((), dtype=rendered_rgb.dtype)
    loss = lambda_l1 * l1 + lambda_ssim * (1.0 - ssim_val)
    return loss, l1, ssim_val


def photometric_loss(
    rendered: Image, target: Image, lambda_l1: float = 0.8, lambda_ssim: float = 0.2
) -> Tuple[float, np.ndarray]:
    """lambda_l1 * mean|diff| + lambda_ssim * (1 - SSIM) plus dL/dImage."""
    if rendered.rgba.shape != target.rgba.shape:
        raise ParameterError("rendered and target images must have equal shapes")
    torchcore.ensure_deterministic()
    x = t64(rendered.rgb()).requires_grad_(True)
    loss, _, _ = _photometric_t(x, t64(target.rgb()), lambda_l1, lambda_ssim)
    (grad,) = torch.autograd.grad(loss, x)
    dL = np.zeros_like(rendered.rgba)
    dL[:, :, :3] = grad.numpy()
    return float(loss.detach()), dL


class _TorchScene:
    """Optimizable torch mirror of a BoundScene."""

    def __init__(self, scene: BoundScene, config: FitConfig):
        self.triangle_ids = np.array([b.triangle_id for b in scene.bound], dtype=np.int64)
        self.num_triangles = len(scene.per_triangle_count)
        self.sh_degree = scene.sh_degree
        self.local_mu = t64(np.stack([b.local_mu for b in scene.bound])).requires_grad_(True)
        self.log_scale = t64(np.log(np.stack([b.local_scale for b in scene.bound]))).requires_grad_(True)
        self.quat = t64(np.stack([b.local_rotation for b in scene.bound])).requires_grad_(True)
        self.opacity_logit = t64(_logit(np.array([b.opacity for b in scene.bound]))).requires_grad_(True)
        self.sh = t64(np.stack([b.sh for b in scene.bound])).requires_grad_(True)
        self.optimizer = torch.optim.Adam(
            [
                {"params": [self.local_mu], "lr": config.lr_mu},
                {"params": [self.log_scale], "lr": config.lr_scale},
                {"params": [self.quat], "lr": config.lr_rotation},
                {"params": [self.opacity_logit], "lr": config.lr_opacity},
                {"params": [self.sh], "lr": config.lr_sh},
            ],
            betas=(0.9, 0.999),
        )
        n = len(scene.bound)
        self.grad_norm_acc = np.zeros(n)
        self.grad_norm_count = np.zeros(n)

    def tensors(self):
        return self.local_mu, torch.exp(self.log_scale), self.quat, torch.sigmoid(self.opacity_logit), self.sh

    def to_bound_scene(self) -> BoundScene:
        mu = self.local_mu.detach().numpy()
        scale = np.exp(self.log_scale.detach().numpy())
        q = self.quat.detach().numpy()
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        op = 1.0 / (1.0 + np.exp(-self.opacity_logit.detach().numpy()))
        sh = self.sh.detach().numpy()
        bound = [
            BoundGaussian(
                triangle_id=int(t),
                local_mu=mu[i],
                local_scale=scale[i],
                local_rotation=q[i],
                opacity=float(op[i]),
                sh=sh[i],
            )
            for i, t in enumerate(self.triangle_ids)
        ]
        return BoundScene(
            bound=bound,
            per_triangle_count=binding.recount(bound, self.num_triangles),
            sh_degree=self.sh_degree,
        )

    def snapshot(self):
        return [t.detach().clone() for t in
                (self.local_mu, self.log_scale, self.quat, self.opacity_logit, self.sh)]

    def restore(self, snap):
        with torch.no_grad():
            for t, s in zip(
                (self.local_mu, self.log_scale, self.quat, self.opacity_logit, self.sh), snap
            ):
                t.copy_(s)


def _head_vector(p: HeadParams) -> np.ndarray:
    """FD parameterization: translation, rotation increment, jaw, expression."""
    return np.concatenate([p.translation, np.zeros(3), p.jaw, p.expression])


def _apply_head_vector(p: HeadParams, vec: np.ndarray) -> HeadParams:
    t = vec[:3]
    dq = quat.from_axis_angle(vec[3:6])
    jaw = vec[6:9]
    expr = vec[9:]
    return HeadParams(
        shape=p.shape.copy(),
        expression=expr.copy(),
        jaw=jaw.copy(),
        global_rotation=quat.normalize(quat.multiply(dq, p.global_rotation)),
        translation=t.copy(),
    )


class _HeadAdam:
    """Per-frame Adam state for the finite-difference head updates."""

    def __init__(self, dim: int, lr: float):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.lr = lr

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad**2
        mh = self.m / (1 - b1**self.t)
        vh = self.v / (1 - b2**self.t)
        return -self.lr * mh / (np.sqrt(vh) + eps)


@dataclass
class FitResult:
    scene: BoundScene
    head_params: List[HeadParams]
    loss_curve: List[Tuple[int, float, float, float]]  # (iter, l1, ssim, total)


def _frame_loss(
    ts: "_TorchScene",
    template: TemplateMesh,
    basis: BlendshapeBasis,
    params: HeadParams,
    frame: TrainingFrame,
    config: FitConfig,
    background: torch.Tensor,
    for_grad: bool,
):
    mesh = pose_mesh(template, basis, params)
    verts = t64(mesh.vertices)
    origins, rotmats, tri_scales = torchcore.triangle_frames_t(verts, mesh.triangles)
    local_mu, local_scale, local_q, opacity, sh = ts.tensors()
    if not for_grad:
        local_mu, local_scale, local_q, opacity, sh = (
            x.detach() for x in (local_mu, local_scale, local_q, opacity, sh)
        )
    mu, rot, scale = torchcore.globalize_t(
        local_mu, local_scale, local_q, ts.triangle_ids, origins, rotmats, tri_scales
    )
    cam = frame.camera
    img, mean2d = torchcore.render_t(
        mu, rot, scale, opacity, sh,
        t64(cam.rotation_matrix()), t64(cam.translation),
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
        background, config.settings,
    )
    loss, l1, ssim_val = _photometric_t(
        img[:, :, :3], t64(frame.target.rgb()), config.lambda_l1, config.lambda_ssim
    )
    return loss, l1, ssim_val, mean2d


def fit(
    frames: Sequence[TrainingFrame],
    template: TemplateMesh,
    basis: BlendshapeBasis,
    config: FitConfig,
    scene: Optional[BoundScene] = None,
    background=(0.0, 0.0, 0.0),
) -> FitResult:
    """Optimize splats (and optionally per-frame head params) to the targets."""
    if len(frames) == 0:
        raise ParameterError("need at least one training frame")
    torchcore.ensure_deterministic()
    if scene is None:
        scene = binding.initialize_binding(pose_mesh(template, basis, frames[0].params), sh_degree=1)
    head_params = [copy.deepcopy(f.params) for f in frames]
    if config.iterations == 0:
        return FitResult(scene=scene, head_params=head_params, loss_curve=[])

    rng = np.random.default_rng(config.seed)
    ts = _TorchScene(scene, config)
    bg = t64(np.asarray(background, dtype=np.float64))
    head_dim = 9 + basis.num_expression
    head_adam = [_HeadAdam(head_dim, config.lr_head) for _ in frames]
    loss_curve: List[Tuple[int, float, float, float]] = []
    loss_history: List[float] = []
    snap = ts.snapshot()
    width = frames[0].camera.width
    tau = config.densify_tau_grad * (width / 100.0)

    for it in range(config.iterations):
        fi = int(rng.integers(0, len(frames)))
        frame = frames[fi]
        params = head_params[fi]

        ts.optimizer.zero_grad()
        loss, l1, ssim_val, mean2d = _frame_loss(
            ts, template, basis, params, frame, config, bg, for_grad=True
        )
        total = float(loss.detach())
        if not np.isfinite(total):
            raise StateError(
                f"non-finite loss at iteration {it} (frame {fi}); "
                f"|mu|max={float(ts.local_mu.detach().abs().max())}, "
                f"logscale max={float(ts.log_scale.detach().max())}"
            )
        if loss_history:
            med = float(np.median(loss_history[-101:]))
            if total > config.divergence_factor * med:
                # Divergence guard: reject the previous step and resample.
                ts.restore(snap)
                loss_history.append(med)
                continue
        snap = ts.snapshot()
        mean2d.retain_grad()
        loss.backward()
        if mean2d.grad is not None:
            g2d = mean2d.grad.numpy()
            norms = np.linalg.norm(g2d, axis=1)
            ts.grad_norm_acc += norms
            ts.grad_norm_count += (norms > 0).astype(np.float64)
        ts.optimizer.step()
        loss_history.append(total)
        loss_curve.append((it, float(l1.detach()), float(ssim_val.detach()), total))

        if config.optimize_head_params and (it % config.head_opt_interval == 0):
            vec = _head_vector(params)
            grad = np.zeros_like(vec)
            h = config.head_fd_step
            with torch.no_grad():
                for k in range(vec.size):
                    vp, vm = vec.copy(), vec.copy()
                    vp[k] += h
                    vm[k] -= h
                    lp, _, _, _ = _frame_loss(
                        ts, template, basis, _apply_head_vector(params, vp),
                        frame, config, bg, for_grad=False,
                    )
                    lm, _, _, _ = _frame_loss(
                        ts, template, basis, _apply_head_vector(params, vm),
                        frame, config, bg, for_grad=False,
                    )
                    grad[k] = (float(lp) - float(lm)) / (2 * h)
            step = head_adam[fi].step(grad)
            head_params[fi] = _apply_head_vector(params, _head_vector(params) + step)

        in_window = config.densify_start <= it < config.densify_stop
        if in_window and it > 0 and it % config.densify_interval == 0:
            counts = np.maximum(ts.grad_norm_count, 1.0)
            mean_norms = ts.grad_norm_acc / counts
            current = ts.to_bound_scene()
            current = binding.densify(
                current, mean_norms, tau, config.densify_size_split,
                rng=np.random.default_rng(config.seed + it),
            )
            current = binding.prune(current, config.prune_alpha_min)
            ts = _TorchScene(current, config)
            snap = ts.snapshot()

    return FitResult(scene=ts.to_bound_scene(), head_params=head_params, loss_curve=loss_curve)


def loss_curve_csv(curve: Sequence[Tuple[int, float, float, float]]) -> str:
    lines = ["iteration,l1,ssim,total"]
    for it, l1, ssim_val, total in curve:
        lines.append(f"{it},{l1:.10g},{ssim_val:.10g},{total:.10g}")
    return "\n".join(lines) + "\n"
