"""Differentiable float64 torch kernels behind the rasterizer and fitter.

The public modules keep numpy surfaces; everything that needs reverse-mode
gradients (tile compositing, mesh posing, frame construction, SH color)
has a torch twin here.  All kernels run single-threaded float64 so results
are bit-stable regardless of any outer parallelism.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch

from .gaussian_scene import SH_C0, SH_C1, SH_C2, SH_C3, SH_OFFSET

_DETERMINISTIC = False


def ensure_deterministic() -> None:
    """Pin torch intra-op threading so numerics never depend on it."""
    global _DETERMINISTIC
    if not _DETERMINISTIC:
        torch.set_num_threads(1)
        _DETERMINISTIC = True


def t64(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def quat_to_mat_t(q: torch.Tensor) -> torch.Tensor:
    """Batched (N,4) quaternions (normalized here) to (N,3,3) matrices."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def sh_eval_t(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Batched SH color: (N, C, 3) coefficients at (N, 3) unit dirs."""
    n, coeffs, _ = sh.shape
    degree = int(round(math.sqrt(coeffs))) - 1
    x, y, z = dirs.unbind(-1)
    basis = [torch.full_like(x, SH_C0)]
    if degree >= 1:
        basis += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        basis += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    b = torch.stack(basis, dim=-1)  # (N, C)
    return torch.einsum("nc,ncr->nr", b, sh) + SH_OFFSET


def pose_mesh_t(
    template_v: torch.Tensor,
    shape_basis: torch.Tensor,
    expr_basis: torch.Tensor,
    jaw_joint: torch.Tensor,
    jaw_weight: torch.Tensor,
    shape: torch.Tensor,
    expression: torch.Tensor,
    jaw: torch.Tensor,
    rotation_q: Optional[torch.Tensor] = None,
    translation: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Torch twin of head_model.pose_mesh (see there for semantics)."""
    v = template_v + torch.einsum("vcb,b->vc", shape_basis, shape)
    v = v + torch.einsum("vcb,b->vc", expr_basis, expression)
    angle = jaw.norm()
    rel = v - jaw_joint
    if float(angle.detach()) < 1e-8:
        # Linearized rotation: exact value and gradient at jaw -> 0.
        v = v + jaw_weight[:, None] * torch.cross(
            jaw.expand_as(rel), rel, dim=-1
        )
    else:
        axis = jaw / angle
        theta = jaw_weight * angle
        cos_t = torch.cos(theta)[:, None]
        sin_t = torch.sin(theta)[:, None]
        cross = torch.cross(axis.expand_as(rel), rel, dim=-1)
        dot = rel @ axis
        rotated = rel * cos_t + cross * sin_t + (dot * (1.0 - cos_t[:, 0]))[:, None] * axis
        v = rotated + jaw_joint
    if rotation_q is not None:
        r = quat_to_mat_t(rotation_q[None])[0]
        v = v @ r.T
    if translation is not None:
        v = v + translation
    return v


def pose_jaw_expr_batch_t(
    template_v: torch.Tensor,
    expr_basis: torch.Tensor,
    jaw_joint: torch.Tensor,
    jaw_weight: torch.Tensor,
    jaw: torch.Tensor,
    expression: torch.Tensor,
) -> torch.Tensor:
    """Batched jaw+expression posing over frames: (T,3),(T,B) -> (T,V,3).

    Same semantics as pose_mesh_t with zero shape/pose/translation; the
    near-zero-angle frames take a linearized rotation so gradients stay
    finite at jaw -> 0.
    """
    v = template_v[None] + torch.einsum("vcb,tb->tvc", expr_basis, expression)
    rel = v - jaw_joint
    angle = jaw.norm(dim=1)
    small = angle < 1e-8
    angle_safe = angle + small * 1.0  # avoids 0/0; branch discarded below
    axis = jaw / angle_safe[:, None]
    theta = jaw_weight[None, :] * angle_safe[:, None]
    cos_t = torch.cos(theta)
    sin_t = torch.sin(theta)
    cross = torch.cross(axis[:, None, :].expand_as(rel), rel, dim=-1)
    dot = torch.einsum("tvc,tc->tv", rel, axis)
    rodrigues = (
        rel * cos_t[:, :, None]
        + cross * sin_t[:, :, None]
        + (dot * (1.0 - cos_t))[:, :, None] * axis[:, None, :]
        + jaw_joint
    )
    linear = v + jaw_weight[None, :, None] * torch.cross(
        jaw[:, None, :].expand_as(rel), rel, dim=-1
    )
    return torch.where(small[:, None, None], linear, rodrigues)


def triangle_frames_t(vertices: torch.Tensor, triangles: np.ndarray):
    """Batched triangle frames: origins (F,3), rotations (F,3,3), scales (F,)."""
    tri = torch.as_tensor(triangles, dtype=torch.long)
    v0, v1, v2 = vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]]
    e1 = v1 - v0
    n = torch.cross(e1, v2 - v0, dim=-1)
    area = 0.5 * n.norm(dim=-1)
    x = e1 / e1.norm(dim=-1, keepdim=True)
    z = n / n.norm(dim=-1, keepdim=True)
    y = torch.cross(z, x, dim=-1)
    rot = torch.stack([x, y, z], dim=-1)  # columns
    return (v0 + v1 + v2) / 3.0, rot, torch.sqrt(2.0 * area)


def globalize_t(
    local_mu: torch.Tensor,
    local_scale: torch.Tensor,
    local_q: torch.Tensor,
    triangle_ids: np.ndarray,
    frame_origin: torch.Tensor,
    frame_rot: torch.Tensor,
    tri_scale: torch.Tensor,
):
    """Batched binding.globalize: returns (mu, rot_matrix, scale)."""
    tid = torch.as_tensor(np.asarray(triangle_ids), dtype=torch.long)
    o = frame_origin[tid]
    rf = frame_rot[tid]
    s = tri_scale[tid]
    mu = o + s[:, None] * torch.einsum("nij,nj->ni", rf, local_mu)
    rot = rf @ quat_to_mat_t(local_q)
    scale = s[:, None] * local_scale
    return mu, rot, scale


class RenderSettings:
    """Compositing constants; defaults mirror the splatting lineage."""

    def __init__(
        self,
        tile_size: int = 16,
        alpha_clamp: float = 0.99,
        alpha_cutoff: float = 1.0 / 255.0,
        transmittance_min: float = 1.0 / 255.0,
        near: float = 0.01,
        dilation: float = 0.3,
    ):
        self.tile_size = tile_size
        self.alpha_clamp = alpha_clamp
        self.alpha_cutoff = alpha_cutoff
        self.transmittance_min = transmittance_min
        self.near = near
        self.dilation = dilation

    def support_radius_sigmas(self) -> float:
        # Smallest radius outside which alpha < alpha_cutoff for any
        # opacity <= 1; keeps tile culling exactly consistent with the
        # per-pixel cutoff (slightly over 3 sigma at the defaults).
        return math.sqrt(2.0 * math.log(1.0 / self.alpha_cutoff))


DEFAULT_SETTINGS = RenderSettings()


def project_t(
    mu: torch.Tensor,
    rot: torch.Tensor,
    scale: torch.Tensor,
    cam_rot: torch.Tensor,
    cam_trans: torch.Tensor,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    settings: RenderSettings = DEFAULT_SETTINGS,
):
    """Project 3D Gaussians to screen space.

    Returns (mean2d, cov2d, depth, radius, valid); `valid` is computed
    without gradient and marks splats that survive near-plane and viewport
    culling.
    """
    p_cam = mu @ cam_rot.T + cam_trans
    z = p_cam[:, 2]
    with torch.no_grad():
        in_front = z > settings.near
    z_safe = torch.where(in_front, z, torch.ones_like(z))
    x_n = p_cam[:, 0] / z_safe
    y_n = p_cam[:, 1] / z_safe
    mean2d = torch.stack([fx * x_n + cx, fy * y_n + cy], dim=-1)

    # Pinhole Jacobian at the mean, chained with the world-to-cam rotation.
    zero = torch.zeros_like(z)
    j_row0 = torch.stack([fx / z_safe, zero, -fx * x_n / z_safe], dim=-1)
    j_row1 = torch.stack([zero, fy / z_safe, -fy * y_n / z_safe], dim=-1)
    jw = torch.stack([j_row0, j_row1], dim=-2) @ cam_rot  # (N, 2, 3)
    sigma = rot @ torch.diag_embed(scale**2) @ rot.transpose(-1, -2)
    cov2d = jw @ sigma @ jw.transpose(-1, -2)
    cov2d = cov2d + settings.dilation * torch.eye(2, dtype=cov2d.dtype)

    with torch.no_grad():
        a = cov2d[:, 0, 0]
        b = cov2d[:, 0, 1]
        c = cov2d[:, 1, 1]
        mid = 0.5 * (a + c)
        lam_max = mid + torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
        radius = 3.0 * torch.sqrt(torch.clamp(lam_max, min=0.0))
        on_screen = (
            (mean2d[:, 0] + radius > 0.0)
            & (mean2d[:, 0] - radius < width)
            & (mean2d[:, 1] + radius > 0.0)
            & (mean2d[:, 1] - radius < height)
        )
        valid = in_front & on_screen
        support = (radius / 3.0) * settings.support_radius_sigmas()
    return mean2d, cov2d, z, support, valid


def render_t(
    mu: torch.Tensor,
    rot: torch.Tensor,
    scale: torch.Tensor,
    opacity: torch.Tensor,
    sh: torch.Tensor,
    cam_rot: torch.Tensor,
    cam_trans: torch.Tensor,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    background: torch.Tensor,
    settings: RenderSettings = DEFAULT_SETTINGS,
):
    """Tile-based forward compositing.

    Returns (image HxWx4, mean2d) where mean2d stays in the autograd graph
    so callers can pull view-space positional gradients from it.
    """
    ensure_deterministic()
    n = mu.shape[0]
    mean2d, cov2d, depth, support, valid = project_t(
        mu, rot, scale, cam_rot, cam_trans, fx, fy, cx, cy, width, height, settings
    )
    bg = background

    idx_np = np.nonzero(valid.numpy())[0]
    if idx_np.size == 0:
        rgb = bg.expand(height, width, 3)
        alpha = torch.zeros(height, width, 1, dtype=mu.dtype)
        return torch.cat([rgb, alpha], dim=-1), mean2d

    # Canonical front-to-back order: depth, then screen position and
    # opacity as deterministic tie-breakers (input-permutation invariant).
    d = depth.detach().numpy()
    m = mean2d.detach().numpy()
    o = opacity.detach().numpy()
    order = idx_np[np.lexsort((o[idx_np], m[idx_np, 1], m[idx_np, 0], d[idx_np]))]
    order_t = torch.as_tensor(order, dtype=torch.long)

    mean2d_v = mean2d[order_t]
    cov2d_v = cov2d[order_t]
    op_v = opacity[order_t]
    sup_v = support[order_t]

    # Closed-form 2x2 inverse (conic).
    a = cov2d_v[:, 0, 0]
    b = cov2d_v[:, 0, 1]
    c = cov2d_v[:, 1, 1]
    det = a * c - b * b
    conic_a = c / det
    conic_b = -b / det
    conic_c = a / det

    cam_center = -(cam_rot.T @ cam_trans)
    dirs = mu[order_t] - cam_center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    colors = torch.clamp(sh_eval_t(sh[order_t], dirs), 0.0, 1.0)  # (V, 3)

    mx = mean2d_v[:, 0].detach().numpy()
    my = mean2d_v[:, 1].detach().numpy()
    r_np = sup_v.detach().numpy()

    # Per-tile Gaussian lists from the conservative screen bounds, padded to
    # a rectangular (tiles, G_max) index table so one batched computation
    # covers every tile.  Padded slots are masked to zero alpha.
    ts = settings.tile_size
    n_ty = (height + ts - 1) // ts
    n_tx = (width + ts - 1) // ts
    n_tiles = n_ty * n_tx
    hits = []
    g_max = 0
    for ty in range(n_ty):
        ty0 = ty * ts
        for tx in range(n_tx):
            tx0 = tx * ts
            hit = np.nonzero(
                (mx + r_np > tx0)
                & (mx - r_np < tx0 + ts)
                & (my + r_np > ty0)
                & (my - r_np < ty0 + ts)
            )[0]
            hits.append(hit)
            g_max = max(g_max, hit.size)
    if g_max == 0:
        rgb = bg.expand(height, width, 3)
        alpha = torch.zeros(height, width, 1, dtype=mu.dtype)
        return torch.cat([rgb, alpha], dim=-1), mean2d

    idx = np.zeros((n_tiles, g_max), dtype=np.int64)
    pad = np.zeros((n_tiles, g_max), dtype=bool)
    for t, hit in enumerate(hits):
        idx[t, : hit.size] = hit  # ascending = global depth order
        pad[t, hit.size:] = True
    idx_t = torch.as_tensor(idx)
    pad_t = torch.as_tensor(pad)

    # Pixel centers of every tile (tiles, P, 2); edge tiles overhang and
    # get cropped after assembly.
    grid = torch.arange(ts, dtype=mu.dtype) + 0.5
    gy, gx = torch.meshgrid(grid, grid, indexing="ij")
    local = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)  # (P, 2)
    origins = torch.tensor(
        [[tx * ts, ty * ts] for ty in range(n_ty) for tx in range(n_tx)],
        dtype=mu.dtype,
    )
    pix = origins[:, None, :] + local[None, :, :]  # (tiles, P, 2)

    dxy = pix[:, None, :, :] - mean2d_v[idx_t][:, :, None, :]  # (tiles, G, P, 2)
    dx = dxy[..., 0]
    dy = dxy[..., 1]
    power = -0.5 * (
        conic_a[idx_t][:, :, None] * dx * dx
        + 2.0 * conic_b[idx_t][:, :, None] * dx * dy
        + conic_c[idx_t][:, :, None] * dy * dy
    )
    power = torch.clamp(power, max=0.0)
    alpha = torch.clamp(op_v[idx_t][:, :, None] * torch.exp(power), max=settings.alpha_clamp)
    keep = (alpha >= settings.alpha_cutoff) & ~pad_t[:, :, None]
    alpha = torch.where(keep, alpha, torch.zeros_like(alpha))
    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_before = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=1)
    active = (t_before >= settings.transmittance_min).detach()
    w = alpha * t_before * active  # (tiles, G, P) blend weights
    tile_rgb = torch.einsum("tgp,tgr->tpr", w, colors[idx_t])
    tile_a = w.sum(dim=1)  # (tiles, P)
    tile_rgb = tile_rgb + (1.0 - tile_a)[:, :, None] * bg
    rgba = torch.cat([tile_rgb, tile_a[:, :, None]], dim=-1)  # (tiles, P, 4)
    image = (
        rgba.reshape(n_ty, n_tx, ts, ts, 4)
        .permute(0, 2, 1, 3, 4)
        .reshape(n_ty * ts, n_tx * ts, 4)[:height, :width]
    )
    return image, mean2d
