"""Shared test utilities: an independent per-pixel reference renderer and
small builders. Written in plain numpy, separately from the library's
tile-based implementation, so the two can cross-check each other."""

import numpy as np

from headsplat.gaussian_scene import GaussianPrimitive, sh_color
from headsplat.rasterizer import Camera
from headsplat import torchcore


def quat_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def naive_render(scene, cam: Camera, background=(0.0, 0.0, 0.0),
                 settings=torchcore.DEFAULT_SETTINGS):
    """Reference sort-and-blend compositing, one pixel at a time
    (vectorized over the pixel grid, sequential over depth)."""
    bg = np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    Wmat = cam.rotation_matrix()
    t = cam.translation
    cam_center = cam.center()

    splats = []
    for g in scene:
        p_cam = Wmat @ g.mu + t
        z = p_cam[2]
        if z <= settings.near:
            continue
        x, y = p_cam[0], p_cam[1]
        mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        J = np.array([
            [cam.fx / z, 0.0, -cam.fx * x / z ** 2],
            [0.0, cam.fy / z, -cam.fy * y / z ** 2],
        ])
        R = quat_matrix(g.rotation)
        sigma = R @ np.diag(g.scale ** 2) @ R.T
        JW = J @ Wmat
        cov2d = JW @ sigma @ JW.T + settings.dilation * np.eye(2)
        # Same conservative culling rule as the library renderer.
        a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
        lam_max = 0.5 * (a + c) + np.sqrt(max((0.5 * (a - c)) ** 2 + b * b, 0.0))
        radius = 3.0 * np.sqrt(max(lam_max, 0.0))
        if (mean2d[0] + radius <= 0 or mean2d[0] - radius >= W
                or mean2d[1] + radius <= 0 or mean2d[1] - radius >= H):
            continue
        view_dir = g.mu - cam_center
        view_dir = view_dir / np.linalg.norm(view_dir)
        color = np.clip(sh_color(g.sh, view_dir), 0.0, 1.0)
        splats.append((z, mean2d, np.linalg.inv(cov2d), g.opacity, color))

    rgb = np.zeros((H, W, 3))
    acc = np.zeros((H, W))
    if splats:
        order = np.lexsort((
            np.array([s[3] for s in splats]),
            np.array([s[1][1] for s in splats]),
            np.array([s[1][0] for s in splats]),
            np.array([s[0] for s in splats]),
        ))
        ys, xs = np.mgrid[0:H, 0:W]
        px = xs + 0.5
        py = ys + 0.5
        T = np.ones((H, W))
        for i in order:
            _, mean2d, conic, op, color = splats[i]
            dx = px - mean2d[0]
            dy = py - mean2d[1]
            power = -0.5 * (conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy
                            + conic[1, 1] * dy * dy)
            alpha = np.minimum(op * np.exp(np.minimum(power, 0.0)),
                               settings.alpha_clamp)
            alpha[alpha < settings.alpha_cutoff] = 0.0
            w = alpha * T * (T >= settings.transmittance_min)
            rgb += w[:, :, None] * color
            acc += w
            T = T * (1.0 - alpha)
    rgb += (1.0 - acc)[:, :, None] * bg
    return np.concatenate([rgb, acc[:, :, None]], axis=2)


def random_scene(rng, n, sh_degree=0, spread=0.25, z_center=1.0):
    """Random primitives in front of a canonical camera at the origin."""
    from headsplat.gaussian_scene import sh_coeff_count
    from headsplat import quat
    gs = []
    for _ in range(n):
        gs.append(GaussianPrimitive(
            mu=np.array([rng.uniform(-spread, spread),
                         rng.uniform(-spread, spread),
                         z_center + rng.uniform(-0.3, 0.3)]),
            scale=np.exp(rng.normal(np.log(0.04), 0.5, size=3)),
            rotation=quat.random_unit(rng),
            opacity=float(rng.uniform(0.05, 1.0)),
            sh=rng.normal(0.0, 0.4, size=(sh_coeff_count(sh_degree), 3)),
        ))
    return gs


def frontal_camera(width=32, height=32, fx=40.0):
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                  translation=np.zeros(3), width=width, height=height)
