"""Anisotropic 3D Gaussian primitives: covariance, density, SH color."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import quat
from .errors import ParameterError

# Real spherical harmonics constants, degrees 0..3, in the usual splatting
# basis ordering (l ascending, m = -l..l).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_OFFSET = 0.5  # fixed DC offset added per channel at evaluation time


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if sh_coeff_count(degree) != count:
        raise ParameterError(f"{count} is not a valid SH coefficient count")
    return degree


def sh_basis(view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values at a unit direction, shape ((degree+1)^2,)."""
    x, y, z = view_dir
    out = np.empty(sh_coeff_count(degree))
    out[0] = SH_C0
    if degree >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[4] = SH_C2[0] * xy
        out[5] = SH_C2[1] * yz
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[7] = SH_C2[3] * xz
        out[8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[10] = SH_C3[1] * x * y * z
        out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[14] = SH_C3[5] * z * (xx - yy)
        out[15] = SH_C3[6] * x * (xx - 3.0 * yy)
    if degree >= 4:
        raise ParameterError("SH degrees above 3 are not supported")
    return out


@dataclass
class GaussianPrimitive:
    """One splat: position, scale, orientation, opacity, SH color."""

    mu: np.ndarray        # (3,)
    scale: np.ndarray     # (3,) positive
    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    opacity: float        # [0, 1]
    sh: np.ndarray        # ((degree+1)^2, 3)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = quat.check_unit(np.asarray(self.rotation, dtype=np.float64))
        self.opacity = float(self.opacity)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.mu.shape != (3,) or self.scale.shape != (3,):
            raise ParameterError("mu and scale must be 3-vectors")
        if np.any(self.scale <= 0):
            raise ParameterError("scale must be positive elementwise")
        if not (0.0 <= self.opacity <= 1.0):
            raise ParameterError(f"opacity {self.opacity} outside [0, 1]")
        if self.sh.ndim != 2 or self.sh.shape[1] != 3:
            raise ParameterError("sh must have shape (coeffs, 3)")
        sh_degree_from_count(self.sh.shape[0])  # validates the count
        for name, a in (("mu", self.mu), ("scale", self.scale), ("sh", self.sh)):
            if not np.all(np.isfinite(a)):
                raise ParameterError(f"{name} contains non-finite values")

    @property
    def sh_degree(self) -> int:
        return sh_degree_from_count(self.sh.shape[0])


@dataclass
class Scene:
    """An ordered list of primitives sharing one SH degree."""

    gaussians: List[GaussianPrimitive]
    sh_degree: int = 0

    def __post_init__(self):
        if self.sh_degree < 0:
            raise ParameterError("sh_degree must be >= 0")
        want = sh_coeff_count(self.sh_degree)
        for i, g in enumerate(self.gaussians):
            if g.sh.shape[0] != want:
                raise ParameterError(
                    f"gaussian {i} has {g.sh.shape[0]} SH coefficients, scene expects {want}"
                )

    def __len__(self) -> int:
        return len(self.gaussians)

    def __iter__(self):
        return iter(self.gaussians)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return self.gaussians[i]


def covariance(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(scale^2) R^T, symmetric positive definite."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or np.any(scale <= 0):
        raise ParameterError("scale must be a positive 3-vector")
    r = quat.to_matrix(quat.check_unit(np.asarray(rotation, dtype=np.float64)))
    return (r * scale**2) @ r.T


def covariance_inverse(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Closed-form inverse on the factored form: R diag(1/scale^2) R^T."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or np.any(scale <= 0):
        raise ParameterError("scale must be a positive 3-vector")
    r = quat.to_matrix(quat.check_unit(np.asarray(rotation, dtype=np.float64)))
    return (r / scale**2) @ r.T


def density(g: GaussianPrimitive, x: np.ndarray) -> float:
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)); 1 exactly at the mean."""
    d = np.asarray(x, dtype=np.float64) - g.mu
    inv = covariance_inverse(g.scale, g.rotation)
    return float(np.exp(-0.5 * d @ inv @ d))


def sh_color(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients, plus the +0.5 DC offset.

    Not clamped here; the rasterizer clamps to [0, 1] at composite time.
    """
    sh = np.asarray(sh, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if sh.ndim != 2 or sh.shape[1] != 3:
        raise ParameterError("sh must have shape (coeffs, 3)")
    degree = sh_degree_from_count(sh.shape[0])
    basis = sh_basis(view_dir, degree)
    return basis @ sh + SH_OFFSET
