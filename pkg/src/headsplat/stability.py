"""Temporal stability scoring of keypoint trajectories.

Three components, each normalized into [0, 1] by its own per-sequence
maximum, averaged into a single score (lower = more stable):

  M_d  mean motion difference      mean_t,k |d_gen - d_gt|
  V_m  motion-magnitude variability std_t,k (|d_gen| - |d_gt|)
  H_f  high-frequency power        spectral fraction above the cutoff

where d are per-frame displacement vectors p[t+1] - p[t].  Without a
ground-truth trajectory (cross-reenactment), the reference is a 5-frame
moving average of the generated trajectory and the report is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ParameterError
from .rasterizer import Image

DEFAULT_CUTOFF_FRACTION = 0.4
SELF_REFERENCE_WINDOW = 5


@dataclass
class KeypointTrajectory:
    """T x K x 2 pixel positions at a fixed frame rate."""

    points: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ParameterError("points must be T x K x 2")
        if self.points.shape[0] < 2 or self.points.shape[1] < 1:
            raise ParameterError("need T >= 2 frames and K >= 1 keypoints")
        if not np.all(np.isfinite(self.points)):
            raise ParameterError("trajectory contains non-finite values")
        if self.fps <= 0:
            raise ParameterError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[1]

    def displacements(self) -> np.ndarray:
        """Per-frame displacement vectors, (T-1) x K x 2."""
        return np.diff(self.points, axis=0)


def _check_pair(gen: KeypointTrajectory, gt: KeypointTrajectory) -> None:
    if gen.points.shape != gt.points.shape:
        raise ParameterError("trajectories must have identical shape")
    if gen.fps != gt.fps:
        raise ParameterError("trajectories must share a frame rate")


def motion_difference(gen: KeypointTrajectory, gt: KeypointTrajectory) -> float:
    """Raw M_d: mean norm of the per-frame displacement differences."""
    _check_pair(gen, gt)
    diff = gen.displacements() - gt.displacements()
    return float(np.mean(np.linalg.norm(diff, axis=2)))


def motion_variability(gen: KeypointTrajectory, gt: KeypointTrajectory) -> float:
    """Raw V_m: std of the displacement-magnitude differences."""
    _check_pair(gen, gt)
    mag = np.linalg.norm(gen.displacements(), axis=2) - np.linalg.norm(gt.displacements(), axis=2)
    return float(np.std(mag))


def high_freq_power(gen: KeypointTrajectory,
                    cutoff_fraction: float = DEFAULT_CUTOFF_FRACTION) -> float:
    """Raw H_f: fraction of spectral power above cutoff_fraction * Nyquist.

    Each keypoint/axis signal is mean-detrended before the DFT; the
    fractions are averaged over keypoints and axes.  A constant signal
    contributes 0.
    """
    if not (0.0 < cutoff_fraction < 1.0):
        raise ParameterError("cutoff_fraction must lie in (0, 1)")
    num_frames = gen.num_frames
    if num_frames < 4:
        raise ParameterError("need at least 4 frames for spectral analysis")
    sig = gen.points - gen.points.mean(axis=0)  # detrend per keypoint/axis
    spec = np.fft.fft(sig, axis=0)
    power = np.abs(spec) ** 2
    freqs = np.abs(np.fft.fftfreq(num_frames, d=1.0 / gen.fps))
    nyquist = gen.fps / 2.0
    high = freqs > cutoff_fraction * nyquist
    total = power.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0.0, power[high].sum(axis=0) / total, 0.0)
    return float(frac.mean())


def moving_average(points: np.ndarray, window: int = SELF_REFERENCE_WINDOW) -> np.ndarray:
    """Centered moving average over frames, window shrinking at the edges."""
    num_frames = points.shape[0]
    half = window // 2
    out = np.empty_like(points)
    for t in range(num_frames):
        lo, hi = max(0, t - half), min(num_frames, t + half + 1)
        out[t] = points[lo:hi].mean(axis=0)
    return out


@dataclass
class StabilityConfig:
    cutoff_fraction: float = DEFAULT_CUTOFF_FRACTION
    self_reference_window: int = SELF_REFERENCE_WINDOW

    def __post_init__(self):
        if not (0.0 < self.cutoff_fraction < 1.0):
            raise ParameterError("cutoff_fraction must lie in (0, 1)")
        if self.self_reference_window < 2:
            raise ParameterError("self_reference_window must be >= 2")


@dataclass
class StabilityReport:
    m_d: float
    v_m: float
    h_f: float
    score: float
    raw: Dict[str, float]
    parameters: Dict[str, float]
    reference: str = "ground-truth"
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "M_d": self.m_d,
            "V_m": self.v_m,
            "H_f": self.h_f,
            "score": self.score,
            "raw": self.raw,
            "parameters": self.parameters,
            "reference": self.reference,
            "warnings": self.warnings,
        }


def stability_score(
    gen: KeypointTrajectory,
    gt: Optional[KeypointTrajectory] = None,
    config: Optional[StabilityConfig] = None,
) -> StabilityReport:
    """Compound stability score: mean of the three normalized components.

    Normalizers are per-sequence maxima of the same quantities: M_d by the
    max over frames of the mean-over-keypoints displacement-difference
    norm, V_m by the max absolute magnitude difference.  H_f is already a
    fraction.  Degenerate all-zero normalizers yield a 0 component plus a
    warning flag.
    """
    config = config or StabilityConfig()
    warnings: List[str] = []
    if gt is None:
        ref_points = moving_average(gen.points, config.self_reference_window)
        gt = KeypointTrajectory(points=ref_points, fps=gen.fps)
        reference = "self-smoothed"
    else:
        reference = "ground-truth"
    _check_pair(gen, gt)

    diff = gen.displacements() - gt.displacements()           # (T-1, K, 2)
    diff_norm = np.linalg.norm(diff, axis=2)                  # (T-1, K)
    raw_md = float(diff_norm.mean())
    md_norm = float(diff_norm.mean(axis=1).max())
    if md_norm > 0.0:
        m_d = raw_md / md_norm
    else:
        m_d = 0.0
        warnings.append("M_d normalizer is zero (identical motion)")

    mag = np.linalg.norm(gen.displacements(), axis=2) - np.linalg.norm(gt.displacements(), axis=2)
    raw_vm = float(np.std(mag))
    vm_norm = float(np.abs(mag).max())
    if vm_norm > 0.0:
        v_m = raw_vm / vm_norm
    else:
        v_m = 0.0
        warnings.append("V_m normalizer is zero (identical motion magnitudes)")

    h_f = high_freq_power(gen, config.cutoff_fraction)

    score = (m_d + v_m + h_f) / 3.0
    return StabilityReport(
        m_d=m_d,
        v_m=v_m,
        h_f=h_f,
        score=score,
        raw={"M_d": raw_md, "V_m": raw_vm, "H_f": h_f},
        parameters={
            "cutoff_fraction": config.cutoff_fraction,
            "self_reference_window": config.self_reference_window,
            "detrend": True,
        },
        reference=reference,
        warnings=warnings,
    )


def track_centroid(frames: Sequence, roi: tuple) -> KeypointTrajectory:
    """Intensity-weighted centroid of a rectangular ROI, one keypoint.

    roi is (x, y, width, height) in pixels; frames are Images or HxWxC
    arrays.  Coordinates are pixel centers (index + 0.5).  Stand-in
    tracker for synthetic clips only.
    """
    x0, y0, w, h = (int(v) for v in roi)
    if w <= 0 or h <= 0:
        raise ParameterError("ROI must have positive size")
    pts = []
    for f in frames:
        arr = f.rgba if isinstance(f, Image) else np.asarray(f, dtype=np.float64)
        if y0 < 0 or x0 < 0 or y0 + h > arr.shape[0] or x0 + w > arr.shape[1]:
            raise ParameterError("ROI lies outside the frame")
        patch = arr[y0:y0 + h, x0:x0 + w, :3].mean(axis=2)
        total = patch.sum()
        if total <= 0.0:
            # No signal in the ROI: report its geometric center.
            pts.append([x0 + w / 2.0, y0 + h / 2.0])
            continue
        ys, xs = np.mgrid[0:h, 0:w]
        cx = float(((xs + x0 + 0.5) * patch).sum() / total)
        cy = float(((ys + y0 + 0.5) * patch).sum() / total)
        pts.append([cx, cy])
    points = np.asarray(pts)[:, None, :]
    return KeypointTrajectory(points=points, fps=25.0)
