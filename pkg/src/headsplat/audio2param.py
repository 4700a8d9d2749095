"""Causal transformer decoder mapping per-frame audio features to head
parameters (jaw rotation + expression coefficients).

Audio enters as a ready-made T x d_a feature matrix; a periodic positional
encoding drives the decoder positions, a causal alignment mask blocks
information flow from future frames, a style embedding of the identity
template is added to the per-frame latents, and an affine motion decoder
over tanh-bounded latents emits the parameters.  Training regresses
predicted meshes against jaw-isolated ground-truth meshes in vertex space.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import torchcore
from .errors import ParameterError, StateError
from .head_model import BlendshapeBasis, HeadParams, Mesh, TemplateMesh, pose_mesh
from .torchcore import t64


@dataclass
class AudioFeatureSequence:
    """Per-frame audio features (T x d_a) at a fixed frame rate."""

    features: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ParameterError("features must be a T x d_a matrix with T >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("features contain non-finite values")
        if self.frame_rate <= 0:
            raise ParameterError("frame_rate must be positive")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class StyleEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ParameterError("style embedding contains non-finite values")


@dataclass
class PredictedMotion:
    """Per-frame jaw axis-angle (T x 3) and expression (T x B_e)."""

    jaw: np.ndarray
    expression: np.ndarray

    def __post_init__(self):
        self.jaw = np.asarray(self.jaw, dtype=np.float64)
        self.expression = np.asarray(self.expression, dtype=np.float64)
        if self.jaw.ndim != 2 or self.jaw.shape[1] != 3:
            raise ParameterError("jaw must be T x 3")
        if self.expression.shape[0] != self.jaw.shape[0]:
            raise ParameterError("jaw and expression must cover the same frames")

    @property
    def num_frames(self) -> int:
        return self.jaw.shape[0]


@dataclass
class A2PConfig:
    audio_dim: int = 29
    model_dim: int = 64
    layers: int = 4
    heads: int = 4
    period: int = 30
    num_expression: int = 16
    num_vertices: int = 0  # set from the training template

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ParameterError("model_dim must be divisible by heads")
        if self.period < 1:
            raise ParameterError("period must be >= 1")

    def to_dict(self) -> Dict:
        return {
            "audio_dim": self.audio_dim,
            "model_dim": self.model_dim,
            "layers": self.layers,
            "heads": self.heads,
            "period": self.period,
            "num_expression": self.num_expression,
            "num_vertices": self.num_vertices,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "A2PConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def ppe(t: int, model_dim: int, period: int) -> np.ndarray:
    """Sinusoidal positional encoding evaluated at (t mod period)."""
    if t < 0:
        raise ParameterError("frame index must be non-negative")
    if period < 1:
        raise ParameterError("period must be >= 1")
    pos = t % period
    enc = np.zeros(model_dim)
    half = np.arange(0, model_dim, 2)
    freq = np.exp(-math.log(10000.0) * half / model_dim)
    enc[0::2] = np.sin(pos * freq)
    enc[1::2] = np.cos(pos * freq[: enc[1::2].size])
    return enc


def ppe_table(num_frames: int, model_dim: int, period: int) -> np.ndarray:
    return np.stack([ppe(t, model_dim, period) for t in range(num_frames)])


def alignment_mask(num_frames: int) -> np.ndarray:
    """T x T boolean mask: position i may attend to j iff j <= i."""
    if num_frames < 1:
        raise ParameterError("need at least one frame")
    return np.tril(np.ones((num_frames, num_frames), dtype=bool))


def combine_style(latents: np.ndarray, style: StyleEmbedding) -> np.ndarray:
    """Rowwise addition of the identity embedding to per-frame latents."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[1] != style.vector.shape[0]:
        raise ParameterError(
            f"latents (T x {style.vector.shape}) incompatible with style {style.vector.shape}"
        )
    return latents + style.vector


class _Attention(torch.nn.Module):
    """Masked multi-head attention (self or cross), float64."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = torch.nn.Linear(dim, dim, dtype=torch.float64)
        self.k = torch.nn.Linear(dim, dim, dtype=torch.float64)
        self.v = torch.nn.Linear(dim, dim, dtype=torch.float64)
        self.out = torch.nn.Linear(dim, dim, dtype=torch.float64)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        tq, tk = x.shape[0], memory.shape[0]
        q = self.q(x).reshape(tq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k(memory).reshape(tk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v(memory).reshape(tk, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allow[None, :, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(0, 1).reshape(tq, -1)
        return self.out(y)


class _DecoderLayer(torch.nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = torch.nn.LayerNorm(dim, dtype=torch.float64)
        self.self_attn = _Attention(dim, heads)
        self.norm2 = torch.nn.LayerNorm(dim, dtype=torch.float64)
        self.cross_attn = _Attention(dim, heads)
        self.norm3 = torch.nn.LayerNorm(dim, dtype=torch.float64)
        self.ff = torch.nn.Sequential(
            torch.nn.Linear(dim, 4 * dim, dtype=torch.float64),
            torch.nn.Tanh(),
            torch.nn.Linear(4 * dim, dim, dtype=torch.float64),
        )

    def forward(self, x: torch.Tensor, audio: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x), self.norm1(x), allow)
        x = x + self.cross_attn(self.norm2(x), audio, allow)
        x = x + self.ff(self.norm3(x))
        return x


class _MotionTransformer(torch.nn.Module):
    def __init__(self, config: A2PConfig):
        super().__init__()
        d = config.model_dim
        self.config = config
        self.audio_proj = torch.nn.Linear(config.audio_dim, d, dtype=torch.float64)
        self.style_fc1 = torch.nn.Linear(3 * config.num_vertices, d, dtype=torch.float64)
        self.style_fc2 = torch.nn.Linear(d, d, dtype=torch.float64)
        self.layers = torch.nn.ModuleList(
            [_DecoderLayer(d, config.heads) for _ in range(config.layers)]
        )
        self.motion_out = torch.nn.Linear(d, 3 + config.num_expression, dtype=torch.float64)

    def style(self, template_v: torch.Tensor, mean_head: torch.Tensor) -> torch.Tensor:
        disp = (template_v - mean_head).reshape(-1)
        return self.style_fc2(torch.tanh(self.style_fc1(disp)))

    def forward(self, features: torch.Tensor, template_v: torch.Tensor,
                mean_head: torch.Tensor) -> torch.Tensor:
        num_frames = features.shape[0]
        x = t64(ppe_table(num_frames, self.config.model_dim, self.config.period))
        audio = self.audio_proj(features)
        allow = torch.as_tensor(alignment_mask(num_frames))
        for layer in self.layers:
            x = layer(x, audio, allow)
        latent = x + self.style(template_v, mean_head)
        return self.motion_out(torch.tanh(latent))


@dataclass
class A2PWeights:
    """Serializable weight bundle: config, named tensors, mean-head buffer."""

    config: A2PConfig
    tensors: Dict[str, np.ndarray]
    mean_head: np.ndarray  # V x 3 reference for style displacements
    trained: bool = False

    @classmethod
    def initialize(cls, config: A2PConfig, seed: int = 0,
                   mean_head: Optional[np.ndarray] = None) -> "A2PWeights":
        torchcore.ensure_deterministic()
        torch.manual_seed(seed)
        model = _MotionTransformer(config)
        tensors = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}
        if mean_head is None:
            mean_head = np.zeros((config.num_vertices, 3))
        return cls(config=config, tensors=tensors, mean_head=np.asarray(mean_head, dtype=np.float64))

    def build_model(self) -> _MotionTransformer:
        torchcore.ensure_deterministic()
        model = _MotionTransformer(self.config)
        model.load_state_dict({k: t64(v) for k, v in self.tensors.items()})
        return model

    def update_from_model(self, model: _MotionTransformer) -> None:
        self.tensors = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()}


def _check_template(template: TemplateMesh, config: A2PConfig) -> None:
    if template.num_vertices != config.num_vertices:
        raise ParameterError(
            f"template has {template.num_vertices} vertices, model expects {config.num_vertices}"
        )


def style_encode(template: TemplateMesh, weights: A2PWeights) -> StyleEmbedding:
    """Identity embedding of a template mesh (deterministic)."""
    _check_template(template, weights.config)
    model = weights.build_model()
    with torch.no_grad():
        s = model.style(t64(template.vertices), t64(weights.mean_head))
    return StyleEmbedding(vector=s.numpy())


def predict(audio: AudioFeatureSequence, template: TemplateMesh,
            weights: A2PWeights) -> PredictedMotion:
    """Teacher-forced parallel decoding; outputs at t use audio <= t only."""
    if audio.dim != weights.config.audio_dim:
        raise ParameterError(
            f"audio features have dim {audio.dim}, model expects {weights.config.audio_dim}"
        )
    _check_template(template, weights.config)
    model = weights.build_model()
    with torch.no_grad():
        out = model(t64(audio.features), t64(template.vertices), t64(weights.mean_head))
    out = out.numpy()
    return PredictedMotion(jaw=out[:, :3], expression=out[:, 3:])


def jaw_isolated_gt(
    gt_params: Sequence[HeadParams], template: TemplateMesh, basis: BlendshapeBasis
) -> List[Mesh]:
    """Ground-truth meshes rebuilt with only the jaw parameters active."""
    out = []
    for p in gt_params:
        iso = HeadParams(
            shape=np.zeros(basis.num_shape),
            expression=np.zeros(basis.num_expression),
            jaw=p.jaw.copy(),
        )
        out.append(pose_mesh(template, basis, iso))
    return out


def _pred_meshes_t(jaw: torch.Tensor, expression: torch.Tensor,
                   template: TemplateMesh, basis: BlendshapeBasis) -> torch.Tensor:
    """Stack of predicted meshes (T, V, 3), differentiable."""
    return torchcore.pose_jaw_expr_batch_t(
        t64(template.vertices),
        t64(basis.expression_basis),
        t64(basis.jaw_joint),
        t64(basis.jaw_weight),
        jaw,
        expression,
    )


def _vertex_loss_t(jaw: torch.Tensor, expression: torch.Tensor,
                   gt_vertices: torch.Tensor, template: TemplateMesh,
                   basis: BlendshapeBasis) -> torch.Tensor:
    pred = _pred_meshes_t(jaw, expression, template, basis)
    diff = gt_vertices - pred
    return diff.reshape(diff.shape[0], -1).norm(dim=1).sum()


def vertex_loss(
    pred: PredictedMotion,
    gt_meshes: Sequence[Mesh],
    template: TemplateMesh,
    basis: BlendshapeBasis,
) -> Tuple[float, Tuple[np.ndarray, np.ndarray]]:
    """Sum over frames of the Frobenius vertex distance to the isolated GT.

    Returns the loss and its gradients with respect to the predicted
    (jaw, expression) sequences.
    """
    if len(gt_meshes) != pred.num_frames:
        raise ParameterError("prediction and ground truth must cover the same frames")
    torchcore.ensure_deterministic()
    jaw = t64(pred.jaw).requires_grad_(True)
    expr = t64(pred.expression).requires_grad_(True)
    gt = t64(np.stack([m.vertices for m in gt_meshes]))
    loss = _vertex_loss_t(jaw, expr, gt, template, basis)
    d_jaw, d_expr = torch.autograd.grad(loss, [jaw, expr])
    return float(loss.detach()), (d_jaw.numpy(), d_expr.numpy())


@dataclass
class A2PTrainItem:
    audio: AudioFeatureSequence
    gt_params: List[HeadParams]
    template: TemplateMesh
    basis: BlendshapeBasis


@dataclass
class A2PTrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.steps < 0:
            raise ParameterError("steps must be non-negative")


def train(
    dataset: Sequence[A2PTrainItem],
    config: A2PTrainConfig,
    weights: Optional[A2PWeights] = None,
    model_config: Optional[A2PConfig] = None,
) -> Tuple[A2PWeights, List[float]]:
    """End-to-end Adam training on the jaw-isolated vertex loss."""
    if len(dataset) == 0:
        raise ParameterError("dataset must be non-empty")
    torchcore.ensure_deterministic()
    first = dataset[0]
    if weights is None:
        if model_config is None:
            model_config = A2PConfig(
                audio_dim=first.audio.dim,
                num_expression=first.basis.num_expression,
                num_vertices=first.template.num_vertices,
            )
        weights = A2PWeights.initialize(model_config, seed=config.seed)
    if config.steps == 0:
        return copy.deepcopy(weights), []

    model = weights.build_model()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    torch.manual_seed(config.seed)

    cached = []
    for item in dataset:
        gt = jaw_isolated_gt(item.gt_params, item.template, item.basis)
        cached.append(
            (
                t64(item.audio.features),
                t64(item.template.vertices),
                t64(np.stack([m.vertices for m in gt])),
                item,
            )
        )
    mean_head_t = t64(weights.mean_head)

    curve: List[float] = []
    for step in range(config.steps):
        opt.zero_grad()
        total = torch.zeros((), dtype=torch.float64)
        for features, tv, gt_v, item in cached:
            out = model(features, tv, mean_head_t)
            total = total + _vertex_loss_t(
                out[:, :3], out[:, 3:], gt_v, item.template, item.basis
            )
        val = float(total.detach())
        if not np.isfinite(val):
            raise StateError(f"non-finite training loss at step {step}")
        total.backward()
        opt.step()
        curve.append(val)

    out_weights = copy.deepcopy(weights)
    out_weights.update_from_model(model)
    out_weights.trained = True
    return out_weights, curve


def animate(
    audio: AudioFeatureSequence,
    template: TemplateMesh,
    basis: BlendshapeBasis,
    avatar,
    weights: A2PWeights,
    reference_motion: Sequence[HeadParams],
    cameras,
    background=(0.0, 0.0, 0.0),
    lip_only: bool = False,
    settings=None,
):
    """Render one frame per audio frame: predicted jaw/expression plus
    reference head motion (or frozen frame-0 pose with lip_only)."""
    from . import binding as binding_mod
    from .rasterizer import Camera, render

    if not weights.trained:
        raise StateError("animate requires trained audio-to-parameter weights")
    if len(reference_motion) == 0:
        raise ParameterError("reference motion must be non-empty")
    motion = predict(audio, template, weights)
    num_frames = motion.num_frames
    if isinstance(cameras, Camera):
        cameras = [cameras] * num_frames
    if len(cameras) < num_frames:
        raise ParameterError("need a camera per output frame")

    frames = []
    params_used = []
    for t in range(num_frames):
        ref = reference_motion[0] if lip_only else reference_motion[t % len(reference_motion)]
        params = HeadParams(
            shape=ref.shape.copy(),
            expression=np.zeros(basis.num_expression) if lip_only else motion.expression[t],
            jaw=motion.jaw[t],
            global_rotation=ref.global_rotation.copy(),
            translation=ref.translation.copy(),
        )
        mesh = pose_mesh(template, basis, params)
        tri_frames = binding_mod.triangle_frames(mesh)
        scene = binding_mod.globalize_scene(avatar, tri_frames)
        kwargs = {} if settings is None else {"settings": settings}
        frames.append(render(scene, cameras[t], background, **kwargs))
        params_used.append(params)
    return frames, params_used
