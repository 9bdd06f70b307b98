"""Volume-rendering quadrature along camera rays.

All functions operate on the last axis of their inputs (samples along a
ray) and broadcast over any leading ray/batch axes. Plain sequences are
promoted to float64 tensors; tensors keep their dtype so the trainer can
run in float32 and the gradient checks in float64.
"""

from dataclasses import dataclass
import math

import torch

from .errors import InputError


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.float64)


@dataclass
class RayBundle:
    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3), unit length
    near: torch.Tensor  # (R,)
    far: torch.Tensor  # (R,)
    pixel_ids: torch.Tensor | None = None  # (R,) int64

    def __post_init__(self):
        self.origins = as_tensor(self.origins)
        self.directions = as_tensor(self.directions, self.origins.dtype)
        n = self.origins.shape[0]
        self.near = torch.broadcast_to(as_tensor(self.near, self.origins.dtype), (n,))
        self.far = torch.broadcast_to(as_tensor(self.far, self.origins.dtype), (n,))
        if self.pixel_ids is not None:
            self.pixel_ids = torch.as_tensor(self.pixel_ids, dtype=torch.int64)

    def __len__(self):
        return self.origins.shape[0]

    def validate(self, num_pixels=None, atol=1e-6):
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise InputError("origins and directions must both be (R, 3)")
        if not (torch.isfinite(self.near).all() and torch.isfinite(self.far).all()):
            raise InputError("near/far must be finite")
        if (self.near <= 0).any() or (self.far <= self.near).any():
            raise InputError("require 0 < near < far for every ray")
        norms = self.directions.norm(dim=-1)
        if ((norms - 1).abs() > atol).any():
            raise InputError("ray directions must be unit length")
        if num_pixels is not None and self.pixel_ids is not None:
            if (self.pixel_ids < 0).any() or (self.pixel_ids >= num_pixels).any():
                raise InputError("pixel id out of image bounds")
        return self

    def __getitem__(self, idx):
        return RayBundle(
            self.origins[idx],
            self.directions[idx],
            self.near[idx],
            self.far[idx],
            None if self.pixel_ids is None else self.pixel_ids[idx],
        )


@dataclass
class QuadratureSegments:
    """Sample distances along each ray and the segment width owned by each sample.

    The last sample's segment runs to ``far``.
    """

    distances: torch.Tensor  # (..., n)
    deltas: torch.Tensor  # (..., n)
    near: torch.Tensor  # (...,)
    far: torch.Tensor  # (...,)

    @classmethod
    def from_distances(cls, distances, near, far, check=True):
        """Build segments; ``check=False`` tolerates float32 ties (zero-width segments)."""
        distances = as_tensor(distances)
        near = torch.broadcast_to(as_tensor(near, distances.dtype), distances.shape[:-1])
        far = torch.broadcast_to(as_tensor(far, distances.dtype), distances.shape[:-1])
        if check and (distances[..., 1:] <= distances[..., :-1]).any():
            raise InputError("sample distances must be strictly increasing")
        deltas = torch.cat([distances[..., 1:] - distances[..., :-1], far[..., None] - distances[..., -1:]], dim=-1)
        return cls(distances, deltas, near, far)


def sample_points(bundle, segments):
    """World-space positions of every sample, shape (R, n, 3)."""
    return bundle.origins[:, None, :] + bundle.directions[:, None, :] * segments.distances[..., None]


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    weights: torch.Tensor  # (R, n)
    residual_transmittance: torch.Tensor  # (R,)


def stratified_sample(bundle, n, rng=None, jitter=True, check=True):
    """One uniform draw inside each of ``n`` equal bins spanning [near, far].

    With ``jitter=False`` the bin midpoints are returned instead, which is
    what evaluation rendering uses.
    """
    if n < 2:
        raise InputError(f"need at least 2 samples per ray, got {n}")
    near, far = bundle.near, bundle.far
    if not (torch.isfinite(near).all() and torch.isfinite(far).all()):
        raise InputError("near/far must be finite")
    dtype = bundle.origins.dtype
    shape = (len(bundle), n)
    if jitter:
        u = torch.rand(shape, generator=rng, dtype=dtype)
    else:
        u = torch.full(shape, 0.5, dtype=dtype)
    k = torch.arange(n, dtype=dtype)
    t = near[:, None] + (far - near)[:, None] * (k + u) / n
    return QuadratureSegments.from_distances(t, near, far, check=check)


def compute_weights(sigmas, segments):
    """Per-sample termination weights and transmittance.

    ``segments`` is either a :class:`QuadratureSegments` or a tensor of deltas.
    Returns ``(weights, transmittance)``; the residual transmittance past the
    last sample is ``1 - weights.sum(-1)`` up to rounding, and is returned
    exactly by :func:`residual_transmittance`.
    """
    sigmas = as_tensor(sigmas)
    deltas = segments.deltas if isinstance(segments, QuadratureSegments) else as_tensor(segments, sigmas.dtype)
    if sigmas.shape != deltas.shape:
        raise InputError(f"sigma shape {tuple(sigmas.shape)} != delta shape {tuple(deltas.shape)}")
    if not torch.isfinite(sigmas).all():
        raise InputError("densities must be finite")
    if (sigmas < 0).any():
        raise InputError("densities must be nonnegative")
    tau = sigmas * deltas
    accumulated = torch.cumsum(tau, dim=-1)
    exclusive = torch.cat([torch.zeros_like(accumulated[..., :1]), accumulated[..., :-1]], dim=-1)
    transmittance = torch.exp(-exclusive)
    alpha = -torch.expm1(-tau)
    weights = transmittance * alpha
    return weights, transmittance


def residual_transmittance(sigmas, segments):
    sigmas = as_tensor(sigmas)
    deltas = segments.deltas if isinstance(segments, QuadratureSegments) else as_tensor(segments, sigmas.dtype)
    return torch.exp(-(sigmas * deltas).sum(-1))


def render_color(weights, colors):
    weights = as_tensor(weights)
    colors = as_tensor(colors, weights.dtype)
    if colors.shape[:-1] != weights.shape:
        raise InputError(f"{weights.shape[-1]} weights vs {colors.shape[-2]} colors")
    return (weights[..., None] * colors).sum(dim=-2)


def render_depth(weights, distances):
    weights = as_tensor(weights)
    distances = as_tensor(distances, weights.dtype)
    if distances.shape != weights.shape:
        raise InputError(f"{weights.shape[-1]} weights vs {distances.shape[-1]} distances")
    return (weights * distances).sum(dim=-1)


def render(sigmas, colors, segments):
    weights, _ = compute_weights(sigmas, segments)
    return RenderOutput(
        color=render_color(weights, colors),
        depth=render_depth(weights, segments.distances),
        weights=weights,
        residual_transmittance=residual_transmittance(sigmas, segments),
    )


def positional_encode(value, levels):
    """Frequency encoding ``(sin(2^k pi p), cos(2^k pi p))`` for k < levels.

    Output layout is per input scalar: ``[sin_0, cos_0, sin_1, cos_1, ...]``,
    so a trailing axis of size D becomes 2 * levels * D.
    """
    if levels < 1:
        raise InputError("levels must be >= 1")
    value = as_tensor(value)
    scalar = value.dim() == 0
    if scalar:
        value = value[None]
    freqs = (2.0 ** torch.arange(levels, dtype=value.dtype)) * math.pi
    angles = value[..., None] * freqs  # (..., D, L)
    enc = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., D, L, 2)
    return enc.reshape(*value.shape[:-1], -1)
