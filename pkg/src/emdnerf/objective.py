"""Training objective: photometric term, depth guidance, uncertainty weighting.

Per ray the loss is ``(1 + u)**gamma * photo + lam * (1 - u)**gamma * depth``;
the batch loss is the mean over rays. Uncertain pixels lean on the images,
confident pixels lean on the depth prior.
"""

from dataclasses import dataclass

import torch

from .errors import InputError
from .raymarch import as_tensor
from .transport import DiscreteMass, TransportParams, emd_loss

DEPTH_LOSSES = ("none", "l2", "l2h", "emd")


@dataclass
class LossWeights:
    lam: float = 0.007
    gamma: float = 1.0

    def __post_init__(self):
        if not (torch.isfinite(torch.tensor([self.lam, self.gamma])).all() and self.lam >= 0 and self.gamma >= 0):
            raise InputError("loss weights must be finite and nonnegative")


@dataclass
class LossBreakdown:
    """``photo`` and ``depth`` are the uncertainty-weighted batch means, so
    ``total == photo + lam * depth`` exactly."""

    photo: torch.Tensor
    depth: torch.Tensor
    total: torch.Tensor
    per_ray_photo: torch.Tensor = None
    per_ray_depth: torch.Tensor = None
    empty_ray_fraction: float = 0.0


def photometric_loss(rendered, observed):
    rendered, observed = as_tensor(rendered), as_tensor(observed)
    observed = observed.to(rendered.dtype)
    if rendered.shape != observed.shape:
        raise InputError(f"rendered {tuple(rendered.shape)} vs observed {tuple(observed.shape)}")
    return ((rendered - observed) ** 2).sum(-1)


def l2_depth_loss(rendered_depth, prior_depth_scaled):
    rendered_depth = as_tensor(rendered_depth)
    return (rendered_depth - as_tensor(prior_depth_scaled, rendered_depth.dtype)) ** 2


def l2_hypothesis_loss(samples, prior_atom):
    """Mean squared gap between sampled termination distances and one hypothesis."""
    samples = as_tensor(samples)
    if samples.shape[-1] < 1:
        raise InputError("need at least one sample")
    prior_atom = as_tensor(prior_atom, samples.dtype)
    return ((samples - prior_atom[..., None]) ** 2).mean(-1)


def emd_depth_loss(samples, prior_atoms, mode="exact", params=None):
    """Transport loss per ray between uniform-mass samples and prior atoms.

    ``prior_atoms`` is (R,) for a single hypothesis or (R, K) for K equally
    weighted hypotheses.
    """
    samples = as_tensor(samples)
    prior_atoms = as_tensor(prior_atoms, samples.dtype)
    if prior_atoms.dim() == samples.dim() - 1:
        prior_atoms = prior_atoms[..., None]
    return emd_loss(DiscreteMass(samples), DiscreteMass(prior_atoms), mode=mode, params=params or TransportParams())


def total_loss(photo, depth, u=None, weights=None, empty=None):
    """Combine per-ray terms into a :class:`LossBreakdown`.

    ``u`` defaults to zero (no uncertainty weighting). Rays flagged ``empty``
    keep their photometric term and drop the depth term.
    """
    weights = weights or LossWeights()
    photo = as_tensor(photo)
    depth = torch.zeros_like(photo) if depth is None else as_tensor(depth, photo.dtype)
    if u is None:
        u = torch.zeros_like(photo)
    u = as_tensor(u, photo.dtype)
    if u.numel() and ((u.detach() < 0).any() or (u.detach() > 1).any() or not torch.isfinite(u.detach()).all()):
        raise InputError("uncertainty must lie in [0, 1]")
    u = torch.broadcast_to(u, photo.shape)
    if weights.gamma == 0:
        w_photo = w_depth = torch.ones_like(u)
    else:
        w_photo = (1 + u) ** weights.gamma
        w_depth = (1 - u) ** weights.gamma
    if empty is not None:
        empty = torch.as_tensor(empty, dtype=torch.bool)
        w_depth = torch.where(empty, torch.zeros_like(w_depth), w_depth)
        empty_fraction = float(empty.float().mean()) if empty.numel() else 0.0
    else:
        empty_fraction = 0.0
    per_photo = w_photo * photo
    per_depth = w_depth * depth
    photo_mean = per_photo.mean()
    depth_mean = per_depth.mean()
    return LossBreakdown(
        photo=photo_mean,
        depth=depth_mean,
        total=photo_mean + weights.lam * depth_mean,
        per_ray_photo=per_photo,
        per_ray_depth=per_depth,
        empty_ray_fraction=empty_fraction,
    )
