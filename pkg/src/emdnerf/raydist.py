"""Piecewise-constant ray-termination distributions.

Rendering weights are normalized into a histogram over bins whose edges sit
halfway between adjacent quadrature samples (extended to near/far at the
ends). Samples drawn through the interpolated inverse CDF are differentiable
with respect to the bin probabilities for fixed quantiles, which is the path
by which a transport loss on the samples reaches the densities.
"""

from dataclasses import dataclass

import torch

from .errors import InputError
from .raymarch import QuadratureSegments, as_tensor


@dataclass
class TerminationDistribution:
    edges: torch.Tensor  # (..., l + 1)
    probs: torch.Tensor  # (..., l)
    cdf: torch.Tensor  # (..., l + 1)
    empty: torch.Tensor  # (...,) bool, True where the uniform fallback was used

    def detach(self):
        return TerminationDistribution(self.edges.detach(), self.probs.detach(), self.cdf.detach(), self.empty)

    def cdf_at(self, x):
        """Evaluate the piecewise-linear CDF at positions ``x`` (..., k)."""
        x = as_tensor(x, self.edges.dtype)
        edges = self.edges.detach().contiguous()
        idx = torch.searchsorted(edges, x.contiguous(), right=True).clamp(1, edges.shape[-1] - 1)
        lo = idx - 1
        e_lo = torch.gather(self.edges, -1, lo)
        e_hi = torch.gather(self.edges, -1, idx)
        frac = ((x - e_lo) / (e_hi - e_lo).clamp_min(torch.finfo(x.dtype).tiny)).clamp(0, 1)
        val = torch.gather(self.cdf, -1, lo) + frac * torch.gather(self.probs, -1, lo)
        val = torch.where(x <= self.edges[..., :1], torch.zeros_like(val), val)
        return torch.where(x >= self.edges[..., -1:], torch.ones_like(val), val)


def normalize_weights(weights, epsilon=1e-8):
    """Return ``(probs, empty)`` with probs summing to one along the last axis.

    Rays whose total weight is below ``epsilon`` get the uniform distribution
    and ``empty=True``.
    """
    weights = as_tensor(weights)
    if torch.isnan(weights).all():
        raise InputError("weights are all NaN")
    if (weights < 0).any():
        raise InputError("weights must be nonnegative")
    total = weights.sum(dim=-1, keepdim=True)
    empty = total[..., 0] < epsilon
    uniform = torch.full_like(weights, 1.0 / weights.shape[-1])
    probs = torch.where(empty[..., None], uniform, weights / torch.where(empty[..., None], torch.ones_like(total), total))
    return probs, empty


def bin_edges(segments):
    """Midpoint bin edges for quadrature samples, spanning [near, far]."""
    t = segments.distances
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    return torch.cat([segments.near[..., None].to(t.dtype), mids, segments.far[..., None].to(t.dtype)], dim=-1)


def build_distribution(probs, segments, empty=None):
    """Assemble a :class:`TerminationDistribution`.

    ``segments`` may be :class:`QuadratureSegments` (edges become sample
    midpoints) or an explicit tensor of ``l + 1`` ascending edges.
    """
    probs = as_tensor(probs)
    if isinstance(segments, QuadratureSegments):
        if (segments.distances[..., 1:] < segments.distances[..., :-1]).any():
            raise InputError("quadrature distances are not monotone")
        edges = bin_edges(segments)
    else:
        edges = as_tensor(segments, probs.dtype)
        if (edges[..., 1:] < edges[..., :-1]).any():
            raise InputError("bin edges are not monotone")
    edges = torch.broadcast_to(edges, probs.shape[:-1] + (probs.shape[-1] + 1,))
    if edges.shape[-1] != probs.shape[-1] + 1:
        raise InputError("need exactly one more edge than bins")
    cum = torch.cumsum(probs, dim=-1)
    # Pin the final entry and cap the rest at 1 so rounding keeps the CDF monotone.
    cdf = torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1].clamp(max=1.0), torch.ones_like(cum[..., :1])],
                    dim=-1)
    if empty is None:
        empty = torch.zeros(probs.shape[:-1], dtype=torch.bool)
    return TerminationDistribution(edges=edges, probs=probs, cdf=cdf, empty=empty)


def inverse_transform_sample(dist, quantiles):
    """Map quantiles in [0, 1) through the interpolated inverse CDF.

    ``quantiles`` has shape (..., k) matching the distribution's batch axes,
    or (k,) to share one quantile set across all rays.
    """
    q = as_tensor(quantiles, dist.cdf.dtype)
    if (q < 0).any() or (q >= 1).any():
        raise InputError("quantiles must lie in [0, 1)")
    batch = dist.cdf.shape[:-1]
    q = torch.broadcast_to(q, batch + q.shape[-1:]).contiguous()
    cdf = dist.cdf
    nbins = dist.probs.shape[-1]
    idx = torch.searchsorted(cdf.detach().contiguous(), q, right=True).clamp(1, nbins)
    lo = idx - 1
    cdf_lo = torch.gather(cdf, -1, lo)
    p = torch.gather(dist.probs, -1, lo)
    e_lo = torch.gather(dist.edges, -1, lo)
    e_hi = torch.gather(dist.edges, -1, idx)
    safe_p = torch.where(p > 0, p, torch.ones_like(p))
    frac = torch.where(p > 0, (q - cdf_lo) / safe_p, torch.zeros_like(p)).clamp(0, 1)
    return e_lo + frac * (e_hi - e_lo)


def stratified_quantiles(batch_shape, n, rng=None, dtype=torch.float64, jitter=True):
    """Quantiles ``(k + U_k) / n`` for k < n; midpoints when ``jitter`` is False."""
    shape = tuple(batch_shape) + (n,)
    u = torch.rand(shape, generator=rng, dtype=dtype) if jitter else torch.full(shape, 0.5, dtype=dtype)
    q = (torch.arange(n, dtype=dtype) + u) / n
    # float32 rounding can push the top stratum onto 1.0
    return q.clamp_(max=1.0 - torch.finfo(dtype).eps)


def fine_resample(dist, coarse, n_fine, rng=None, deterministic=False, check=True):
    """Union of the coarse distances with ``n_fine`` inverse-transform draws.

    Draws are taken from the detached distribution (hierarchical sampling
    does not backpropagate into the coarse weights).
    """
    if n_fine < 0:
        raise InputError("n_fine must be >= 0")
    if n_fine == 0:
        return coarse
    batch = dist.cdf.shape[:-1]
    dtype = dist.cdf.dtype
    if deterministic:
        q = stratified_quantiles(batch, n_fine, dtype=dtype, jitter=False)
    else:
        q = torch.rand(batch + (n_fine,), generator=rng, dtype=dtype)
    fine = inverse_transform_sample(dist.detach(), q)
    merged, _ = torch.sort(torch.cat([coarse.distances.detach(), fine], dim=-1), dim=-1)
    return QuadratureSegments.from_distances(merged, coarse.near, coarse.far, check=check)
