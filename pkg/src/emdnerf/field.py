"""Tiny radiance field: encoded position and direction in, color and density out.

The trunk is a ReLU MLP with one skip connection and dropout after every
hidden activation. Dropout masks come from a seeded numpy bit stream rather
than ``torch.rand``; on one CPU core this is several times cheaper and keeps
the mask stream independent of the torch generator used for ray sampling.
"""

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import InputError
from .raymarch import positional_encode

SIGMA_SHIFT = 1.0


def shifted_softplus(x):
    return F.softplus(x - SIGMA_SHIFT)


class BitDropout:
    """Inverted dropout with masks drawn from 16-bit uniform integers.

    A unit is dropped when its draw falls below ``round(p * 65536)``, so the
    effective rate is ``p`` quantized to 1/65536; kept units are scaled by the
    reciprocal of the effective keep rate, making the expectation exact.
    """

    def __init__(self, p, seed):
        if not 0 <= p < 1:
            raise InputError("dropout probability must lie in [0, 1)")
        self.threshold = int(round(p * 65536))
        self.p = self.threshold / 65536
        self.scale = 1.0 / (1.0 - self.p)
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def mask(self, shape, dtype):
        n = math.prod(shape)
        bits = self.rng.bit_generator.random_raw((n + 3) // 4).view(np.uint16)[:n]
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        keep = np.where(bits >= self.threshold, np_dtype(self.scale), np_dtype(0))
        return torch.from_numpy(keep.reshape(shape)).to(dtype)

    def __call__(self, h):
        if self.threshold == 0:
            return h
        return h * self.mask(tuple(h.shape), h.dtype)

    def state(self):
        return self.rng.bit_generator.state

    def set_state(self, state):
        self.rng.bit_generator.state = state


class RadianceField(nn.Module):
    def __init__(self, width=64, depth=8, pos_levels=6, dir_levels=2, skip=4, bound=3.0):
        super().__init__()
        if depth < 1 or width < 1:
            raise InputError("trunk needs at least one layer of positive width")
        self.width, self.depth, self.skip = width, depth, skip
        self.pos_levels, self.dir_levels = pos_levels, dir_levels
        self.bound = float(bound)
        self.pos_dim = 3 + 6 * pos_levels
        self.dir_dim = 3 + 6 * dir_levels
        layers = []
        for i in range(depth):
            fan_in = self.pos_dim if i == 0 else width
            if 0 < skip == i:
                fan_in += self.pos_dim
            layers.append(nn.Linear(fan_in, width))
        self.trunk = nn.ModuleList(layers)
        self.sigma_head = nn.Linear(width, 1)
        self.feature = nn.Linear(width, width)
        self.color_hidden = nn.Linear(width + self.dir_dim, max(width // 2, 1))
        self.color_head = nn.Linear(max(width // 2, 1), 3)

    def encode(self, points, directions):
        """Normalized position and direction encodings (identity term first)."""
        p = points / self.bound
        pos = torch.cat([p, positional_encode(p, self.pos_levels)], -1)
        view = torch.cat([directions, positional_encode(directions, self.dir_levels)], -1)
        return pos, view

    def forward(self, pos_enc, dir_enc, dropout=None):
        """Returns ``(color, sigma)``; ``dropout`` is a :class:`BitDropout` or None."""
        if pos_enc.shape[-1] != self.pos_dim or dir_enc.shape[-1] != self.dir_dim:
            raise InputError(
                f"encoding widths {pos_enc.shape[-1]}/{dir_enc.shape[-1]} "
                f"do not match the field ({self.pos_dim}/{self.dir_dim})"
            )
        h = pos_enc
        for i, layer in enumerate(self.trunk):
            if 0 < self.skip == i:
                h = torch.cat([h, pos_enc], -1)
            h = F.relu(layer(h))
            if dropout is not None:
                h = dropout(h)
        sigma = shifted_softplus(self.sigma_head(h)[..., 0])
        feat = self.feature(h)
        c = F.relu(self.color_hidden(torch.cat([feat, dir_enc], -1)))
        color = torch.sigmoid(self.color_head(c))
        return color, sigma

    def query(self, points, directions, dropout=None):
        """Evaluate at world points (..., 3) with per-point unit directions."""
        pos, view = self.encode(points, directions)
        return self(pos, view, dropout)


class PriorScale(nn.Module):
    """Positive multiplier on every prior depth, initialized to one."""

    def __init__(self, value=1.0):
        super().__init__()
        if not value > 0:
            raise InputError("prior scale must be positive")
        self.s = nn.Parameter(torch.tensor(float(value)))

    def forward(self, depth):
        return self.s * depth

    @property
    def value(self):
        return float(self.s.detach())
