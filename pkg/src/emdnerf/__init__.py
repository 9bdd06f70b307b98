"""Depth-guided radiance fields with Earth Mover's Distance supervision.

Modules: ``raymarch`` (quadrature and compositing), ``raydist`` (termination
distributions), ``transport`` (exact and entropic 1D transport), ``uncertainty``
(trajectory uncertainty), ``objective`` (composite loss), ``field`` (network),
``trainer`` (training loop, rendering, checkpoints), ``scenesim`` (synthetic
scenes and corrupted priors), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
