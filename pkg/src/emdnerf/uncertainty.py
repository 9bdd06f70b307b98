"""Per-pixel uncertainty of a depth prior from its denoising trajectories.

A trajectory is the stack of intermediate depth maps a diffusion-style
predictor emits. Pixels the predictor keeps revising are unreliable; pixels
whose final estimate disagrees with the estimate from the mirrored image are
unreliable too. The map is computed once and frozen for training.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, InputError
from .pfm import read_pfm, write_pfm

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(9))


@dataclass
class DenoisingTrajectory:
    """``steps[t]`` is z_t, so ``steps[0]`` is the final estimate z_0."""

    steps: np.ndarray  # (T + 1, H, W)
    source_image_id: int = -1

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.steps.ndim == 1:
            self.steps = self.steps[:, None, None]
        if self.steps.ndim != 3:
            raise InputError(f"trajectory must be (T+1, H, W), got {self.steps.shape}")
        if not np.isfinite(self.steps).all():
            raise InputError("trajectory contains non-finite depths")

    @property
    def num_transitions(self):
        return self.steps.shape[0] - 1

    @property
    def final(self):
        return self.steps[0]


@dataclass
class UncertaintyMap:
    values: np.ndarray
    raw: np.ndarray
    tau_used: float = float("nan")
    extras: dict = field(default_factory=dict)


def mirror(image):
    """Left-right flip of the last (width) axis; its own inverse."""
    return np.flip(np.asarray(image), axis=-1)


def default_tau(max_depth, min_depth):
    if not max_depth > min_depth:
        raise InputError(f"empty depth range [{min_depth}, {max_depth}]")
    return (max_depth - min_depth) * 1e-4


def change_count(traj, tau):
    if not tau > 0:
        raise InputError("tau must be positive")
    if traj.num_transitions < 1:
        raise InputError("trajectory needs at least two steps")
    changed = np.abs(np.diff(traj.steps, axis=0)) >= tau
    return changed.mean(axis=0)


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise InputError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def mirrored_count(traj, mirrored_traj, tau):
    _check_same_shape(traj.steps[0], mirrored_traj.steps[0])
    return 0.5 * (change_count(traj, tau) + mirror(change_count(mirrored_traj, tau)))


def flip_consistency(z0, z0_mirrored):
    _check_same_shape(z0, z0_mirrored)
    return np.abs(np.asarray(z0, dtype=np.float64) - mirror(np.asarray(z0_mirrored, dtype=np.float64)))


def uncertainty_map(U, flip, tau=float("nan")):
    U = np.asarray(U, dtype=np.float64)
    flip = np.asarray(flip, dtype=np.float64)
    _check_same_shape(U, flip)
    if (U < 0).any() or (flip < 0).any():
        raise InputError("uncertainty factors must be nonnegative")
    raw = U * flip
    peak = raw.max() if raw.size else 0.0
    values = raw / peak if peak > 0 else np.zeros_like(raw)
    return UncertaintyMap(values=values, raw=raw, tau_used=tau)


def trajectory_uncertainty(traj, mirrored_traj, tau):
    """Full pipeline: mirrored change count times flip inconsistency, normalized."""
    U = mirrored_count(traj, mirrored_traj, tau)
    flip = flip_consistency(traj.final, mirrored_traj.final)
    return uncertainty_map(U, flip, tau)


def threshold_curve(u_maps, error_maps, thresholds=DEFAULT_THRESHOLDS):
    """Rows ``(t, fraction_above, error_above, error_below)`` pooled over images.

    ``error_above`` is the mean prior error over pixels with u >= t. Empty
    sets report NaN.
    """
    u = np.concatenate([np.ravel(m) for m in u_maps])
    err = np.concatenate([np.ravel(e) for e in error_maps])
    _check_same_shape(u, err)
    rows = []
    for t in thresholds:
        above = u >= t
        rows.append((
            float(t),
            float(above.mean()),
            float(err[above].mean()) if above.any() else float("nan"),
            float(err[~above].mean()) if (~above).any() else float("nan"),
        ))
    return rows


def separation_ratio(u_maps, error_maps, threshold=0.5):
    """Relative excess of mean error at u >= threshold over u < threshold."""
    (_, _, above, below), = threshold_curve(u_maps, error_maps, (threshold,))
    return above / below - 1.0


# ---------------------------------------------------------------- ingestion

MANIFEST = "manifest.txt"


def write_trajectory(directory, traj, mirrored_dir=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for t, step in enumerate(traj.steps):
        name = f"step_{t:04d}.pfm"
        write_pfm(directory / name, step)
        names.append(name)
    lines = [
        f"image_id = {traj.source_image_id}",
        f"mirrored_pair = {mirrored_dir or ''}",
        "order = final_first",
        "steps = " + " ".join(names),
    ]
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise DataError(f"missing trajectory manifest {path}")
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed line {line!r}")
        entries[key.strip()] = value.strip()
    if "steps" not in entries:
        raise DataError(f"{path}: no steps listed")
    return entries


def read_trajectory(directory):
    """Load one trajectory directory; returns ``(trajectory, mirrored_pair_name)``."""
    directory = Path(directory)
    entries = read_manifest(directory)
    names = entries["steps"].split()
    steps = np.stack([read_pfm(directory / n) for n in names]).astype(np.float64)
    if entries.get("order", "final_first") == "final_last":
        steps = steps[::-1]
    try:
        image_id = int(entries.get("image_id", -1))
    except ValueError as exc:
        raise DataError(f"{directory}: bad image_id") from exc
    return DenoisingTrajectory(steps, image_id), entries.get("mirrored_pair") or None


def load_trajectory_pairs(root):
    """All ``(direct, mirrored)`` trajectory pairs under ``root``, keyed by image id."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"trajectory directory {root} not found")
    pairs = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        traj, pair = read_trajectory(sub)
        if not pair:
            continue
        mirrored, _ = read_trajectory(root / pair)
        pairs[traj.source_image_id] = (traj, mirrored)
    if not pairs:
        raise DataError(f"no paired trajectories under {root}")
    return pairs
