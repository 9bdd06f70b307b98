"""Synthetic indoor scenes with exact RGB-D, corrupted depth priors and
denoising trajectories whose instability tracks the injected error.

Conventions: world frame is z-up, cameras follow the OpenCV convention
(x right, y down, z forward), poses are camera-to-world 4x4 matrices and
depth maps hold z-depth (distance along the optical axis). A depth of 0
marks an invalid pixel.
"""

from dataclasses import asdict, dataclass, field, replace
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, GenerationError, InputError
from .pfm import read_pfm, write_pfm
from .uncertainty import DenoisingTrajectory, default_tau, trajectory_uncertainty, write_trajectory, load_trajectory_pairs

HIT_EPS = 1e-9
MAX_DEPTH = 10.0
MIN_DEPTH = 0.001


# ------------------------------------------------------------------ specs

@dataclass
class SceneSpec:
    """Geometry, lighting and camera rig.

    ``primitives`` entries are dicts with ``type`` in {box, sphere, plane},
    geometry keys (box: ``min``/``max``; sphere: ``center``/``radius``;
    plane: ``point``/``normal``), an RGB ``albedo`` and an optional
    ``checker`` cell size (0 = textureless).
    """

    primitives: list = field(default_factory=list)
    room_min: tuple | None = (-2.5, -2.5, 0.0)
    room_max: tuple | None = (2.5, 2.5, 2.6)
    wall_albedo: tuple = ((0.85, 0.82, 0.78), (0.75, 0.8, 0.85), (0.82, 0.85, 0.75), (0.8, 0.76, 0.84))
    floor_albedo: tuple = (0.55, 0.42, 0.3)
    floor_checker: float = 0.5
    ceiling_albedo: tuple = (0.92, 0.92, 0.92)
    light_dir: tuple = (0.3, -0.5, 0.8)
    ambient: float = 0.35
    num_views: int = 26
    test_views: tuple = (1, 4, 7, 10, 14, 17, 20, 23)
    lookat: tuple = (0.0, 0.0, 0.7)
    radius: float = 1.8
    height: float = 1.4
    image_size: int = 64
    fov_deg: float = 60.0
    near: float = 0.2
    far: float = 6.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown scene spec keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    def validate(self):
        if not self.primitives and self.room_min is None:
            raise InputError("scene needs at least one primitive")
        for p in self.primitives:
            if p.get("type") not in ("box", "sphere", "plane"):
                raise InputError(f"unknown primitive {p.get('type')!r}")
        if self.image_size < 2 or self.num_views < 1:
            raise InputError("image size and view count must be positive")
        if not 0 < self.near < self.far:
            raise InputError("require 0 < near < far")
        if any(not 0 <= t < self.num_views for t in self.test_views):
            raise InputError("test view index out of range")
        return self


def default_spec():
    """Box room with a table, a cabinet, a ball and a low crate."""
    prims = [
        {"type": "box", "min": (-0.6, -0.4, 0.0), "max": (0.6, 0.4, 0.75), "albedo": (0.6, 0.35, 0.2), "checker": 0.2},
        {"type": "box", "min": (2.0, -1.2, 0.0), "max": (2.5, -0.2, 1.8), "albedo": (0.3, 0.45, 0.6), "checker": 0.3},
        {"type": "sphere", "center": (-0.9, 0.9, 0.35), "radius": 0.35, "albedo": (0.75, 0.25, 0.25), "checker": 0.15},
        {"type": "box", "min": (-2.5, 1.3, 0.0), "max": (-1.7, 2.5, 0.9), "albedo": (0.35, 0.6, 0.35), "checker": 0.25},
    ]
    return SceneSpec(primitives=prims)


@dataclass
class CorruptionSpec:
    """Monocular-prior failure model.

    ``scale`` None draws a global factor from ``scale_range`` (once per
    scene in :func:`make_scene`, per call in :func:`corrupt_prior`). The
    warp is multiplicative, ``1 + warp_amplitude * field`` with a smooth
    random field of the given wavelength (fraction of the image width).
    Blobs add a constant depth offset inside disks (radius as a fraction of
    the image width). ``noise_sigma`` is relative Gaussian noise.
    """

    scale: float | None = None
    scale_range: tuple = (0.85, 1.15)
    warp_amplitude: float = 0.2
    warp_wavelength: float = 0.6
    blobs: list | None = None  # explicit [(cx, cy, radius_px, offset)], overrides the random draw
    num_blobs: int = 3
    blob_radius: tuple = (0.1, 0.18)
    blob_offset: tuple = (0.4, 1.0)
    noise_sigma: float = 0.01

    @classmethod
    def identity(cls):
        return cls(scale=1.0, warp_amplitude=0.0, num_blobs=0, blobs=[], noise_sigma=0.0)


@dataclass
class DepthPrior:
    depth: np.ndarray
    uncertainty: np.ndarray | None = None
    hypotheses: np.ndarray | None = None  # (K, H, W)
    provenance: str = ""
    error_mask: np.ndarray | None = None  # bool, blob disks
    error_intensity: np.ndarray | None = None  # [0, 1], drives trajectory update rates
    injected: np.ndarray | None = None  # structured error (warp + blobs) in prior units
    scale: float = 1.0

    def __post_init__(self):
        if self.hypotheses is None:
            self.hypotheses = self.depth[None]


@dataclass
class View:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) z-depth, 0 = invalid
    pose: np.ndarray  # (4, 4) camera-to-world
    intrinsics: np.ndarray  # (3, 3)
    split: str = "train"
    prior: DepthPrior | None = None


@dataclass
class SceneDataset:
    views: list
    near: float
    far: float
    spec: dict = field(default_factory=dict)
    seed: int = 0

    def split(self, name):
        return [i for i, v in enumerate(self.views) if v.split == name]

    @property
    def train_ids(self):
        return self.split("train")

    @property
    def test_ids(self):
        return self.split("test")


# ------------------------------------------------------------------ cameras

def intrinsics_matrix(size, fov_deg):
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0, size / 2], [0, f, size / 2], [0, 0, 1]], dtype=np.float64)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise GenerationError("camera looks along the up axis")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def camera_rig(spec):
    poses = []
    for k in range(spec.num_views):
        a = 2 * math.pi * k / spec.num_views
        eye = (spec.lookat[0] + spec.radius * math.cos(a), spec.lookat[1] + spec.radius * math.sin(a), spec.height)
        poses.append(look_at(eye, spec.lookat))
    return poses


def pixel_rays(pose, K, size, pixels=None):
    """Unit world directions and per-ray z-per-unit-distance factors.

    ``pixels`` (N, 2) are (u, v) image coordinates; the default is every pixel
    center in row-major order.
    """
    if pixels is None:
        v, u = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
        pixels = np.stack([u.ravel(), v.ravel()], -1)
    pixels = np.asarray(pixels, dtype=np.float64)
    cam = np.stack([(pixels[:, 0] - K[0, 2]) / K[0, 0], (pixels[:, 1] - K[1, 2]) / K[1, 1], np.ones(len(pixels))], -1)
    norm = np.linalg.norm(cam, axis=-1)
    dirs = (cam / norm[:, None]) @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    return origins, dirs, 1.0 / norm  # z = t * (1 / norm)


def project(points, pose, K):
    """World points (N, 3) -> pixel coordinates (N, 2) and z-depth (N,)."""
    R, t = pose[:3, :3], pose[:3, 3]
    cam = (points - t) @ R
    z = cam[:, 2]
    uv = np.stack([K[0, 0] * cam[:, 0] / z + K[0, 2], K[1, 1] * cam[:, 1] / z + K[1, 2]], -1)
    return uv, z


def unproject(pixels, depth, pose, K):
    cam = np.stack([(pixels[:, 0] - K[0, 2]) / K[0, 0], (pixels[:, 1] - K[1, 2]) / K[1, 1], np.ones(len(pixels))], -1)
    return (cam * depth[:, None]) @ pose[:3, :3].T + pose[:3, 3]


# ------------------------------------------------------------------ tracing

def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (np.asarray(lo) - o) * inv
        t1 = (np.asarray(hi) - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    return tmin, tmax


def _hit_box(o, d, lo, hi):
    tmin, tmax = _slab(o, d, lo, hi)
    t_near, t_far = tmin.max(-1), tmax.min(-1)
    hit = (t_near <= t_far) & (t_near > HIT_EPS)
    axis = tmin.argmax(-1)
    normal = np.zeros_like(d)
    rows = np.arange(len(d))
    normal[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, t_near, np.inf), normal


def _hit_room(o, d, lo, hi):
    _, tmax = _slab(o, d, lo, hi)
    t = tmax.min(-1)
    axis = tmax.argmin(-1)
    normal = np.zeros_like(d)
    rows = np.arange(len(d))
    normal[rows, axis] = -np.sign(d[rows, axis])
    face = axis * 2 + (d[rows, axis] > 0)  # 0/1: -x/+x walls, 2/3: y walls, 4: floor, 5: ceiling
    return np.where(t > HIT_EPS, t, np.inf), normal, face


def _hit_sphere(o, d, center, radius):
    oc = o - np.asarray(center)
    b = (oc * d).sum(-1)
    c = (oc * oc).sum(-1) - radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > HIT_EPS, t0, np.where(t1 > HIT_EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    normal = (o + t[:, None] * d - np.asarray(center)) / radius
    return t, np.nan_to_num(normal)


def _hit_plane(o, d, point, normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((np.asarray(point) - o) @ n) / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > HIT_EPS), t, np.inf)
    facing = np.where(denom[:, None] < 0, n, -n)
    return t, facing


def _checker(points, cell):
    if not cell:
        return np.ones(len(points))
    idx = np.floor(points / cell).astype(np.int64).sum(-1)
    return 0.65 + 0.35 * (idx % 2)


def trace(spec, origins, dirs):
    """Nearest hit distance (N,), shaded color (N, 3) for unit-direction rays."""
    n = len(dirs)
    best = np.full(n, np.inf)
    albedo = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    cell = np.zeros(n)

    def take(t, nrm, alb, chk):
        closer = t < best
        best[closer] = t[closer]
        normal[closer] = nrm[closer]
        albedo[closer] = np.broadcast_to(np.asarray(alb, dtype=np.float64), (n, 3))[closer]
        cell[closer] = np.broadcast_to(chk, (n,))[closer]

    if spec.room_min is not None:
        t, nrm, face = _hit_room(origins, dirs, spec.room_min, spec.room_max)
        walls = np.asarray(spec.wall_albedo, dtype=np.float64)
        alb = np.where((face == 4)[:, None], spec.floor_albedo,
                       np.where((face == 5)[:, None], spec.ceiling_albedo, walls[np.minimum(face, 3)]))
        take(t, nrm, alb, np.where(face == 4, spec.floor_checker, 0.0))
    for p in spec.primitives:
        kind = p["type"]
        if kind == "box":
            t, nrm = _hit_box(origins, dirs, p["min"], p["max"])
        elif kind == "sphere":
            t, nrm = _hit_sphere(origins, dirs, p["center"], p["radius"])
        else:
            t, nrm = _hit_plane(origins, dirs, p["point"], p["normal"])
        take(t, nrm, p.get("albedo", (0.7, 0.7, 0.7)), float(p.get("checker", 0.0)))

    if not np.isfinite(best).all():
        raise GenerationError(f"{int((~np.isfinite(best)).sum())} rays hit no geometry (camera faces the void)")
    points = origins + best[:, None] * dirs
    tex = np.ones(n)
    for c in np.unique(cell):
        sel = cell == c
        tex[sel] = _checker(points[sel], c)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    diffuse = np.clip(normal @ light, 0, None)
    shade = spec.ambient + (1 - spec.ambient) * diffuse
    color = np.clip(albedo * (tex * shade)[:, None], 0, 1)
    return best, color


def _inside(spec, point):
    if spec.room_min is not None:
        lo, hi = np.asarray(spec.room_min), np.asarray(spec.room_max)
        if not ((point > lo).all() and (point < hi).all()):
            return False
    for p in spec.primitives:
        if p["type"] == "box" and (np.asarray(point) > p["min"]).all() and (np.asarray(point) < p["max"]).all():
            return False
        if p["type"] == "sphere" and np.linalg.norm(np.asarray(point) - p["center"]) < p["radius"]:
            return False
    return True


def render_gt(spec, pose, K=None):
    """Exact RGB (H, W, 3) and z-depth (H, W) for one camera."""
    K = intrinsics_matrix(spec.image_size, spec.fov_deg) if K is None else K
    if not _inside(spec, pose[:3, 3]):
        raise GenerationError("camera lies outside the room or inside an object")
    origins, dirs, z_per_t = pixel_rays(pose, K, spec.image_size)
    t, color = trace(spec, origins, dirs)
    s = spec.image_size
    depth = (t * z_per_t).reshape(s, s)
    if (depth <= spec.near).any():
        raise GenerationError("geometry closer than the near plane")
    return color.reshape(s, s, 3).astype(np.float32), depth


def trace_depth(spec, pose, K, pixels):
    """z-depth at arbitrary sub-pixel positions (for consistency checks)."""
    origins, dirs, z_per_t = pixel_rays(pose, K, spec.image_size, pixels)
    t, _ = trace(spec, origins, dirs)
    return t * z_per_t


# ------------------------------------------------------------------ priors

def _smooth_field(rng, size, wavelength):
    """Zero-mean, unit-peak random field with features ~``wavelength`` * size."""
    coarse = max(2, int(round(1 / max(wavelength, 1e-3))) + 2)
    grid = rng.standard_normal((coarse, coarse))
    img = Image.fromarray(grid.astype(np.float32), mode="F").resize((size, size), Image.BICUBIC)
    f = np.asarray(img, dtype=np.float64)
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _draw_blobs(rng, spec, size):
    if spec.blobs is not None:
        return [tuple(b) for b in spec.blobs]
    blobs = []
    for _ in range(spec.num_blobs):
        r = rng.uniform(*spec.blob_radius) * size
        cx, cy = rng.uniform(r, size - r, 2)
        off = rng.uniform(*spec.blob_offset) * rng.choice([-1.0, 1.0])
        blobs.append((cx, cy, r, off))
    return blobs


def corrupt_prior(gt_depth, spec=None, seed=0):
    """Corrupted z-depth prior plus its blob mask and error intensity."""
    spec = spec or CorruptionSpec()
    gt = np.asarray(gt_depth, dtype=np.float64)
    if not (gt > 0).all():
        raise InputError("ground-truth depth must be positive")
    rng = np.random.default_rng(seed)
    h, w = gt.shape
    scale = spec.scale if spec.scale is not None else float(rng.uniform(*spec.scale_range))
    warp = spec.warp_amplitude * _smooth_field(rng, max(h, w), spec.warp_wavelength)[:h, :w] if spec.warp_amplitude else 0.0
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    offset = np.zeros_like(gt)
    mask = np.zeros(gt.shape, dtype=bool)
    for cx, cy, r, off in _draw_blobs(rng, spec, w):
        disk = (u - cx) ** 2 + (v - cy) ** 2 <= r * r
        offset[disk] = off
        mask |= disk
    shaped = gt * (1 + warp) + offset
    noise = spec.noise_sigma * rng.standard_normal(gt.shape) if spec.noise_sigma else 0.0
    prior = scale * shaped * (1 + noise)
    if not (prior > 0).all():
        raise GenerationError("corruption drives depth non-positive")
    rel = np.abs(shaped - gt) / gt
    intensity = np.where(mask, 1.0, np.clip(rel / 0.25, 0, 1))
    provenance = f"scale={scale:.4f} warp={spec.warp_amplitude} blobs={int(mask.any())} noise={spec.noise_sigma}"
    return DepthPrior(depth=prior, provenance=provenance, error_mask=mask, error_intensity=intensity,
                      injected=scale * (shaped - gt), scale=scale)


def synth_trajectory(prior, error_mask, T=20, seed=0, base_rate=0.0, max_rate=0.95,
                     step_size=(0.02, 0.2), flip_gain=(0.3, 0.6), flip_noise=0.002):
    """Direct and mirrored denoising trajectories for one prior.

    Each pixel updates at each of the T transitions with probability
    ``base_rate + (max_rate - base_rate) * intensity``. The direct run ends
    exactly at the prior. The mirrored run is produced in mirrored image
    coordinates; its final estimate, un-mirrored, deviates from the prior by
    ``flip_gain`` times the prior's structured injected error (or a
    proxy from the intensity map for bare depth arrays) plus small
    independent noise.
    """
    if T < 2:
        raise InputError("trajectory needs T >= 2")
    z0 = np.asarray(prior.depth if isinstance(prior, DepthPrior) else prior, dtype=np.float64)
    intensity = np.clip(np.asarray(error_mask, dtype=np.float64), 0, 1)
    rng = np.random.default_rng(seed)
    rate = base_rate + (max_rate - base_rate) * intensity

    def walk(final, rate_map):
        steps = np.empty((T + 1,) + final.shape)
        steps[0] = final
        for t in range(1, T + 1):
            event = rng.random(final.shape) < rate_map
            delta = rng.uniform(*step_size, final.shape) * rng.choice([-1.0, 1.0], final.shape)
            steps[t] = steps[t - 1] + np.where(event, delta, 0.0)
        return steps

    direct = walk(z0, rate)
    gain = rng.uniform(*flip_gain) * rng.choice([-1.0, 1.0])
    if isinstance(prior, DepthPrior) and prior.injected is not None:
        deviation = gain * prior.injected
    else:
        deviation = gain * 0.25 * intensity * z0
    twin_final = z0 + deviation + flip_noise * rng.standard_normal(z0.shape)
    twin_final = np.maximum(twin_final, MIN_DEPTH)
    mirrored = walk(np.flip(twin_final, -1), np.flip(rate, -1))
    return DenoisingTrajectory(direct), DenoisingTrajectory(mirrored)


# ------------------------------------------------------------------ datasets

def _view_seed(seed, index, stream):
    return np.random.SeedSequence([int(seed), int(index), int(stream)])


def build_prior(gt_depth, corruption, seed, index, T=20, hypotheses=1):
    """Corrupted prior, its trajectories and the frozen uncertainty map."""
    prior = corrupt_prior(gt_depth, corruption, _view_seed(seed, index, 1))
    direct, mirrored = synth_trajectory(prior, prior.error_intensity, T, _view_seed(seed, index, 2))
    direct.source_image_id = index
    mirrored.source_image_id = index
    tau = default_tau(MAX_DEPTH, MIN_DEPTH)
    prior.uncertainty = trajectory_uncertainty(direct, mirrored, tau).values
    if hypotheses > 1:
        rng = np.random.default_rng(_view_seed(seed, index, 3))
        spread = 0.02 + 0.2 * prior.uncertainty
        stack = prior.depth[None] * (1 + spread[None] * rng.standard_normal((hypotheses - 1,) + prior.depth.shape))
        prior.hypotheses = np.concatenate([prior.depth[None], np.maximum(stack, MIN_DEPTH)])
    return prior, (direct, mirrored)


def make_scene(spec=None, seed=0, corruption=None, T=20, hypotheses=1, with_priors=True):
    """Render every view and attach priors to the training views.

    Returns ``(dataset, trajectories)`` where ``trajectories`` maps a training
    view index to its (direct, mirrored) pair.
    """
    spec = (spec or default_spec()).validate()
    corruption = corruption or CorruptionSpec()
    if corruption.scale is None:
        # one scale ambiguity for the whole scene, shared by every view's prior
        rng = np.random.default_rng(_view_seed(seed, 0, 0))
        corruption = replace(corruption, scale=float(rng.uniform(*corruption.scale_range)))
    K = intrinsics_matrix(spec.image_size, spec.fov_deg)
    views, trajectories = [], {}
    for i, pose in enumerate(camera_rig(spec)):
        rgb, depth = render_gt(spec, pose, K)
        split = "test" if i in spec.test_views else "train"
        view = View(rgb=rgb, depth=depth, pose=pose, intrinsics=K.copy(), split=split)
        if split == "train" and with_priors:
            view.prior, trajectories[i] = build_prior(depth, corruption, seed, i, T, hypotheses)
        views.append(view)
    dataset = SceneDataset(views=views, near=spec.near, far=spec.far, spec=spec.to_dict(), seed=seed)
    return dataset, trajectories


def _png_write(path, rgb):
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def save_dataset(dataset, root, trajectories=None):
    """Write the on-disk layout (scene.json, rgb/, depth/, prior/, uncert/, traj/, mask/)."""
    root = Path(root)
    try:
        for sub in ("rgb", "depth", "prior", "uncert", "traj", "mask"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    manifest = {
        "format": "emdnerf-scene/1",
        "seed": dataset.seed,
        "near": dataset.near,
        "far": dataset.far,
        "spec": dataset.spec,
        "views": [],
    }
    for i, v in enumerate(dataset.views):
        name = f"{i:04d}"
        _png_write(root / "rgb" / f"{name}.png", v.rgb)
        write_pfm(root / "depth" / f"{name}.pfm", v.depth)
        entry = {
            "index": i,
            "split": v.split,
            "pose": [float(x) for x in np.asarray(v.pose).reshape(-1)],
            "intrinsics": [float(x) for x in np.asarray(v.intrinsics).reshape(-1)],
        }
        if v.prior is not None:
            write_pfm(root / "prior" / f"{name}.pfm", v.prior.depth)
            write_pfm(root / "uncert" / f"{name}.pfm", v.prior.uncertainty)
            write_pfm(root / "mask" / f"{name}.pfm", v.prior.error_mask.astype(np.float32))
            for k, hyp in enumerate(v.prior.hypotheses[1:], start=1):
                write_pfm(root / "prior" / f"{name}_h{k:02d}.pfm", hyp)
            entry["prior"] = {"provenance": v.prior.provenance, "hypotheses": int(len(v.prior.hypotheses))}
        manifest["views"].append(entry)
    for i, (direct, mirrored) in (trajectories or {}).items():
        write_trajectory(root / "traj" / f"{i:04d}", direct, mirrored_dir=f"{i:04d}_m")
        write_trajectory(root / "traj" / f"{i:04d}_m", mirrored)
    (root / "scene.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(root):
    root = Path(root)
    path = root / "scene.json"
    if not path.is_file():
        raise DataError(f"no scene.json under {root}")
    try:
        manifest = json.loads(path.read_text())
        views = []
        for entry in manifest["views"]:
            name = f"{entry['index']:04d}"
            rgb = np.asarray(Image.open(root / "rgb" / f"{name}.png").convert("RGB"), dtype=np.float32) / 255.0
            depth = read_pfm(root / "depth" / f"{name}.pfm").astype(np.float64)
            prior = None
            if "prior" in entry:
                z0 = read_pfm(root / "prior" / f"{name}.pfm").astype(np.float64)
                hyps = [z0] + [read_pfm(root / "prior" / f"{name}_h{k:02d}.pfm").astype(np.float64)
                               for k in range(1, entry["prior"]["hypotheses"])]
                mask_path = root / "mask" / f"{name}.pfm"
                prior = DepthPrior(
                    depth=z0,
                    uncertainty=read_pfm(root / "uncert" / f"{name}.pfm").astype(np.float64),
                    hypotheses=np.stack(hyps),
                    provenance=entry["prior"].get("provenance", ""),
                    error_mask=read_pfm(mask_path) > 0.5 if mask_path.is_file() else None,
                )
            views.append(View(
                rgb=rgb,
                depth=depth,
                pose=np.asarray(entry["pose"], dtype=np.float64).reshape(4, 4),
                intrinsics=np.asarray(entry["intrinsics"], dtype=np.float64).reshape(3, 3),
                split=entry["split"],
                prior=prior,
            ))
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"malformed dataset under {root}: {exc}") from exc
    return SceneDataset(views=views, near=float(manifest["near"]), far=float(manifest["far"]),
                        spec=manifest.get("spec", {}), seed=int(manifest.get("seed", 0)))


def load_trajectories(root):
    return load_trajectory_pairs(Path(root) / "traj")
