"""Coarse/fine radiance-field training with depth-prior guidance.

One step: draw a batch of training pixels, march the coarse network over
stratified samples, resample the fine network from the coarse termination
distribution, and minimize the uncertainty-weighted sum of photometric and
depth terms for both networks. All randomness comes from three seeded
streams (pixel choice, ray jitter, dropout bits), so a run is a pure
function of its config.
"""

from dataclasses import asdict, dataclass, fields
import csv
import hashlib
import io
import json
import math
import warnings
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumError, ConfigError, DataError, DivergenceError, InputError, NumericalError
from .metrics import evaluate_depths
from .field import BitDropout, PriorScale, RadianceField
from .objective import DEPTH_LOSSES, LossWeights, emd_depth_loss, l2_depth_loss, l2_hypothesis_loss, photometric_loss, total_loss
from .raydist import build_distribution, fine_resample, inverse_transform_sample, normalize_weights, stratified_quantiles
from .raymarch import RayBundle, compute_weights, render_color, render_depth, sample_points, stratified_sample
from .scenesim import pixel_rays
from .transport import TransportParams

LOG_COLUMNS = ("step", "photo", "depth", "total", "lr", "scale")
DIVERGENCE_LIMIT = 1e6
MIN_DEPTH = 1e-3  # rendered depths are clamped here before log metrics


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 8000
    rays_per_batch: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    n_emd_samples: int = 128
    lr: float = 5e-4
    lr_final: float = 5e-5
    lr_drop_fraction: float = 0.8
    weight_decay: float = 1e-6
    scale_lr: float = 1e-7
    dropout_p: float = 0.1
    lam: float = 0.007
    gamma: float = 1.0
    loss: str = "emd"
    emd_mode: str = "exact"
    uncertainty: bool = True
    warmup_steps: int = 0
    depth_networks: str = "both"  # both | fine
    emd_source: str = "fine"  # fine | own: distribution the EMD samples are drawn from
    width: int = 256
    depth: int = 8
    pos_levels: int = 10
    dir_levels: int = 4
    skip: int = 4
    bound: float = 3.0
    blur: float = 0.05
    sinkhorn_scaling: float = 0.5
    sinkhorn_max_iters: int = 100
    sinkhorn_tolerance: float = 1e-4
    ground_p: float = 1.0
    render_chunk: int = 4096

    def validate(self):
        counts = ("steps", "rays_per_batch", "n_coarse", "n_emd_samples", "width", "depth", "pos_levels", "dir_levels")
        for name in counts:
            value = getattr(self, name)
            if value < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.n_coarse < 2:
            raise ConfigError("n_coarse must be >= 2")
        if self.n_fine < 0 or self.warmup_steps < 0:
            raise ConfigError("n_fine and warmup_steps must be >= 0")
        if not 0 < self.lr_final <= self.lr:
            raise ConfigError("require 0 < lr_final <= lr")
        if not 0 <= self.lr_drop_fraction <= 1:
            raise ConfigError("lr_drop_fraction must lie in [0, 1]")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.loss not in DEPTH_LOSSES:
            raise ConfigError(f"loss must be one of {DEPTH_LOSSES}, got {self.loss!r}")
        if self.emd_mode not in ("exact", "sinkhorn"):
            raise ConfigError(f"emd_mode must be exact or sinkhorn, got {self.emd_mode!r}")
        if self.depth_networks not in ("both", "fine"):
            raise ConfigError("depth_networks must be both or fine")
        if self.emd_source not in ("own", "fine"):
            raise ConfigError("emd_source must be own or fine")
        if self.lam < 0 or self.gamma < 0 or self.weight_decay < 0 or self.scale_lr < 0:
            raise ConfigError("loss weights, weight decay and scale_lr must be nonnegative")
        try:
            self.transport_params()
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def transport_params(self):
        return TransportParams(blur=self.blur, scaling=self.sinkhorn_scaling, max_iters=self.sinkhorn_max_iters,
                               tolerance=self.sinkhorn_tolerance, p=self.ground_p)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, step):
        return self.lr if step < self.lr_drop_fraction * self.steps else self.lr_final

    def uses_depth(self, step):
        return self.loss != "none" and self.lam > 0 and step >= self.warmup_steps


PAPER_PROFILE = {}  # the dataclass defaults are the full-scale settings

DESK_PROFILE = dict(
    steps=8000,
    rays_per_batch=32,
    n_coarse=16,
    n_fine=16,
    n_emd_samples=16,
    width=64,
    pos_levels=6,
    dir_levels=2,
    lam=0.05,
    scale_lr=1e-5,
    warmup_steps=200,
    emd_source="own",
)

PROFILES = {"paper": PAPER_PROFILE, "desk": DESK_PROFILE}


def make_config(profile="desk", **overrides):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**{**PROFILES[profile], **overrides}).validate()


# ------------------------------------------------------------------ data

@dataclass
class RaySet:
    """Every training pixel flattened into one table (float32 tensors)."""

    origins: torch.Tensor
    directions: torch.Tensor
    rgb: torch.Tensor
    prior: torch.Tensor  # (N, K) prior hypotheses as ray distances
    u: torch.Tensor
    z_per_t: torch.Tensor
    gt_depth: torch.Tensor  # z-depth
    blob: torch.Tensor  # bool
    view: torch.Tensor
    pixel: torch.Tensor
    near: float
    far: float

    def __len__(self):
        return self.origins.shape[0]

    def take(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.int64)
        return RaySet(*(getattr(self, f.name)[idx] if f.name not in ("near", "far") else getattr(self, f.name)
                        for f in fields(self)))


def build_rayset(dataset, view_ids=None, dtype=torch.float32):
    view_ids = dataset.train_ids if view_ids is None else list(view_ids)
    if not view_ids:
        raise DataError("dataset has no training views")
    cols = {k: [] for k in ("o", "d", "rgb", "prior", "u", "zt", "gt", "blob", "view", "pix")}
    for i in view_ids:
        v = dataset.views[i]
        if v.prior is None:
            raise DataError(f"training view {i} has no depth prior")
        size = v.rgb.shape[0]
        o, d, z_per_t = pixel_rays(v.pose, v.intrinsics, size)
        hyp = np.asarray(v.prior.hypotheses, dtype=np.float64).reshape(len(v.prior.hypotheses), -1).T
        cols["o"].append(o)
        cols["d"].append(d)
        cols["rgb"].append(v.rgb.reshape(-1, 3))
        cols["prior"].append(hyp / z_per_t[:, None])
        unc = v.prior.uncertainty if v.prior.uncertainty is not None else np.zeros(v.depth.shape)
        cols["u"].append(np.clip(unc.reshape(-1), 0, 1))
        cols["zt"].append(z_per_t)
        cols["gt"].append(v.depth.reshape(-1))
        mask = v.prior.error_mask if v.prior.error_mask is not None else np.zeros(v.depth.shape, bool)
        cols["blob"].append(mask.reshape(-1))
        cols["view"].append(np.full(size * size, i))
        cols["pix"].append(np.arange(size * size))
    t = lambda k: torch.from_numpy(np.concatenate(cols[k]).astype(np.float64)).to(dtype)
    return RaySet(
        origins=t("o"), directions=t("d"), rgb=t("rgb"), prior=t("prior"), u=t("u"), z_per_t=t("zt"),
        gt_depth=t("gt"), blob=torch.from_numpy(np.concatenate(cols["blob"])),
        view=torch.from_numpy(np.concatenate(cols["view"])), pixel=torch.from_numpy(np.concatenate(cols["pix"])),
        near=float(dataset.near), far=float(dataset.far),
    )


# ------------------------------------------------------------------ model

class Pipeline(torch.nn.Module):
    """Coarse network, optional fine network and the learnable prior scale."""

    def __init__(self, cfg):
        super().__init__()
        arch = dict(width=cfg.width, depth=cfg.depth, pos_levels=cfg.pos_levels, dir_levels=cfg.dir_levels,
                    skip=cfg.skip, bound=cfg.bound)
        self.coarse = RadianceField(**arch)
        self.fine = RadianceField(**arch) if cfg.n_fine > 0 else None
        self.scale = PriorScale(1.0)

    def networks(self):
        return [self.coarse] + ([self.fine] if self.fine is not None else [])

    def field_parameters(self):
        return [p for net in self.networks() for p in net.parameters()]


def _march(net, bundle, segments, dropout):
    points = sample_points(bundle, segments)
    dirs = bundle.directions[:, None, :].expand_as(points)
    color, sigma = net.query(points, dirs, dropout)
    weights, _ = compute_weights(sigma, segments)
    return weights, render_color(weights, color), render_depth(weights, segments.distances)


def forward_rays(pipe, bundle, cfg, gen=None, dropouts=(None, None), deterministic=False):
    """Render a bundle through coarse and fine networks.

    Returns a list of per-network dicts with weights, segments, color and depth.
    """
    # float32 jitter can produce ties, so segment monotonicity is not re-checked here
    seg_c = stratified_sample(bundle, cfg.n_coarse, rng=gen, jitter=not deterministic, check=False)
    w_c, c_c, d_c = _march(pipe.coarse, bundle, seg_c, dropouts[0])
    out = [dict(weights=w_c, segments=seg_c, color=c_c, depth=d_c)]
    if pipe.fine is not None:
        probs, _ = normalize_weights(w_c.detach())
        dist = build_distribution(probs, seg_c)
        seg_f = fine_resample(dist, seg_c, cfg.n_fine, rng=gen, deterministic=deterministic, check=False)
        w_f, c_f, d_f = _march(pipe.fine, bundle, seg_f, dropouts[1])
        out.append(dict(weights=w_f, segments=seg_f, color=c_f, depth=d_f))
    return out


def _termination_samples(render, cfg, gen, deterministic):
    probs, empty = normalize_weights(render["weights"])
    dist = build_distribution(probs, render["segments"], empty)
    q = stratified_quantiles(probs.shape[:-1], cfg.n_emd_samples, rng=gen, dtype=probs.dtype, jitter=not deterministic)
    return inverse_transform_sample(dist, q), empty


def depth_terms(pipe, renders, rays, cfg, gen=None, deterministic=False):
    """Per-network per-ray depth losses and empty-ray flags."""
    prior = pipe.scale(rays.prior)  # (R, K) ray distances
    terms = []
    supervised = range(len(renders)) if cfg.depth_networks == "both" else [len(renders) - 1]
    for k, render in enumerate(renders):
        if k not in supervised:
            terms.append((None, None))
            continue
        if cfg.loss == "l2":
            _, empty = normalize_weights(render["weights"])
            terms.append((l2_depth_loss(render["depth"], prior[:, 0]), empty))
            continue
        source = renders[-1] if cfg.emd_source == "fine" else render
        samples, empty = _termination_samples(source, cfg, gen, deterministic)
        if cfg.loss == "l2h":
            terms.append((l2_hypothesis_loss(samples, prior[:, 0]), empty))
        else:
            terms.append((emd_depth_loss(samples, prior, cfg.emd_mode, cfg.transport_params()), empty))
    return terms


def composite_loss(pipe, rays, cfg, gen=None, dropouts=(None, None), step=None, deterministic=False):
    """Sum over networks of the uncertainty-weighted objective for one batch.

    Returns ``(total, photo, depth, empty_fraction)`` with
    ``total = photo + lam * depth``.
    """
    bundle = RayBundle(rays.origins, rays.directions, rays.near, rays.far)
    renders = forward_rays(pipe, bundle, cfg, gen, dropouts, deterministic)
    use_depth = cfg.uses_depth(step if step is not None else cfg.warmup_steps)
    terms = depth_terms(pipe, renders, rays, cfg, gen, deterministic) if use_depth else [(None, None)] * len(renders)
    u = rays.u if cfg.uncertainty else None
    weights = LossWeights(cfg.lam, cfg.gamma)
    photo = depth = 0.0
    empty_frac = 0.0
    for render, (d, empty) in zip(renders, terms):
        parts = total_loss(photometric_loss(render["color"], rays.rgb), d, u, weights, empty)
        photo = photo + parts.photo
        depth = depth + parts.depth
        empty_frac = max(empty_frac, parts.empty_ray_fraction)
    return photo + cfg.lam * depth, photo, depth, empty_frac


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    pipeline: Pipeline
    log: list
    config: TrainConfig


class _Streams:
    """The three independent random streams of a run."""

    def __init__(self, seed):
        ss = np.random.SeedSequence(seed)
        pick, jitter, drop_c, drop_f = ss.spawn(4)
        self.pick = np.random.Generator(np.random.PCG64(pick))
        self.gen = torch.Generator().manual_seed(int(jitter.generate_state(1, np.uint64)[0] >> np.uint64(1)))
        self.drop_seeds = (drop_c, drop_f)

    def snapshot(self, dropouts):
        return self.gen.get_state(), [d.state() if d else None for d in dropouts]

    def restore(self, snap, dropouts):
        self.gen.set_state(snap[0])
        for d, s in zip(dropouts, snap[1]):
            if d:
                d.set_state(s)


def make_optimizer(pipe, cfg):
    return torch.optim.AdamW(
        [
            {"params": pipe.field_parameters(), "lr": cfg.lr, "weight_decay": cfg.weight_decay},
            {"params": list(pipe.scale.parameters()), "lr": cfg.scale_lr, "weight_decay": 0.0},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
        fused=True,
    )


def _diagnose_nan(pipe, rays, cfg, streams, snap, dropouts, step):
    streams.restore(snap, dropouts)
    pipe.zero_grad(set_to_none=True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # anomaly mode announces itself
            with torch.autograd.detect_anomaly(check_nan=True):
                total, *_ = composite_loss(pipe, rays, cfg, streams.gen, dropouts, step)
                total.backward()
    except RuntimeError as exc:
        first = str(exc).splitlines()[0]
        return f"non-finite gradient at step {step}: {first}"
    bad = [n for n, p in pipe.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    return f"non-finite gradient at step {step} in {', '.join(bad) or 'unknown parameters'}"


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def train(cfg, dataset=None, rays=None, out_dir=None, callback=None):
    """Optimize a fresh pipeline; returns a :class:`TrainResult`.

    Either ``dataset`` or a prebuilt ``rays`` table must be given. The loss
    log holds one row per step (the step's loss before its update).
    """
    cfg.validate()
    if rays is None:
        if dataset is None:
            raise DataError("train needs a dataset or a ray table")
        rays = build_rayset(dataset)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        torch.manual_seed(cfg.seed)
        pipe = Pipeline(cfg)
        streams = _Streams(cfg.seed)
        dropouts = tuple(BitDropout(cfg.dropout_p, s) if cfg.dropout_p > 0 else None for s in streams.drop_seeds)
        opt = make_optimizer(pipe, cfg)
        log = []
        for step in range(cfg.steps):
            lr = cfg.lr_at(step)
            opt.param_groups[0]["lr"] = lr
            idx = streams.pick.integers(0, len(rays), cfg.rays_per_batch)
            batch = rays.take(idx)
            snap = streams.snapshot(dropouts)
            total, photo, depth, _ = composite_loss(pipe, batch, cfg, streams.gen, dropouts, step)
            t = float(total.detach())
            if not math.isfinite(t) or t > DIVERGENCE_LIMIT:
                path = None
                if out_dir is not None:
                    path = Path(out_dir) / "diverged.ckpt"
                    save_checkpoint(path, pipe, cfg, step)
                raise DivergenceError(f"loss {t:.3e} at step {step}", step=step, checkpoint_path=path)
            opt.zero_grad(set_to_none=True)
            total.backward()
            grads = [p.grad for p in pipe.parameters() if p.grad is not None]
            if not math.isfinite(float(torch.nn.utils.get_total_norm(grads, foreach=True))):
                raise NumericalError(_diagnose_nan(pipe, batch, cfg, streams, snap, dropouts, step))
            log.append((step, _scalar(photo), _scalar(depth), t, lr, pipe.scale.value))
            opt.step()
            if callback is not None:
                callback(step, pipe, log[-1])
    finally:
        torch.set_num_threads(threads)
    return TrainResult(pipeline=pipe, log=log, config=cfg)


def write_log(path, log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_COLUMNS:
        raise DataError(f"{path} is not a loss log")
    return [(int(r[0]), *map(float, r[1:])) for r in rows[1:]]


# ------------------------------------------------------------------ rendering

@torch.no_grad()
def render_view(pipe, pose, intrinsics, size, near, far, cfg):
    """Full-image render with dropout off: RGB (H, W, 3) and z-depth (H, W)."""
    o, d, z_per_t = pixel_rays(np.asarray(pose), np.asarray(intrinsics), size)
    dtype = next(pipe.parameters()).dtype
    o, d = torch.from_numpy(o).to(dtype), torch.from_numpy(d).to(dtype)
    colors, depths = [], []
    for s in range(0, len(o), cfg.render_chunk):
        bundle = RayBundle(o[s:s + cfg.render_chunk], d[s:s + cfg.render_chunk], near, far)
        last = forward_rays(pipe, bundle, cfg, deterministic=True)[-1]
        colors.append(last["color"])
        depths.append(last["depth"])
    rgb = torch.cat(colors).numpy().reshape(size, size, 3)
    depth = torch.cat(depths).numpy().astype(np.float64) * z_per_t
    return rgb, depth.reshape(size, size)


def render_views(pipe, cfg, dataset, view_ids):
    """``{view id: (rgb, z-depth)}`` for the given views."""
    out = {}
    for i in view_ids:
        v = dataset.views[i]
        out[i] = render_view(pipe, v.pose, v.intrinsics, v.rgb.shape[0], dataset.near, dataset.far, cfg)
    return out


def evaluate_pipeline(pipe, cfg, dataset, split="test", renders=None):
    """Depth and PSNR metrics over one split (``test`` or ``train``)."""
    ids = dataset.test_ids if split == "test" else dataset.train_ids
    if not ids:
        raise DataError(f"dataset has no {split} views")
    renders = renders if renders is not None else render_views(pipe, cfg, dataset, ids)
    views = [dataset.views[i] for i in ids]
    return evaluate_depths(
        [v.depth for v in views], [np.maximum(renders[i][1], MIN_DEPTH) for i in ids],
        rgbs=[renders[i][0] for i in ids], gt_rgbs=[v.rgb for v in views],
    )


def blob_region_rmse(dataset, renders):
    """Depth RMSE pooled over the prior's blob-error pixels of the rendered views."""
    sq = []
    for i, (_, depth) in renders.items():
        prior = dataset.views[i].prior
        if prior is None or prior.error_mask is None:
            continue
        m = prior.error_mask & (dataset.views[i].depth > 0)
        sq.append((depth[m] - dataset.views[i].depth[m]) ** 2)
    if not sq or not sum(len(x) for x in sq):
        return float("nan")
    return float(np.sqrt(np.concatenate(sq).mean()))


# ------------------------------------------------------------------ checkpoints

MAGIC = "EMDNERF-CHECKPOINT"
VERSION = 1


def save_checkpoint(path, pipe, cfg, step):
    state = pipe.state_dict()
    payload = io.BytesIO()
    table = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append(f"tensor {name} {arr.dtype.name} {'x'.join(map(str, arr.shape)) or '-'} {payload.tell()} {len(raw)}")
        payload.write(raw)
    blob = payload.getvalue()
    header = [
        f"{MAGIC} {VERSION}",
        f"step {step}",
        f"config_hash {cfg.hash()}",
        f"prior_scale {pipe.scale.value!r}",
        f"config {json.dumps(cfg.to_dict(), sort_keys=True)}",
        f"sha256 {hashlib.sha256(blob).hexdigest()}",
        *table,
        "end",
    ]
    Path(path).write_bytes(("\n".join(header) + "\n").encode() + blob)


def load_checkpoint(path):
    """Returns ``(pipeline, config, step)``; raises ChecksumError on corruption."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise ChecksumError(f"{path} is not a checkpoint (bad header)")
    lines = raw[:cut].decode("utf-8", errors="replace").split("\n")
    blob = raw[cut + len(marker):]
    meta, tensors = {}, []
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        if key == "tensor":
            tensors.append(value.split(" "))
        else:
            meta[key] = value
    if lines[0] != f"{MAGIC} {VERSION}":
        raise DataError(f"unsupported checkpoint version {lines[0]!r}")
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    try:
        cfg = TrainConfig(**json.loads(meta["config"])).validate()
        state = {}
        for name, dtype, shape, offset, nbytes in tensors:
            shape = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            arr = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"), count=int(nbytes) // np.dtype(dtype).itemsize,
                                offset=int(offset)).reshape(shape)
            state[name] = torch.from_numpy(arr.astype(np.dtype(dtype)))
        pipe = Pipeline(cfg)
        pipe.load_state_dict(state)
    except (KeyError, ValueError, RuntimeError, ConfigError) as exc:
        raise ChecksumError(f"{path}: unreadable checkpoint contents ({exc})") from exc
    return pipe, cfg, int(meta.get("step", 0))
