from dataclasses import replace
import math

import numpy as np
import pytest
import torch

from emdnerf.errors import ChecksumError, ConfigError, DivergenceError, InputError, NumericalError
from emdnerf.field import BitDropout, PriorScale, RadianceField, shifted_softplus
from emdnerf.scenesim import default_spec, make_scene
from emdnerf.trainer import (
    Pipeline,
    build_rayset,
    composite_loss,
    load_checkpoint,
    make_config,
    read_log,
    render_view,
    save_checkpoint,
    train,
    write_log,
)

TINY = dict(width=8, depth=2, pos_levels=2, dir_levels=1, n_coarse=8, n_fine=8, n_emd_samples=8, rays_per_batch=4,
            warmup_steps=0, dropout_p=0.0)


@pytest.fixture(scope="module")
def small_scene():
    spec = replace(default_spec(), image_size=16, num_views=4, test_views=(1,))
    return make_scene(spec, seed=0)[0]


def tiny_cfg(**kw):
    return make_config("desk", **{**TINY, **kw})


# ---------------------------------------------------------------- forward

def test_zero_field_is_constant():
    net = RadianceField(width=8, depth=3, pos_levels=2, dir_levels=1)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    pts = torch.randn(10, 3)
    dirs = torch.nn.functional.normalize(torch.randn(10, 3), dim=-1)
    with torch.no_grad():
        color, sigma = net.query(pts, dirs)
    np.testing.assert_allclose(sigma.numpy(), shifted_softplus(torch.tensor(0.0)).item(), rtol=1e-6)
    np.testing.assert_allclose(color.numpy(), 0.5)


def test_forward_ranges_and_determinism():
    torch.manual_seed(0)
    net = RadianceField(width=16, depth=4, pos_levels=3, dir_levels=2, skip=2)
    pts = torch.randn(50, 3) * 3
    dirs = torch.nn.functional.normalize(torch.randn(50, 3), dim=-1)
    c1, s1 = net.query(pts, dirs)
    c2, s2 = net.query(pts, dirs)
    assert torch.equal(c1, c2) and torch.equal(s1, s2)
    assert (s1 >= 0).all() and ((c1 >= 0) & (c1 <= 1)).all()


def test_forward_rejects_wrong_encoding_width():
    net = RadianceField(width=8, depth=2, pos_levels=2, dir_levels=1)
    with pytest.raises(InputError):
        net(torch.zeros(3, net.pos_dim + 1), torch.zeros(3, net.dir_dim))


def test_dropout_preserves_mean():
    drop = BitDropout(0.1, seed=0)
    h = torch.full((10_000, 4), 2.0, dtype=torch.float64)
    out = drop(h)
    keep = 1 - drop.p
    # kept units are scaled by 1/keep, so the mean equals the input up to binomial noise
    sd = 2.0 * math.sqrt(drop.p / keep) / math.sqrt(h.numel())
    assert abs(out.mean().item() - 2.0) < 3 * sd
    assert set(np.unique(out.numpy()).round(9)) <= {0.0, round(2.0 / keep, 9)}
    assert drop.p == pytest.approx(0.1, abs=1 / 65536)


def test_dropout_stream_is_seeded():
    a, b = BitDropout(0.3, seed=4), BitDropout(0.3, seed=4)
    h = torch.ones(64, 8)
    assert torch.equal(a(h), b(h))
    state = a.state()
    first = a(h)
    a.set_state(state)
    assert torch.equal(a(h), first)
    with pytest.raises(InputError):
        BitDropout(1.0, seed=0)


def test_prior_scale():
    s = PriorScale()
    assert s.value == 1.0
    with pytest.raises(InputError):
        PriorScale(0.0)


# ---------------------------------------------------------------- backward

def batch_of(scene, cfg, ids):
    rays = build_rayset(scene, dtype=torch.float64)
    return rays.take(ids)


def grads(pipe, rays, cfg):
    pipe.zero_grad(set_to_none=True)
    total, *_ = composite_loss(pipe, rays, cfg, deterministic=True, step=cfg.warmup_steps)
    total.backward()
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in pipe.named_parameters()}


def test_lambda_zero_scale_gradient_is_zero(small_scene):
    cfg = tiny_cfg(lam=0.0, loss="emd")
    torch.manual_seed(0)
    pipe = Pipeline(cfg).double()
    g = grads(pipe, batch_of(small_scene, cfg, [0, 50, 100, 150]), cfg)
    assert g["scale.s"].item() == 0.0


def test_lambda_zero_matches_photometric_only_bitwise(small_scene):
    rays = batch_of(small_scene, None, [3, 40, 77, 200])
    out = []
    for cfg in (tiny_cfg(lam=0.0, loss="emd", uncertainty=False), tiny_cfg(loss="none", uncertainty=False)):
        torch.manual_seed(0)
        out.append(grads(Pipeline(cfg).double(), rays, cfg))
    for name in out[0]:
        assert torch.equal(out[0][name], out[1][name]), name


def test_duplicate_ray_doubles_its_contribution(small_scene):
    cfg = tiny_cfg()
    torch.manual_seed(1)
    pipe = Pipeline(cfg).double()
    g1 = grads(pipe, batch_of(small_scene, cfg, [10]), cfg)
    g2 = grads(pipe, batch_of(small_scene, cfg, [20]), cfg)
    g112 = grads(pipe, batch_of(small_scene, cfg, [10, 10, 20]), cfg)
    for name in g1:
        np.testing.assert_allclose((3 * g112[name]).numpy(), (2 * g1[name] + g2[name]).numpy(), rtol=1e-10, atol=1e-14)


def fd_worst(pipe, rays, cfg, keep=lambda name: True, per_param=3):
    g = grads(pipe, rays, cfg)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in pipe.named_parameters():
        if not keep(name):
            continue
        flat = p.data.view(-1)
        for k in rng.choice(flat.numel(), min(per_param, flat.numel()), replace=False):
            old = flat[k].item()
            h = 1e-6 * max(1.0, abs(old))
            vals = []
            for v in (old + h, old - h):
                flat[k] = v
                with torch.no_grad():
                    vals.append(composite_loss(pipe, rays, cfg, deterministic=True, step=cfg.warmup_steps)[0].item())
            flat[k] = old
            fd = (vals[0] - vals[1]) / (2 * h)
            an = g[name].view(-1)[k].item()
            worst = max(worst, abs(an - fd) / max(abs(fd), abs(an), 1e-6))
    return worst


@pytest.mark.parametrize("loss,mode", [("emd", "exact"), ("emd", "sinkhorn"), ("l2", "exact"), ("l2h", "exact")])
def test_composite_gradient_matches_finite_differences(small_scene, loss, mode):
    cfg = tiny_cfg(n_fine=0, loss=loss, emd_mode=mode)
    torch.manual_seed(2)
    pipe = Pipeline(cfg).double()
    assert fd_worst(pipe, batch_of(small_scene, cfg, [5, 60, 130, 190]), cfg) < 1e-4


def test_fine_network_gradient_matches_finite_differences(small_scene):
    # fine sample positions are a stop-gradient function of the coarse weights,
    # so the oracle perturbs only parameters downstream of the resampling
    cfg = tiny_cfg()
    torch.manual_seed(2)
    pipe = Pipeline(cfg).double()
    rays = batch_of(small_scene, cfg, [5, 60, 130, 190])
    assert fd_worst(pipe, rays, cfg, keep=lambda n: not n.startswith("coarse.")) < 1e-4


# ---------------------------------------------------------------- train

def test_lr_schedule_exact():
    cfg = make_config("desk", steps=1000)
    assert cfg.lr_at(0) == 5e-4 and cfg.lr_at(799) == 5e-4
    assert cfg.lr_at(800) == 5e-5 and cfg.lr_at(999) == 5e-5


def test_config_validation():
    with pytest.raises(ConfigError):
        make_config("desk", lr=1e-5, lr_final=1e-4)
    with pytest.raises(ConfigError):
        make_config("desk", loss="kl")
    with pytest.raises(ConfigError):
        make_config("desk", bogus=1)
    with pytest.raises(ConfigError):
        make_config("nope")
    assert make_config("paper").rays_per_batch == 1024


def test_training_is_deterministic(small_scene):
    cfg = make_config("desk", steps=25, rays_per_batch=16, n_coarse=8, n_fine=8, n_emd_samples=8, warmup_steps=5)
    a = train(cfg, small_scene).log
    b = train(cfg, small_scene).log
    assert a == b


def test_emd_moves_prior_scale(small_scene):
    cfg = make_config("desk", steps=20, rays_per_batch=16, n_coarse=8, n_fine=8, n_emd_samples=8, warmup_steps=0)
    result = train(cfg, small_scene)
    assert result.pipeline.scale.value != 1.0
    assert result.log[-1][-1] != 1.0


def test_two_image_scene_photometric_drops():
    spec = replace(default_spec(), image_size=32, num_views=2, test_views=())
    scene, _ = make_scene(spec, seed=0)
    cfg = make_config("desk", steps=2000, lam=0.0, loss="none", rays_per_batch=16, n_coarse=12, n_fine=12)
    log = train(cfg, scene).log
    first = np.mean([r[1] for r in log[:50]])
    last = np.mean([r[1] for r in log[-50:]])
    assert last < 0.2 * first


def test_divergence_aborts_with_checkpoint(small_scene, tmp_path):
    cfg = make_config("desk", steps=200, rays_per_batch=16, n_coarse=8, n_fine=8, n_emd_samples=8, lr=1e3, lr_final=1e3)
    with pytest.raises((DivergenceError, NumericalError)) as info:
        train(cfg, small_scene, out_dir=tmp_path)
    if isinstance(info.value, DivergenceError):
        assert info.value.checkpoint_path.is_file()
        load_checkpoint(info.value.checkpoint_path)


def test_nan_gradient_is_diagnosed(small_scene):
    cfg = make_config("desk", steps=5, rays_per_batch=8, n_coarse=8, n_fine=8, warmup_steps=0)

    def poison(step, pipe, row):
        pipe.coarse.sigma_head.bias.register_hook(lambda g: g * float("nan"))

    with pytest.raises(NumericalError, match="coarse.sigma_head.bias"):
        train(cfg, small_scene, callback=poison)


# ---------------------------------------------------------------- rendering and persistence

def test_render_twice_identical_and_constant_field(small_scene):
    cfg = tiny_cfg()
    torch.manual_seed(3)
    pipe = Pipeline(cfg)
    v = small_scene.views[0]
    a = render_view(pipe, v.pose, v.intrinsics, 16, small_scene.near, small_scene.far, cfg)
    b = render_view(pipe, v.pose, v.intrinsics, 16, small_scene.near, small_scene.far, cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with torch.no_grad():
        for p in pipe.parameters():
            p.zero_()
    rgb, _ = render_view(pipe, v.pose, v.intrinsics, 16, small_scene.near, small_scene.far, cfg)
    assert np.ptp(rgb) < 1e-6


def test_checkpoint_round_trip_and_corruption(small_scene, tmp_path):
    cfg = make_config("desk", steps=3, rays_per_batch=8, n_coarse=8, n_fine=8)
    result = train(cfg, small_scene)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, result.pipeline, cfg, 3)
    pipe, cfg2, step = load_checkpoint(path)
    assert step == 3 and cfg2 == cfg
    for (n1, p1), (n2, p2) in zip(result.pipeline.state_dict().items(), pipe.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    header = path.read_bytes().split(b"\nend\n")[0].decode()
    assert "step 3" in header and f"config_hash {cfg.hash()}" in header and "prior_scale" in header
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_log_round_trip(small_scene, tmp_path):
    cfg = make_config("desk", steps=4, rays_per_batch=8, n_coarse=8, n_fine=8)
    log = train(cfg, small_scene).log
    write_log(tmp_path / "loss.csv", log)
    assert read_log(tmp_path / "loss.csv") == log
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,photo,depth,total,lr,scale"
