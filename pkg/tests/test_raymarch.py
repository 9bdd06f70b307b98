import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from emdnerf.errors import InputError
from emdnerf.raymarch import (
    QuadratureSegments,
    RayBundle,
    compute_weights,
    positional_encode,
    render,
    render_color,
    render_depth,
    residual_transmittance,
    stratified_sample,
)


def bundle(n_rays, near, far):
    o = torch.zeros(n_rays, 3, dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64).expand(n_rays, 3)
    return RayBundle(o, d, near, far)


# ---------------------------------------------------------------- stratified_sample

def test_stratified_one_sample_per_bin():
    for seed in range(5):
        seg = stratified_sample(bundle(1, 0.0, 1.0), 4, rng=torch.Generator().manual_seed(seed))
        t = seg.distances[0].numpy()
        assert t.shape == (4,)
        for k in range(4):
            assert k / 4 <= t[k] < (k + 1) / 4


def test_stratified_degenerate_width():
    seg = stratified_sample(bundle(1, 2.0, 2.0001), 2, rng=torch.Generator().manual_seed(0))
    t = seg.distances[0].numpy()
    assert t[0] < t[1]
    assert 2.0 <= t[0] and t[1] <= 2.0001


def test_stratified_pooled_samples_are_uniform():
    reps, n = 100_000, 64
    seg = stratified_sample(bundle(reps, 1.0, 3.0), n, rng=torch.Generator().manual_seed(1))
    pooled = seg.distances.numpy().ravel()
    # subsample so the KS test has a usable power level rather than detecting float rounding
    pick = np.random.default_rng(0).choice(pooled.size, 200_000, replace=False)
    res = stats.kstest(pooled[pick], stats.uniform(loc=1.0, scale=2.0).cdf)
    assert res.pvalue > 0.01


def test_stratified_deterministic_per_seed():
    a = stratified_sample(bundle(3, 0.5, 4.0), 8, rng=torch.Generator().manual_seed(7)).distances
    b = stratified_sample(bundle(3, 0.5, 4.0), 8, rng=torch.Generator().manual_seed(7)).distances
    assert torch.equal(a, b)


def test_stratified_rejects_bad_inputs():
    with pytest.raises(InputError):
        stratified_sample(bundle(1, 0.0, 1.0), 1)
    with pytest.raises(InputError):
        stratified_sample(bundle(1, 0.0, math.inf), 4)
    with pytest.raises(InputError):
        stratified_sample(bundle(1, math.nan, 1.0), 4)


def test_segments_last_delta_runs_to_far():
    seg = QuadratureSegments.from_distances(torch.tensor([[1.0, 2.0, 4.0]], dtype=torch.float64), 0.5, 6.0)
    np.testing.assert_allclose(seg.deltas.numpy(), [[1.0, 2.0, 2.0]])
    with pytest.raises(InputError):
        QuadratureSegments.from_distances(torch.tensor([[1.0, 1.0]], dtype=torch.float64), 0.5, 2.0)


def test_bundle_validation():
    ok = bundle(2, 0.5, 2.0)
    ok.validate()
    bad = RayBundle(torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 2.0]]), 0.5, 2.0)
    with pytest.raises(InputError):
        bad.validate()
    with pytest.raises(InputError):
        bundle(1, 2.0, 1.0).validate()
    with pytest.raises(InputError):
        RayBundle(torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 1.0]]), 0.5, 2.0, pixel_ids=[5]).validate(num_pixels=4)


# ---------------------------------------------------------------- compute_weights

def test_weights_two_samples():
    w, T = compute_weights(torch.tensor([1.0, 2.0], dtype=torch.float64), torch.tensor([0.5, 0.5], dtype=torch.float64))
    exact = [1 - math.exp(-0.5), math.exp(-0.5) * (1 - math.exp(-1.0))]
    np.testing.assert_allclose(w.numpy(), exact, atol=1e-15)
    # the tabulated 0.383402 is the exact 0.3834005 with its last digit rounded up
    np.testing.assert_allclose(w.numpy(), [0.393469, 0.383402], atol=2e-6)
    np.testing.assert_allclose(T.numpy(), [1.0, 0.606531], atol=1e-6)


def test_weights_empty_space():
    sig = torch.zeros(3, dtype=torch.float64)
    deltas = torch.full((3,), 0.3, dtype=torch.float64)
    w, _ = compute_weights(sig, deltas)
    np.testing.assert_array_equal(w.numpy(), [0.0, 0.0, 0.0])
    assert residual_transmittance(sig, deltas).item() == 1.0


def test_weights_opaque_wall():
    w, _ = compute_weights(torch.tensor([1e6], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    np.testing.assert_allclose(w.numpy(), [1.0], atol=1e-9)


def test_weights_reject_negative_and_nonfinite():
    with pytest.raises(InputError):
        compute_weights(torch.tensor([-0.1, 1.0]), torch.tensor([0.5, 0.5]))
    with pytest.raises(InputError):
        compute_weights(torch.tensor([math.nan, 1.0]), torch.tensor([0.5, 0.5]))
    with pytest.raises(InputError):
        compute_weights(torch.tensor([1.0, 1.0, 1.0]), torch.tensor([0.5, 0.5]))


def test_conservation_and_monotone_transmittance_bulk():
    g = torch.Generator().manual_seed(0)
    sig = torch.rand(10_000, 32, generator=g, dtype=torch.float64) * 20
    deltas = torch.rand(10_000, 32, generator=g, dtype=torch.float64) * 0.2
    w, T = compute_weights(sig, deltas)
    total = w.sum(-1) + residual_transmittance(sig, deltas)
    assert (total - 1).abs().max().item() < 1e-5
    assert (T[:, 1:] <= T[:, :-1]).all()
    assert (T[:, 0] == 1).all()
    assert ((w >= 0) & (w <= 1)).all()


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 1e3), min_size=1, max_size=16),
    st.lists(st.floats(1e-4, 2.0), min_size=16, max_size=16),
)
def test_telescoping_identity(sigmas, deltas):
    sig = torch.tensor(sigmas, dtype=torch.float64)
    dl = torch.tensor(deltas[: len(sigmas)], dtype=torch.float64)
    w, T = compute_weights(sig, dl)
    np.testing.assert_allclose(w.sum().item(), 1 - math.exp(-(sig * dl).sum().item()), atol=1e-12)
    assert (T[1:] <= T[:-1]).all()


def test_weight_and_depth_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = 6
        t = np.sort(rng.uniform(0.5, 4.0, n))
        seg = QuadratureSegments.from_distances(torch.tensor(t), 0.5, 4.5)
        sig0 = rng.uniform(0.1, 3.0, n)

        def f(s):
            w, _ = compute_weights(torch.tensor(s), seg)
            return torch.cat([w, render_depth(w, seg.distances)[None]]).numpy()

        sig = torch.tensor(sig0, requires_grad=True)
        jac = torch.autograd.functional.jacobian(
            lambda s: torch.cat([compute_weights(s, seg)[0], render_depth(compute_weights(s, seg)[0], seg.distances)[None]]),
            sig,
        ).numpy()
        h = 1e-4
        fd = np.stack([(f(sig0 + h * e) - f(sig0 - h * e)) / (2 * h) for e in np.eye(n)], axis=1)
        rel = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4


# ---------------------------------------------------------------- render_color / render_depth

def test_render_color_examples():
    np.testing.assert_allclose(render_color([1.0], [[0.2, 0.4, 0.6]]).numpy(), [0.2, 0.4, 0.6])
    np.testing.assert_allclose(render_color([0.5, 0.5], [[1, 0, 0], [0, 1, 0]]).numpy(), [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(render_color([0.0, 0.0, 0.0], np.random.rand(3, 3)).numpy(), [0, 0, 0])
    with pytest.raises(InputError):
        render_color([0.5, 0.5], [[1, 0, 0]])


def test_render_depth_examples():
    assert render_depth([0.25, 0.75], [1.0, 3.0]).item() == pytest.approx(2.5)
    assert render_depth([1.0, 0.0], [1.7, 9.0]).item() == pytest.approx(1.7)
    assert render_depth([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]).item() == 0.0
    with pytest.raises(InputError):
        render_depth([1.0], [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 12), st.floats(0.01, 0.99), st.integers(0, 2**31 - 1))
def test_zero_density_sample_changes_nothing(n, where, frac, seed):
    # each sample owns [t_i, t_i+1), so a zero-density sample is neutral when it lands
    # before the first sample or inside a segment that already carries no density
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(1.5, 5.0, n))
    sig = rng.uniform(0, 4, n)
    colors = rng.uniform(0, 1, (n, 3))
    where = min(where, n)
    if where == 0:
        t_new = 1.0 + frac * (t[0] - 1.0)
    else:
        sig[where - 1] = 0.0
        hi = t[where] if where < n else 5.5
        t_new = t[where - 1] + frac * (hi - t[where - 1])
    base = render(torch.tensor(sig), torch.tensor(colors), QuadratureSegments.from_distances(torch.tensor(t), 1.0, 5.5))
    t2 = np.insert(t, where, t_new)
    sig2 = np.insert(sig, where, 0.0)
    c2 = np.insert(colors, where, rng.uniform(0, 1, 3), axis=0)
    more = render(torch.tensor(sig2), torch.tensor(c2), QuadratureSegments.from_distances(torch.tensor(t2), 1.0, 5.5))
    np.testing.assert_allclose(more.color.numpy(), base.color.numpy(), atol=1e-9)
    np.testing.assert_allclose(more.depth.numpy(), base.depth.numpy(), atol=1e-9)


def test_render_output_invariants():
    g = torch.Generator().manual_seed(2)
    seg = stratified_sample(bundle(50, 0.5, 5.0), 16, rng=g)
    sig = torch.rand(50, 16, generator=g, dtype=torch.float64) * 5
    out = render(sig, torch.rand(50, 16, 3, generator=g, dtype=torch.float64), seg)
    np.testing.assert_allclose((out.weights.sum(-1) + out.residual_transmittance).numpy(), 1.0, atol=1e-12)
    assert ((out.color >= 0) & (out.color <= 1)).all()
    assert ((out.depth >= 0) & (out.depth <= 5.0)).all()


# ---------------------------------------------------------------- positional_encode

def test_positional_encode_examples():
    np.testing.assert_allclose(positional_encode(0.0, 2).numpy(), [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(positional_encode(1.0, 1).numpy(), [0, -1], atol=1e-12)
    np.testing.assert_allclose(positional_encode(0.5, 2).numpy(), [1, 0, 0, -1], atol=1e-12)


def test_positional_encode_vector_length():
    enc = positional_encode(torch.zeros(5, 3, dtype=torch.float64), 4)
    assert enc.shape == (5, 24)
    with pytest.raises(InputError):
        positional_encode(0.0, 0)
