import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcut.crf import CrfParams, Features, energy
from deepcut.grabcut import (GRABCUT_PRESETS, GrabCutConfig, Gmm1D, gmm_fit, gmm_nll,
                             grabcut_segment)
from deepcut.driver import dice
from deepcut.phantom import PhantomSpec, generate_corpus
from deepcut.sampling import normalize

PHANTOM_CRF = CrfParams(1.0, 1.0, 3.0, 0.5, 1.0, 5)


def direct_nll(model, x):
    # log-sum-exp by hand: far tails underflow the plain density sum
    logs = [math.log(w) - 0.5 * math.log(2 * math.pi * v) - (x - m) ** 2 / (2 * v)
            for w, m, v in zip(model.weights, model.means, model.variances)]
    top = max(logs)
    return -(top + math.log(sum(math.exp(t - top) for t in logs)))


# mixture fitting ------------------------------------------------------------------------

def em_steps_monotone(model) -> bool:
    """Every EM step raises the log-likelihood; steps that also pruned a
    component change the model order and are exempt."""
    h = np.array(model.loglik_history)
    ok = np.diff(h) >= -1e-12 * np.maximum(1.0, np.abs(h[1:]))
    pruned = np.zeros(len(ok), bool)
    pruned[[s - 1 for s in model.prune_steps]] = True
    return bool(np.all(ok | pruned))


def assert_monotone(model):
    assert em_steps_monotone(model), np.diff(model.loglik_history).min()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5))
def test_loglik_never_decreases(seed, k):
    rng = np.random.default_rng(seed)
    n_clusters = int(rng.integers(1, 4))
    x = np.concatenate([rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 2), rng.integers(20, 200))
                        for _ in range(n_clusters)])
    model = gmm_fit(x, k, rng)
    assert_monotone(model)
    assert abs(model.weights.sum() - 1) < 1e-9
    assert np.all(model.variances >= 1e-6)


def test_two_cluster_recovery():
    rng = np.random.default_rng(42)
    x = np.concatenate([rng.normal(0, 0.1, 500), rng.normal(10, 0.1, 500)])
    model = gmm_fit(x, 2, np.random.default_rng(0))
    np.testing.assert_allclose(np.sort(model.means), [0, 10], atol=0.05)
    np.testing.assert_allclose(model.weights, 0.5, atol=0.01)
    assert_monotone(model)


def test_constant_samples():
    model = gmm_fit(np.full(50, 3.5), 1)
    assert model.means.tolist() == [3.5] and model.weights.tolist() == [1.0]
    assert model.variances.tolist() == [1e-6]
    # more components than distinct values collapses to one
    assert gmm_fit(np.full(50, 3.5), 5).n_components == 1


def test_floor_hugging_component_is_pruned():
    rng = np.random.default_rng(3)
    x = np.concatenate([np.zeros(30), rng.normal(5, 1, 300)])
    model = gmm_fit(x, 3, np.random.default_rng(1), max_iter=200)
    assert model.prune_steps
    assert abs(model.weights.sum() - 1) < 1e-9
    assert model.n_components == 1 or np.all(model.variances > 1e-6)
    assert_monotone(model)


def test_hard_init_labels():
    x = np.array([0.0, 0.1, 0.2, 5.0, 5.1, 5.2])
    model = gmm_fit(x, 2, init_labels=[0, 0, 0, 1, 1, 1], max_iter=1)
    np.testing.assert_allclose(np.sort(model.means), [0.1, 5.1], atol=1e-3)


def test_empty_input():
    with pytest.raises(ValueError):
        gmm_fit(np.array([]), 2)


def test_nll_peak_and_bound():
    m = Gmm1D(np.array([1.0]), np.array([2.0]), np.array([0.25]))
    assert gmm_nll(m, 2.0) == pytest.approx(-math.log(1 / math.sqrt(2 * math.pi * 0.25)), rel=1e-14)
    means, variances = np.array([-1.0, 0.0, 4.0]), np.array([0.5, 1.0, 2.0])
    for weights in (np.full(3, 1 / 3), np.array([0.2, 0.5, 0.3])):
        mix = Gmm1D(weights, means, variances)
        for x in np.linspace(-5, 8, 27):
            comp = np.array([gmm_nll(Gmm1D(np.array([1.0]), means[i:i + 1], variances[i:i + 1]), x)
                             for i in range(3)])
            # equal weights: min component NLL + log Kc; general: min_k(NLL_k - log w_k)
            assert gmm_nll(mix, x) <= np.min(comp - np.log(weights)) + 1e-12
            if np.allclose(weights, 1 / 3):
                assert gmm_nll(mix, x) <= comp.min() + math.log(3) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_nll_matches_direct_density(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    w = rng.dirichlet(np.ones(k))
    m = Gmm1D(w, rng.normal(0, 3, k), rng.uniform(0.05, 4, k))
    x = rng.normal(0, 3, 10)
    got = gmm_nll(m, x)
    for xi, gi in zip(x, got):
        assert gi == pytest.approx(direct_nll(m, xi), abs=1e-10)


# segmentation ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def phantom():
    s = generate_corpus(PhantomSpec(n_subjects=1, rng_seed=11))[0]
    return s, normalize(s.volume, s.regions)


def test_presets():
    assert GRABCUT_PRESETS["brain"].gamma == 2.5 and GRABCUT_PRESETS["lungs"].gamma == 1.0
    assert GrabCutConfig().n_components == 5


def test_phantom_dice(phantom):
    s, vol = phantom
    res = grabcut_segment(vol, s.regions, PHANTOM_CRF, GrabCutConfig(gamma=1.0), np.random.default_rng(0))
    assert dice(res.labels, s.truth) >= 0.95
    assert not res.degenerate
    assert not np.any((res.labels == 1) & ~s.regions.box_mask)
    assert np.all(res.labels[s.regions.halo_mask] == 0)


def test_deterministic(phantom):
    s, vol = phantom
    cfg = GrabCutConfig(gamma=1.0)
    a = grabcut_segment(vol, s.regions, PHANTOM_CRF, cfg, np.random.default_rng(5))
    b = grabcut_segment(vol, s.regions, PHANTOM_CRF, cfg, np.random.default_rng(5))
    assert np.array_equal(a.labels, b.labels) and a.iterations == b.iterations


def test_gamma_zero_is_likelihood_ratio(phantom):
    s, vol = phantom
    cfg = GrabCutConfig(gamma=0.0, max_iters=1)
    res = grabcut_segment(vol, s.regions, PHANTOM_CRF, cfg, np.random.default_rng(2))
    box, halo = s.regions.box_mask, s.regions.halo_mask
    x = vol.data[box].astype(np.float64)
    expect = gmm_nll(res.bg_model, x) > gmm_nll(res.fg_model, x)
    assert np.array_equal(res.labels[box] == 1, expect)
    assert np.all(res.labels[halo] == 0)


def test_gamma_scaling_equals_omega_scaling():
    rng = np.random.default_rng(8)
    feats = Features([(0, y, x) for y in range(4) for x in range(4)], rng.normal(size=16))
    u = rng.uniform(0, 3, (16, 2))
    labels = rng.integers(0, 2, 16)
    base = CrfParams(0.7, 0.4, 2.0, 1.0, 1.0)
    for c in (0.5, 2.5, 7.0):
        direct = replace(base, omega1=base.omega1 * c, omega2=base.omega2 * c)
        assert energy(labels, u, feats, base.scaled(c)) == energy(labels, u, feats, direct)


def test_as_preseg(phantom):
    s, vol = phantom
    res = grabcut_segment(vol, s.regions, PHANTOM_CRF, GrabCutConfig(gamma=1.0), np.random.default_rng(0))
    pre = res.as_preseg(s.regions)
    pre.check()
    assert np.array_equal(pre.fg, res.labels == 1)
    assert np.array_equal(pre.fg | pre.bg, s.regions.box_mask)
