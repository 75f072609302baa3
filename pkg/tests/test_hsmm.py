import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsmm_attention import hsmm
from hsmm_attention.core import autodiff as ad
from hsmm_attention.core.numerics import GaussianParams, central_differences, gaussian_log_density
from hsmm_attention.hsmm import HsmmParams, InfeasibleError, StateSequence


def random_params(rng, n_states, n_dims=2, d_max=None):
    return HsmmParams(
        emission_mean=rng.normal(size=(n_states, n_dims)),
        emission_log_var=rng.normal(scale=0.5, size=(n_states, n_dims)),
        duration_mean=rng.normal(3.0, 1.5, size=n_states),
        duration_log_var=rng.normal(0.0, 0.5, size=n_states),
        d_max=d_max,
    )


def brute_log_likelihood(params, obs):
    """Direct sum over segmentations using scalar densities only."""
    p = params.detached()
    n_frames, n_states = len(obs), p.n_states
    d_max = p.resolved_d_max(n_frames)
    terms = []
    for durs in hsmm.iter_segmentations(n_frames, n_states, d_max):
        labels = np.repeat(np.arange(n_states), durs)
        s = 0.0
        for t, k in enumerate(labels):
            for f in range(obs.shape[1]):
                s += gaussian_log_density(obs[t, f], GaussianParams(p.emission_mean[k, f],
                                                                    p.emission_log_var[k, f]))
        for k, d in enumerate(durs):
            s += gaussian_log_density(d, GaussianParams(p.duration_mean[k], p.duration_log_var[k]))
        terms.append(s)
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))


@st.composite
def instances(draw, max_states=4, max_frames=12):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n_states = draw(st.integers(2, max_states))
    n_frames = draw(st.integers(n_states, max_frames))
    longest = n_frames - n_states + 1
    d_max = draw(st.integers(-(-n_frames // n_states), longest))
    return random_params(rng, n_states, d_max=d_max), rng.normal(size=(n_frames, 2))


class TestLogLikelihood:
    def test_single_state(self):
        rng = np.random.default_rng(0)
        p = random_params(rng, 1, d_max=10)
        obs = rng.normal(size=(6, 2))
        expected = sum(gaussian_log_density(obs[t, f], GaussianParams(p.emission_mean[0, f],
                                                                      p.emission_log_var[0, f]))
                       for t in range(6) for f in range(2))
        expected += gaussian_log_density(6.0, GaussianParams(p.duration_mean[0], p.duration_log_var[0]))
        assert hsmm.log_likelihood(p, obs) == pytest.approx(expected, abs=1e-10)

    def test_forced_unit_durations(self):
        rng = np.random.default_rng(1)
        p = random_params(rng, 4)
        obs = rng.normal(size=(4, 2))
        expected = sum(gaussian_log_density(obs[k, f], GaussianParams(p.emission_mean[k, f],
                                                                      p.emission_log_var[k, f]))
                       for k in range(4) for f in range(2))
        expected += sum(gaussian_log_density(1.0, GaussianParams(p.duration_mean[k], p.duration_log_var[k]))
                        for k in range(4))
        assert hsmm.log_likelihood(p, obs) == pytest.approx(expected, abs=1e-10)

    def test_two_states_three_frames(self):
        rng = np.random.default_rng(2)
        p = random_params(rng, 2, d_max=3)
        obs = rng.normal(size=(3, 2))
        assert list(hsmm.iter_segmentations(3, 2, 3)) == [(1, 2), (2, 1)]
        assert hsmm.log_likelihood(p, obs) == pytest.approx(brute_log_likelihood(p, obs), abs=1e-10)

    @pytest.mark.parametrize("n_frames,d_max", [(2, 4), (13, 4)])
    def test_infeasible_length(self, n_frames, d_max):
        p = random_params(np.random.default_rng(3), 3, d_max=d_max)
        with pytest.raises(InfeasibleError):
            hsmm.log_likelihood(p, np.zeros((n_frames, 2)))


class TestForwardBackward:
    def test_single_state(self):
        rng = np.random.default_rng(4)
        p = random_params(rng, 1, d_max=7)
        post = hsmm.forward_backward(p, rng.normal(size=(5, 2)))
        np.testing.assert_allclose(post.gamma, 1.0, atol=1e-12)
        expected = np.zeros((1, 5, 7))
        expected[0, 4, 4] = 1.0
        np.testing.assert_allclose(post.gamma_d, expected, atol=1e-12)

    def test_forced_unit_durations(self):
        rng = np.random.default_rng(5)
        p = random_params(rng, 5)
        post = hsmm.forward_backward(p, rng.normal(size=(5, 2)))
        np.testing.assert_allclose(post.gamma, np.eye(5), atol=1e-12)

    def test_two_states_four_frames_against_enumeration(self):
        rng = np.random.default_rng(6)
        p = random_params(rng, 2, d_max=3)
        obs = rng.normal(size=(4, 2))
        assert list(hsmm.iter_segmentations(4, 2, 3)) == [(1, 3), (2, 2), (3, 1)]
        fb, en = hsmm.forward_backward(p, obs), hsmm.enumerate_posterior(p, obs)
        np.testing.assert_allclose(fb.gamma, en.gamma, atol=1e-9)
        np.testing.assert_allclose(fb.gamma_d, en.gamma_d, atol=1e-9)

    def test_log_evidence_matches_log_likelihood(self):
        rng = np.random.default_rng(7)
        p = random_params(rng, 3)
        obs = rng.normal(size=(9, 2))
        assert hsmm.forward_backward(p, obs).log_evidence == hsmm.log_likelihood(p, obs)

    def test_extreme_scores_do_not_underflow(self):
        rng = np.random.default_rng(8)
        p = random_params(rng, 3)
        obs = rng.normal(scale=300.0, size=(10, 2))
        post = hsmm.forward_backward(p, obs)
        assert np.isfinite(post.log_evidence)
        np.testing.assert_allclose(post.gamma.sum(axis=0), 1.0, atol=1e-9)


class TestEnumeration:
    def test_segmentation_count(self):
        segs = list(hsmm.iter_segmentations(6, 3, 4))
        assert len(segs) == 10
        assert hsmm.count_segmentations(6, 3, 4) == 10
        assert all(sum(s) == 6 and max(s) <= 4 for s in segs)

    def test_single_state_identical(self):
        rng = np.random.default_rng(9)
        p = random_params(rng, 1, d_max=8)
        obs = rng.normal(size=(8, 2))
        fb, en = hsmm.forward_backward(p, obs), hsmm.enumerate_posterior(p, obs)
        np.testing.assert_allclose(fb.gamma, en.gamma, atol=1e-12)
        assert fb.log_evidence == pytest.approx(en.log_evidence, abs=1e-10)

    def test_budget(self):
        p = random_params(np.random.default_rng(10), 8)
        with pytest.raises(ValueError, match="budget"):
            hsmm.enumerate_posterior(p, np.zeros((60, 2)))


@settings(max_examples=150, deadline=None)
@given(instances())
def test_oracle_equivalence(instance):
    p, obs = instance
    fb, en = hsmm.forward_backward(p, obs), hsmm.enumerate_posterior(p, obs)
    assert np.max(np.abs(fb.gamma - en.gamma)) < 1e-9
    assert np.max(np.abs(fb.gamma_d - en.gamma_d)) < 1e-9
    assert abs(fb.log_evidence - en.log_evidence) < 1e-8


@settings(max_examples=150, deadline=None)
@given(instances(max_states=5, max_frames=20))
def test_posterior_invariants(instance):
    p, obs = instance
    post = hsmm.forward_backward(p, obs)
    n_states, n_frames = post.gamma.shape
    np.testing.assert_allclose(post.gamma.sum(axis=0), 1.0, atol=1e-9)
    np.testing.assert_allclose(post.gamma_d.sum(axis=(1, 2)), 1.0, atol=1e-9)
    assert np.all(post.gamma >= 0) and np.all(post.gamma <= 1 + 1e-12)
    # reachability of the no-skip chain (0-based: state k needs t >= k and t <= T - K + k)
    for k in range(n_states):
        assert np.all(post.gamma[k, :k] == 0)
        assert np.all(post.gamma[k, n_frames - n_states + k + 1:] == 0)
    # occupancy is the sum of the segments covering each frame
    rebuilt = np.zeros_like(post.gamma)
    for k, t, d in zip(*np.nonzero(post.gamma_d)):
        rebuilt[k, t - d:t + 1] += post.gamma_d[k, t, d]
    np.testing.assert_allclose(rebuilt, post.gamma, atol=1e-9)
    # expected state index moves forward in time
    position = (np.arange(n_states)[:, None] * post.gamma).sum(axis=0)
    assert np.all(np.diff(position) >= -1e-9)
    assert abs(post.log_evidence - post.log_evidence_backward) < 1e-8


def test_log_evidence_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    p = random_params(rng, 3, d_max=5)
    obs = rng.normal(size=(8, 2))
    shapes = [(3, 2), (3, 2), (3,), (3,)]
    sizes = [int(np.prod(s)) for s in shapes]
    point = np.concatenate([p.emission_mean.ravel(), p.emission_log_var.ravel(),
                            p.duration_mean, p.duration_log_var])

    def f(v):
        parts, off = [], 0
        for shape, size in zip(shapes, sizes):
            parts.append(ad.reshape(ad.take(v, slice(off, off + size)), shape))
            off += size
        return hsmm.log_evidence_graph(HsmmParams(*parts, d_max=5), obs)

    x = ad.param(point)
    ad.backward(f(x))
    fd = central_differences(f, point, 1e-5)
    np.testing.assert_allclose(x.grad, fd, rtol=1e-4, atol=1e-8)


def test_gamma_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    p = random_params(rng, 3)
    obs = rng.normal(size=(7, 2))
    weights = rng.normal(size=(3, 7))
    point = p.emission_mean.ravel()

    def f(v):
        q = HsmmParams(ad.reshape(v, (3, 2)), p.emission_log_var, p.duration_mean, p.duration_log_var)
        return ad.vsum(hsmm.posterior_graph(q, obs).gamma * weights)

    x = ad.param(point)
    ad.backward(f(x))
    np.testing.assert_allclose(x.grad, central_differences(f, point, 1e-5), rtol=1e-4, atol=1e-8)


class TestMapDurations:
    @pytest.mark.parametrize("mean,expected", [(3.2, 3), (0.2, 1), (2.5, 2), (3.5, 3), (3.51, 4), (40.0, 10)])
    def test_rounding_and_clamping(self, mean, expected):
        seq = hsmm.map_durations([GaussianParams(mean, 0.0)], d_max=10)
        assert seq.durations == (expected,)

    @given(st.floats(-5, 15), st.floats(-2, 2))
    def test_is_density_argmax(self, mean, log_var):
        gp = GaussianParams(mean, log_var)
        d = hsmm.map_durations([gp], d_max=10).durations[0]
        dens = [gaussian_log_density(float(c), gp) for c in range(1, 11)]
        assert dens[d - 1] == pytest.approx(max(dens), abs=1e-12)

    def test_total_length(self):
        seq = hsmm.map_durations([GaussianParams(2.0, 0.0)] * 3, d_max=10)
        assert seq.n_frames == 6


class TestStateSequence:
    def test_labels_and_occupancy(self):
        seq = StateSequence((2, 1, 3))
        np.testing.assert_array_equal(seq.labels(), [0, 0, 1, 2, 2, 2])
        np.testing.assert_array_equal(seq.boundaries(), [2, 3, 6])
        assert seq.occupancy().sum(axis=0).tolist() == [1.0] * 6

    def test_rejects_zero_duration(self):
        with pytest.raises(ValueError):
            StateSequence((2, 0))


def test_resolve_d_max_policies():
    assert hsmm.resolve_d_max("full", 20, 4) == 17
    assert hsmm.resolve_d_max(6, 20, 4) == 6
    # auto: ceil(max(mean + 5 sd)) = ceil(4 + 5) = 9
    assert hsmm.resolve_d_max("auto", 20, 4, [3.0, 4.0], [1.0, 1.0]) == 9
    # auto never makes the utterance infeasible
    assert hsmm.resolve_d_max("auto", 20, 4, [0.0], [0.01]) == 5
