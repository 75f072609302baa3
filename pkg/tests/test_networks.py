import math

import numpy as np
import pytest

from hsmm_attention import formats
from hsmm_attention.core import autodiff as ad
from hsmm_attention.core.numerics import finite_difference_check
from hsmm_attention.networks import ModelBundle, NetworkConfig, ParamStore, context_vectors

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def small_bundle(shared=True, seed=0, **kw):
    cfg = NetworkConfig(unit_dim=4, frame_dim=3, hidden=6, layers=1, context_dim=5,
                        shared_prior=shared, seed=seed, **kw)
    return ModelBundle.create(cfg)


def zero_all(bundle):
    for _, v in bundle.store.items():
        v.data = np.zeros_like(v.data)


class TestEncoder:
    def test_zero_weights_give_standard_parameters(self):
        b = small_bundle()
        zero_all(b)
        p = b.encoder.encode(np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_array_equal(p.emission_mean.data, 0.0)
        np.testing.assert_array_equal(p.emission_log_var.data, 0.0)
        np.testing.assert_array_equal(p.duration_mean.data, 0.0)

    def test_identical_units_give_identical_rows(self):
        b = small_bundle()
        row = np.random.default_rng(1).normal(size=4)
        p = b.encoder.encode(np.tile(row, (5, 1)))
        for arr in (p.emission_mean.data, p.emission_log_var.data):
            assert np.all(arr == arr[0])
        assert np.all(p.duration_mean.data == p.duration_mean.data[0])

    def test_variance_respects_floor(self):
        b = small_bundle(var_floor=1e-4)
        rng = np.random.default_rng(2)
        for _, v in b.store.items():
            v.data = rng.normal(scale=5.0, size=v.shape)
        p = b.encoder.encode(rng.normal(scale=10.0, size=(1000, 4)))
        assert np.all(np.exp(p.emission_log_var.data) >= 1e-4 * (1 - 1e-12))
        assert np.all(np.exp(p.duration_log_var.data) >= 1e-4 * (1 - 1e-12))

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError, match="columns"):
            small_bundle().encoder.encode(np.zeros((3, 5)))

    def test_permutation_equivariance(self):
        b = small_bundle()
        units = np.random.default_rng(3).normal(size=(4, 4))
        perm = np.array([2, 0, 3, 1])
        a, c = b.encoder.encode(units), b.encoder.encode(units[perm])
        np.testing.assert_allclose(c.emission_mean.data, a.emission_mean.data[perm], atol=1e-14)
        np.testing.assert_allclose(c.duration_mean.data, a.duration_mean.data[perm], atol=1e-14)


class TestContextVectors:
    def test_one_hot_selects_rows(self):
        enc = np.arange(6.0).reshape(3, 2)
        gamma = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        out = context_vectors(gamma, enc).data
        np.testing.assert_array_equal(out, enc[[0, 1, 1, 2]])

    def test_uniform_gives_mean(self):
        enc = np.random.default_rng(4).normal(size=(4, 3))
        out = context_vectors(np.full((4, 2), 0.25), enc).data
        np.testing.assert_allclose(out, np.tile(enc.mean(axis=0), (2, 1)), atol=1e-14)

    def test_linear_in_gamma(self):
        rng = np.random.default_rng(5)
        enc = rng.normal(size=(3, 2))
        g1 = rng.dirichlet(np.ones(3), size=5).T
        g2 = rng.dirichlet(np.ones(3), size=5).T
        mix = context_vectors(0.3 * g1 + 0.7 * g2, enc).data
        parts = 0.3 * context_vectors(g1, enc).data + 0.7 * context_vectors(g2, enc).data
        np.testing.assert_allclose(mix, parts, atol=1e-14)

    def test_unnormalized_columns_rejected(self):
        with pytest.raises(ValueError, match="sum to one"):
            context_vectors(np.full((2, 3), 0.6), np.zeros((2, 2)))


class TestDecoder:
    def test_teacher_forced_at_standard_output(self):
        b = small_bundle()
        zero_all(b)
        T, F = 5, 3
        ctx = np.zeros((T, 5))
        out = b.decoder.decode_teacher_forced(ctx, np.zeros((T, F)))
        assert out.log_prob.item() == pytest.approx(-T * F * HALF_LOG_2PI, abs=1e-12)
        assert out.log_prob.item() == pytest.approx(-T * F * 0.918939, abs=1e-4)

    def test_doubling_variance_at_the_mean(self):
        b = small_bundle()
        zero_all(b)
        T, F = 4, 3
        core_bias = b.store[f"decoder.core.b{b.config.layers}"]
        base = b.decoder.decode_teacher_forced(np.zeros((T, 5)), np.zeros((T, F))).log_prob.item()
        core_bias.data = np.concatenate([np.zeros(F), np.full(F, math.log(2.0))])
        doubled = b.decoder.decode_teacher_forced(np.zeros((T, 5)), np.zeros((T, F))).log_prob.item()
        assert base - doubled == pytest.approx(T * F * math.log(2.0) / 2, abs=1e-12)

    def test_unequal_lengths_rejected(self):
        with pytest.raises(ValueError):
            small_bundle().decoder.decode_teacher_forced(np.zeros((3, 5)), np.zeros((4, 3)))

    def test_non_finite_targets_rejected(self):
        targets = np.zeros((2, 3))
        targets[1, 1] = np.nan
        with pytest.raises(ValueError):
            small_bundle().decoder.decode_teacher_forced(np.zeros((2, 5)), targets)

    def test_gradient_matches_finite_differences(self):
        b = small_bundle(seed=6)
        rng = np.random.default_rng(6)
        ctx, targets = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
        names = b.decoder.param_names

        def f(vec):
            with b.store.substitute(vec, names):
                return b.decoder.decode_teacher_forced(ctx, targets).log_prob

        assert finite_difference_check(f, b.store.flat(names)) < 1e-4

    def test_free_running_single_frame(self):
        b = small_bundle(seed=7)
        ctx = np.random.default_rng(7).normal(size=(1, 5))
        frames = b.decoder.decode_free_running(ctx)
        mean, _ = b.decoder.frame_params(ctx, np.zeros((1, 3)))
        assert frames.shape == (1, 3)
        np.testing.assert_array_equal(frames, mean.data)

    def test_free_running_feeds_back_means(self):
        b = small_bundle(seed=8)
        ctx = np.random.default_rng(8).normal(size=(3, 5))
        frames = b.decoder.decode_free_running(ctx)
        # teacher forcing on its own output reproduces the same means
        out = b.decoder.decode_teacher_forced(ctx, frames)
        np.testing.assert_allclose(out.mean.data, frames, atol=1e-13)


class TestPrior:
    def test_shared_prior_uses_encoder_storage(self):
        b = small_bundle(shared=True)
        assert b.prior.param_names == b.encoder.trunk.param_names + b.encoder.duration.param_names
        assert b.prior.head is b.encoder.duration
        assert not any(n.startswith("prior.") for n in b.store.names())
        units = np.random.default_rng(9).normal(size=(3, 4))
        mean, log_var = b.prior(units)
        enc = b.encoder.encode(units)
        np.testing.assert_array_equal(mean.data, enc.duration_mean.data)
        np.testing.assert_array_equal(log_var.data, enc.duration_log_var.data)

    def test_separate_prior_has_own_parameters(self):
        b = small_bundle(shared=False)
        assert all(n.startswith("prior.") for n in b.prior.param_names)
        assert set(b.prior.param_names).isdisjoint(b.encoder.param_names)


class TestParamStore:
    def test_duplicate_name(self):
        s = ParamStore()
        s.create("a", np.zeros(2))
        with pytest.raises(KeyError):
            s.create("a", np.zeros(2))

    def test_load_checks_shapes_and_names(self):
        s = ParamStore()
        s.create("a", np.zeros(2))
        with pytest.raises(ValueError):
            s.load({"a": np.zeros(3)})
        with pytest.raises(KeyError):
            s.load({"b": np.zeros(2)})

    def test_substitute_restores_leaves(self):
        s = ParamStore()
        leaf = s.create("a", np.ones(3))
        with s.substitute(ad.param(np.arange(3.0)), ["a"]):
            np.testing.assert_array_equal(s["a"].data, [0.0, 1.0, 2.0])
        assert s["a"] is leaf


class TestCheckpoint:
    @pytest.mark.parametrize("shared", [True, False])
    def test_round_trip_is_bit_exact(self, tmp_path, shared):
        b = small_bundle(shared=shared, seed=10)
        rng = np.random.default_rng(10)
        for _, v in b.store.items():
            v.data = rng.normal(size=v.shape) * 10.0 ** rng.integers(-8, 8)
        path = tmp_path / "ckpt.json"
        formats.save_checkpoint(path, b)
        loaded, _ = formats.load_checkpoint(path)
        assert loaded.store.names() == b.store.names()
        for name, v in b.store.items():
            assert loaded.store[name].data.tobytes() == v.data.tobytes()
        formats.save_checkpoint(tmp_path / "again.json", loaded)
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_unknown_version_rejected(self):
        doc = formats.checkpoint_dict(small_bundle())
        doc["format_version"] = 99
        with pytest.raises(formats.FormatError):
            formats.bundle_from_dict(doc)
