"""Alignment, synthesis and gradient checking on trained bundles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hsmm
from .core import autodiff as ad
from .core.numerics import GaussianParams, finite_difference_check
from .datagen import Utterance
from .elbo import compute_elbo, segmentation_from_gamma
from .networks import ModelBundle, NetworkConfig, context_vectors

SYNTH_D_MAX = 100


def align(bundle: ModelBundle, utt: Utterance, d_max="full") -> tuple[hsmm.Posterior, hsmm.StateSequence]:
    """Encoder posterior for one utterance and its argmax segmentation."""
    with ad.no_grad():
        params = bundle.encoder.encode(utt.units)
        params.d_max = hsmm.resolve_d_max(d_max, utt.n_frames, utt.n_units,
                                          params.duration_mean.data, params.duration_variance)
        post = hsmm.forward_backward(params, utt.frames)
    return post, segmentation_from_gamma(post.gamma)


def prior_durations(bundle: ModelBundle, units: np.ndarray) -> list[GaussianParams]:
    with ad.no_grad():
        mean, log_var = bundle.prior(units)
    floor = bundle.config.var_floor
    return [GaussianParams(float(m), float(v), floor) for m, v in zip(mean.data, log_var.data)]


def synthesize(bundle: ModelBundle, units: np.ndarray, d_max: int = SYNTH_D_MAX) -> tuple[np.ndarray, hsmm.StateSequence]:
    """MAP durations from the prior, hard attention from them, free-running decoding."""
    seq = hsmm.map_durations(prior_durations(bundle, units), d_max)
    with ad.no_grad():
        contexts = context_vectors(seq.occupancy(), bundle.decoder.encode_units(units))
        frames = bundle.decoder.decode_free_running(contexts)
    return frames, seq


@dataclass
class GroupCheck:
    group: str
    n_params: int
    max_rel_error: float


def random_instance(rng: np.random.Generator, n_states: int, n_frames: int,
                    unit_dim: int, frame_dim: int) -> Utterance:
    return Utterance("gradcheck", rng.normal(size=(n_states, unit_dim)),
                     rng.normal(size=(n_frames, frame_dim)))


def elbo_gradient_check(bundle: ModelBundle, utt: Utterance, groups=None, epsilon: float = 1e-5,
                        d_max="full") -> list[GroupCheck]:
    """Finite-difference check of the full ELBO against each parameter group."""
    out = []
    for group, names in bundle.param_groups().items():
        if groups is not None and group not in groups:
            continue

        def f(vec, names=names):
            with bundle.store.substitute(vec, names):
                return compute_elbo(bundle.encoder, bundle.decoder, bundle.prior, utt, d_max=d_max).total

        point = bundle.store.flat(names)
        out.append(GroupCheck(group, point.size, finite_difference_check(f, point, epsilon)))
    return out


def tiny_bundle(seed: int, unit_dim: int, frame_dim: int, hidden: int = 8, layers: int = 1,
                context_dim: int = 4, shared_prior: bool = True) -> ModelBundle:
    cfg = NetworkConfig(unit_dim=unit_dim, frame_dim=frame_dim, hidden=hidden, layers=layers,
                        context_dim=context_dim, shared_prior=shared_prior, seed=seed)
    bundle = ModelBundle.create(cfg)
    rng = np.random.default_rng([seed, 7])
    # non-zero biases so every coordinate carries a generic gradient
    for name, v in bundle.store.items():
        if ".b" in name:
            v.data = rng.normal(scale=0.3, size=v.shape)
    return bundle
