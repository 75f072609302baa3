"""Evidence lower bound with HSMM posteriors as attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hsmm
from .core import autodiff as ad
from .core.autodiff import Value
from .datagen import Utterance
from .hsmm import PosteriorGraph
from .networks import DecoderNet, EncoderNet, PriorNet, context_vectors


@dataclass(frozen=True)
class ElboBreakdown:
    q_dec: float
    q_prior: float
    entropy: float
    total: float
    log_likelihood: float

    def as_dict(self) -> dict[str, float]:
        return {"q_dec": self.q_dec, "q_prior": self.q_prior, "entropy": self.entropy,
                "total": self.total}


@dataclass
class ElboGraph:
    """Tape handles for one utterance's ELBO."""

    q_dec: Value
    q_prior: Value
    entropy: Value
    total: Value
    posterior: PosteriorGraph

    @property
    def log_likelihood(self) -> Value:
        return self.posterior.log_evidence

    def breakdown(self) -> ElboBreakdown:
        return ElboBreakdown(self.q_dec.item(), self.q_prior.item(), self.entropy.item(),
                             self.total.item(), self.posterior.log_evidence.item())


def occupancy_entropy(gamma) -> Value:
    """Sum of per-frame marginal entropies ``-sum_t sum_k g log g``."""
    return -ad.vsum(ad.xlogx(gamma))


def prior_expectation(gamma_d, duration_loglik) -> Value:
    """``sum_{k,t,d} gamma_d[k,t,d] * log p(d | l_k)``."""
    k, _, d_max = ad.as_value(gamma_d).shape
    return ad.vsum(ad.mul(gamma_d, ad.reshape(duration_loglik, (k, 1, d_max))))


def compute_elbo(encoder: EncoderNet, decoder: DecoderNet, prior: PriorNet, utt: Utterance,
                 d_max="full", track_encoder: bool = True) -> ElboGraph:
    """Build ``Q_dec + Q_prior + H[z]`` for one utterance.

    With ``track_encoder=False`` the posterior is computed as a constant, so no
    gradient reaches the encoder (or a prior that shares its parameters).
    """
    def _posterior():
        params = encoder.encode(utt.units)
        params.d_max = hsmm.resolve_d_max(d_max, utt.n_frames, utt.n_units,
                                          params.duration_mean.data, params.duration_variance)
        return hsmm.posterior_graph(params, utt.frames)

    if track_encoder:
        post = _posterior()
    else:
        with ad.no_grad():
            post = _posterior()

    contexts = context_vectors(post.gamma, decoder.encode_units(utt.units))
    q_dec = decoder.decode_teacher_forced(contexts, utt.frames).log_prob

    def _prior_term():
        mean, log_var = prior(utt.units)
        dur_ll = hsmm.duration_log_likelihood(mean, log_var, post.d_max, prior.cfg.var_floor)
        return prior_expectation(post.gamma_d, dur_ll)

    if track_encoder:
        q_prior = _prior_term()
    else:
        with ad.no_grad():
            q_prior = _prior_term()
    entropy = occupancy_entropy(post.gamma)
    total = q_dec + q_prior + entropy
    return ElboGraph(q_dec, q_prior, entropy, total, post)


def segmentation_from_gamma(gamma: np.ndarray) -> hsmm.StateSequence:
    """Per-frame argmax segmentation of an occupancy matrix.

    If the argmax labels are not a valid left-to-right path using every state,
    fall back to the monotone path with the largest summed occupancy.
    """
    gamma = np.asarray(gamma)
    n_states, n_frames = gamma.shape
    labels = np.argmax(gamma, axis=0)
    steps = np.diff(labels)
    if labels[0] == 0 and labels[-1] == n_states - 1 and np.all((steps == 0) | (steps == 1)):
        return hsmm.StateSequence(tuple(np.bincount(labels, minlength=n_states)))
    return _best_monotone_path(gamma)


def _best_monotone_path(gamma: np.ndarray) -> hsmm.StateSequence:
    n_states, n_frames = gamma.shape
    score = np.full((n_states, n_frames), -np.inf)
    moved = np.zeros((n_states, n_frames), dtype=bool)
    score[0, 0] = gamma[0, 0]
    for t in range(1, n_frames):
        stay = score[:, t - 1]
        move = np.concatenate([[-np.inf], score[:-1, t - 1]])
        moved[:, t] = move > stay
        score[:, t] = np.maximum(stay, move) + gamma[:, t]
    labels = np.empty(n_frames, dtype=int)
    k = n_states - 1
    for t in range(n_frames - 1, -1, -1):
        labels[t] = k
        if t > 0 and moved[k, t]:
            k -= 1
    return hsmm.StateSequence(tuple(np.bincount(labels, minlength=n_states)))
