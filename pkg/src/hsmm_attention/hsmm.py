"""Left-to-right, no-skip hidden semi-Markov model with Gaussian emissions and durations.

Every state is visited exactly once, in order, so a state sequence is a
composition of the ``T`` frames into ``K`` positive durations.  All dynamic
programming runs in the log domain on the autodiff tape, so posteriors are
differentiable with respect to every model parameter.

Frame and duration indices are 0-based in arrays: ``gamma[k, t]`` is the
occupancy of state ``k + 1`` at frame ``t + 1`` and ``gamma_d[k, t, d]`` is the
probability that state ``k + 1`` occupies exactly frames ``t - d + 1 .. t + 1``
(1-based), i.e. a segment of length ``d + 1`` ending at frame ``t + 1``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Value
from .core.numerics import (
    DEFAULT_VAR_FLOOR,
    GaussianParams,
    floored_log_variance,
    gaussian_log_density,
    gaussian_logpdf,
    log_sum_exp,
)

NEG_INF = -np.inf
ENUMERATION_BUDGET = 10**6


class InfeasibleError(ValueError):
    """The observation length cannot be explained by the chain."""


@dataclass
class HsmmParams:
    """Per-state Gaussian emission and duration parameters.

    Fields may be numpy arrays or tape :class:`Value` objects.  Variances are
    stored as raw log-variances; ``var_floor`` is applied when densities are
    evaluated.
    """

    emission_mean: Value | np.ndarray  # K x F
    emission_log_var: Value | np.ndarray  # K x F
    duration_mean: Value | np.ndarray  # K
    duration_log_var: Value | np.ndarray  # K
    d_max: int | None = None
    var_floor: float = DEFAULT_VAR_FLOOR

    @property
    def n_states(self) -> int:
        return int(np.shape(_data(self.emission_mean))[0])

    def resolved_d_max(self, n_frames: int) -> int:
        """``d_max`` or, when unset, the longest duration the chain can use."""
        if self.d_max is not None:
            return int(self.d_max)
        return max(1, n_frames - self.n_states + 1)

    @property
    def emission_variance(self) -> np.ndarray:
        return np.maximum(np.exp(_data(self.emission_log_var)), self.var_floor)

    @property
    def duration_variance(self) -> np.ndarray:
        return np.maximum(np.exp(_data(self.duration_log_var)), self.var_floor)

    def detached(self) -> "HsmmParams":
        return HsmmParams(
            *(np.array(_data(x)) for x in (self.emission_mean, self.emission_log_var,
                                           self.duration_mean, self.duration_log_var)),
            d_max=self.d_max, var_floor=self.var_floor,
        )

    def duration_params(self) -> list[GaussianParams]:
        means = _data(self.duration_mean)
        log_vars = _data(self.duration_log_var)
        return [GaussianParams(float(m), float(v), self.var_floor) for m, v in zip(means, log_vars)]


@dataclass(frozen=True)
class StateSequence:
    """A monotone segmentation given by per-state durations."""

    durations: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "durations", tuple(int(d) for d in self.durations))
        if not self.durations or min(self.durations) < 1:
            raise ValueError(f"durations must be positive integers, got {self.durations}")

    @property
    def n_frames(self) -> int:
        return sum(self.durations)

    @property
    def n_states(self) -> int:
        return len(self.durations)

    def labels(self) -> np.ndarray:
        """0-based state index for every frame."""
        return np.repeat(np.arange(self.n_states), self.durations)

    def boundaries(self) -> np.ndarray:
        """Cumulative segment end positions (the last one equals ``n_frames``)."""
        return np.cumsum(self.durations)

    def occupancy(self) -> np.ndarray:
        """One-hot ``K x T`` occupancy matrix."""
        gamma = np.zeros((self.n_states, self.n_frames))
        gamma[self.labels(), np.arange(self.n_frames)] = 1.0
        return gamma


@dataclass
class Posterior:
    gamma: np.ndarray  # K x T
    gamma_d: np.ndarray  # K x T x d_max
    log_evidence: float
    log_evidence_backward: float


class PosteriorGraph(NamedTuple):
    """Tape versions of the posterior quantities, used by the ELBO."""

    gamma: Value
    gamma_d: Value
    log_evidence: Value
    log_evidence_backward: Value
    d_max: int


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)


def check_feasible(n_states: int, n_frames: int, d_max: int) -> None:
    if n_states < 1 or d_max < 1:
        raise ValueError(f"need K >= 1 and d_max >= 1, got K={n_states}, d_max={d_max}")
    if not n_states <= n_frames <= n_states * d_max:
        raise InfeasibleError(
            f"T={n_frames} frames cannot be segmented into K={n_states} states "
            f"with durations in [1, {d_max}]"
        )


def resolve_d_max(policy, n_frames: int, n_states: int, duration_mean=None, duration_var=None) -> int:
    """Pick the duration cap for one utterance.

    ``policy`` is an int (fixed cap), ``"full"`` (no truncation: ``T - K + 1``)
    or ``"auto"`` (``ceil(max(mean + 5 sd))``, kept within the feasible range).
    """
    longest = max(1, n_frames - n_states + 1)
    if policy == "full" or policy is None:
        return longest
    if policy == "auto":
        mean = np.asarray(duration_mean, dtype=float)
        sd = np.sqrt(np.asarray(duration_var, dtype=float))
        cap = int(math.ceil(float(np.max(mean + 5.0 * sd))))
        return int(min(longest, max(cap, math.ceil(n_frames / n_states), 1)))
    if isinstance(policy, (int, np.integer)) and not isinstance(policy, bool):
        return int(policy)
    raise ValueError(f"unknown d_max policy {policy!r}")


# -- scores ---------------------------------------------------------------
def emission_log_likelihood(params: HsmmParams, obs: np.ndarray) -> Value:
    """``T x K`` matrix of ``log p(o_t | z_t = k)`` (diagonal Gaussian)."""
    obs = np.asarray(obs, dtype=np.float64)
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations must be finite")
    n_states, n_dims = np.shape(_data(params.emission_mean))
    if obs.ndim != 2 or obs.shape[1] != n_dims:
        raise ValueError(f"expected observations of shape (T, {n_dims}), got {obs.shape}")
    mean = ad.reshape(params.emission_mean, (1, n_states, n_dims))
    log_var = ad.reshape(floored_log_variance(params.emission_log_var, params.var_floor),
                         (1, n_states, n_dims))
    dens = gaussian_logpdf(obs[:, None, :], mean, log_var)
    return ad.vsum(dens, axis=2)


def duration_log_likelihood(mean, log_var, d_max: int, var_floor: float = DEFAULT_VAR_FLOOR) -> Value:
    """``K x d_max`` matrix of the Gaussian density evaluated at ``d = 1..d_max``.

    The density is not renormalised over the integer support.
    """
    n_states = np.shape(_data(mean))[0]
    durations = np.arange(1, d_max + 1, dtype=np.float64)[None, :]
    mu = ad.reshape(mean, (n_states, 1))
    lv = ad.reshape(floored_log_variance(log_var, var_floor), (n_states, 1))
    return gaussian_logpdf(durations, mu, lv)


def _index_tables(n_frames: int, d_max: int):
    ends = np.arange(n_frames + 1)[:, None]
    lengths = np.arange(1, d_max + 1)[None, :]
    starts = ends - lengths  # (T+1) x D
    valid = starts >= 0
    return ends, starts, valid


def segment_scores(params: HsmmParams, obs: np.ndarray, d_max: int) -> Value:
    """``K x (T+1) x D`` log-score of state k emitting the segment of length d+1
    that ends after frame t (``t = 0..T``); impossible segments are ``-inf``."""
    n_frames = len(obs)
    emis = emission_log_likelihood(params, obs)  # T x K
    prefix = np.tril(np.ones((n_frames + 1, n_frames)), k=-1)
    cum = ad.transpose(ad.matmul(prefix, emis))  # K x (T+1), cum[:, 0] = 0
    ends, starts, valid = _index_tables(n_frames, d_max)
    ends_b = np.broadcast_to(ends, starts.shape)
    span = ad.take(cum, (slice(None), ends_b)) - ad.take(cum, (slice(None), np.where(valid, starts, 0)))
    dur = duration_log_likelihood(params.duration_mean, params.duration_log_var, d_max, params.var_floor)
    mask = np.where(valid, 0.0, NEG_INF)
    n_states = params.n_states
    return span + ad.reshape(dur, (n_states, 1, d_max)) + mask


def _pad_neg_inf(v: Value) -> Value:
    pad = np.full(v.shape[:-1] + (1,), NEG_INF)
    return ad.concat([v, pad], axis=v.ndim - 1)


def _forward(seg: Value, n_states: int, n_frames: int, d_max: int) -> list[Value]:
    _, starts, valid = _index_tables(n_frames, d_max)
    gather = np.where(valid, starts, n_frames + 1)
    alpha = Value(np.concatenate([[0.0], np.full(n_frames, NEG_INF)]))
    alphas = [alpha]
    for k in range(n_states):
        cand = ad.take(_pad_neg_inf(alpha), gather) + ad.take(seg, k)
        alpha = ad.logsumexp(cand, axis=1)
        alphas.append(alpha)
    return alphas


def _backward(seg: Value, n_states: int, n_frames: int, d_max: int) -> list[Value]:
    starts = np.arange(n_frames + 1)[:, None]
    ends = starts + np.arange(1, d_max + 1)[None, :]
    valid = ends <= n_frames
    ends_c = np.where(valid, ends, 0)
    ends_g = np.where(valid, ends, n_frames + 1)
    cols = np.broadcast_to(np.arange(d_max)[None, :], ends.shape)
    beta = Value(np.concatenate([np.full(n_frames, NEG_INF), [0.0]]))
    betas = [beta]
    for k in reversed(range(n_states)):
        cand = ad.take(seg, (k, ends_c, cols)) + ad.take(_pad_neg_inf(beta), ends_g)
        beta = ad.logsumexp(cand, axis=1)
        betas.append(beta)
    betas.reverse()
    return betas


def log_evidence_graph(params: HsmmParams, obs: np.ndarray) -> Value:
    """Forward recursion only; returns ``log p(o)`` as a tape scalar."""
    obs = np.asarray(obs, dtype=np.float64)
    n_frames, n_states = len(obs), params.n_states
    d_max = params.resolved_d_max(n_frames)
    check_feasible(n_states, n_frames, d_max)
    seg = segment_scores(params, obs, d_max)
    return ad.take(_forward(seg, n_states, n_frames, d_max)[-1], n_frames)


def posterior_graph(params: HsmmParams, obs: np.ndarray) -> PosteriorGraph:
    """Generalized forward-backward on the tape."""
    obs = np.asarray(obs, dtype=np.float64)
    n_frames, n_states = len(obs), params.n_states
    d_max = params.resolved_d_max(n_frames)
    check_feasible(n_states, n_frames, d_max)
    seg = segment_scores(params, obs, d_max)
    alphas = _forward(seg, n_states, n_frames, d_max)
    betas = _backward(seg, n_states, n_frames, d_max)
    log_z = ad.take(alphas[-1], n_frames)
    log_z_back = ad.take(betas[0], 0)

    _, starts, valid = _index_tables(n_frames, d_max)
    gather = np.where(valid, starts, n_frames + 1)
    prev = ad.take(_pad_neg_inf(ad.stack(alphas[:-1])), (slice(None), gather))  # K x (T+1) x D
    after = ad.reshape(ad.stack(betas[1:]), (n_states, n_frames + 1, 1))
    log_seg_post = prev + seg + after - log_z
    gamma_d = ad.exp(ad.take(log_seg_post, (slice(None), slice(1, None))))  # K x T x D

    coverage = _coverage_matrix(n_frames, d_max)
    gamma = ad.matmul(ad.reshape(gamma_d, (n_states, n_frames * d_max)), coverage)
    return PosteriorGraph(gamma, gamma_d, log_z, log_z_back, d_max)


def _coverage_matrix(n_frames: int, d_max: int) -> np.ndarray:
    """0/1 map from (segment end, length) pairs to the frames they cover."""
    cov = np.zeros((n_frames, d_max, n_frames))
    for t in range(n_frames):
        for d in range(min(d_max, t + 1)):
            cov[t, d, t - d:t + 1] = 1.0
    return cov.reshape(n_frames * d_max, n_frames)


# -- public numeric API -------------------------------------------------
def log_likelihood(params: HsmmParams, obs: np.ndarray) -> float:
    return log_evidence_graph(params, obs).item()


def forward_backward(params: HsmmParams, obs: np.ndarray) -> Posterior:
    g = posterior_graph(params, obs)
    return Posterior(g.gamma.data.copy(), g.gamma_d.data.copy(),
                     g.log_evidence.item(), g.log_evidence_backward.item())


def iter_segmentations(n_frames: int, n_states: int, d_max: int) -> Iterator[tuple[int, ...]]:
    """All compositions of ``n_frames`` into ``n_states`` parts in ``[1, d_max]``."""
    if n_states == 1:
        if 1 <= n_frames <= d_max:
            yield (n_frames,)
        return
    for d in range(1, min(d_max, n_frames - n_states + 1) + 1):
        for rest in iter_segmentations(n_frames - d, n_states - 1, d_max):
            yield (d,) + rest


def count_segmentations(n_frames: int, n_states: int, d_max: int) -> int:
    # ways[k][t]: compositions of t into k parts
    ways = [[0] * (n_frames + 1) for _ in range(n_states + 1)]
    ways[0][0] = 1
    for k in range(1, n_states + 1):
        for t in range(1, n_frames + 1):
            ways[k][t] = sum(ways[k - 1][t - d] for d in range(1, min(d_max, t) + 1))
    return ways[n_states][n_frames]


def enumerate_posterior(params: HsmmParams, obs: np.ndarray) -> Posterior:
    """Exact posterior by listing every segmentation (test oracle).

    Scores are built from scalar densities, independently of the tape code.
    """
    obs = np.asarray(obs, dtype=np.float64)
    p = params.detached()
    n_frames, n_states = len(obs), p.n_states
    d_max = p.resolved_d_max(n_frames)
    check_feasible(n_states, n_frames, d_max)
    n_seg = count_segmentations(n_frames, n_states, d_max)
    if n_seg > ENUMERATION_BUDGET:
        raise ValueError(f"{n_seg} segmentations exceed the enumeration budget {ENUMERATION_BUDGET}")

    emis = np.array([
        [sum(gaussian_log_density(float(o[f]), GaussianParams(float(p.emission_mean[k, f]),
                                                              float(p.emission_log_var[k, f]),
                                                              p.var_floor))
             for f in range(obs.shape[1]))
         for k in range(n_states)]
        for o in obs
    ])
    dur_params = p.duration_params()

    scores, segs = [], []
    for durs in iter_segmentations(n_frames, n_states, d_max):
        labels = np.repeat(np.arange(n_states), durs)
        s = math.fsum(emis[np.arange(n_frames), labels])
        s += math.fsum(gaussian_log_density(float(d), dur_params[k]) for k, d in enumerate(durs))
        scores.append(s)
        segs.append(durs)
    log_z = log_sum_exp(scores)

    gamma = np.zeros((n_states, n_frames))
    gamma_d = np.zeros((n_states, n_frames, d_max))
    for s, durs in zip(scores, segs):
        w = math.exp(s - log_z)
        end = 0
        for k, d in enumerate(durs):
            gamma[k, end:end + d] += w
            end += d
            gamma_d[k, end - 1, d - 1] += w
    return Posterior(gamma, gamma_d, log_z, log_z)


def map_durations(duration_params: Sequence[GaussianParams], d_max: int) -> StateSequence:
    """Most likely duration per state under its Gaussian, restricted to ``1..d_max``.

    The density is unimodal, so this is the nearest integer to the mean,
    clamped; exact half-integer ties go to the shorter duration.
    """
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    durations = []
    for gp in duration_params:
        if not math.isfinite(gp.mean):
            raise ValueError(f"non-finite duration mean {gp.mean}")
        d = math.ceil(gp.mean - 0.5)
        durations.append(min(max(d, 1), d_max))
    return StateSequence(tuple(durations))
