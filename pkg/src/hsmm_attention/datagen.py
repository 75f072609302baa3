"""Synthetic paired unit/frame corpora with known segmentations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hsmm import StateSequence


@dataclass
class Utterance:
    id: str
    units: np.ndarray  # K x F_l
    frames: np.ndarray  # T x F_o
    true_durations: tuple[int, ...] | None = None

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.units.ndim != 2 or self.frames.ndim != 2 or len(self.units) < 1:
            raise ValueError(f"{self.id}: units and frames must be non-empty matrices")
        if not (np.all(np.isfinite(self.units)) and np.all(np.isfinite(self.frames))):
            raise ValueError(f"{self.id}: non-finite feature values")
        if self.true_durations is not None:
            self.true_durations = tuple(int(d) for d in self.true_durations)
            if len(self.true_durations) != len(self.units) or sum(self.true_durations) != len(self.frames):
                raise ValueError(f"{self.id}: true durations inconsistent with K={len(self.units)}, "
                                 f"T={len(self.frames)}")

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def truth(self) -> StateSequence | None:
        return None if self.true_durations is None else StateSequence(self.true_durations)


@dataclass
class GenSpec:
    """Generator settings.

    ``duration_mean``/``duration_std`` may be scalars or one value per symbol.
    Target vectors are drawn uniformly in ``[-1, 1]^frame_dim`` with pairwise
    distance at least ``target_separation``.
    """

    seed: int
    vocab_size: int = 5
    frame_dim: int = 4
    duration_mean: float | Sequence[float] = 4.0
    duration_std: float | Sequence[float] = 1.0
    d_max_gen: int = 8
    noise_std: float = 0.1
    min_units: int = 3
    max_units: int = 6
    target_separation: float = 1.0
    no_adjacent_repeats: bool = True

    @property
    def unit_dim(self) -> int:
        return self.vocab_size + 1

    def validate(self) -> None:
        if self.vocab_size < 1 or self.frame_dim < 1 or self.d_max_gen < 1:
            raise ValueError("vocab_size, frame_dim and d_max_gen must be positive")
        if not 1 <= self.min_units <= self.max_units:
            raise ValueError("need 1 <= min_units <= max_units")
        if self.noise_std < 0 or np.any(np.asarray(self.duration_std) < 0):
            raise ValueError("standard deviations must be non-negative")
        if self.no_adjacent_repeats and self.vocab_size < 2 and self.max_units > 1:
            raise ValueError("no_adjacent_repeats needs at least two symbols")

    def per_symbol(self, value) -> np.ndarray:
        arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (self.vocab_size,))
        return arr.copy()


def symbol_targets(spec: GenSpec) -> np.ndarray:
    """``V x F_o`` target vector per symbol (depends only on the seed)."""
    rng = np.random.default_rng([spec.seed, 1])
    for _ in range(10_000):
        targets = rng.uniform(-1.0, 1.0, size=(spec.vocab_size, spec.frame_dim))
        diffs = targets[:, None, :] - targets[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if spec.vocab_size < 2 or dist.min() >= spec.target_separation:
            return targets
    raise ValueError("could not place targets with the requested separation")


def unit_features(symbols: Sequence[int], vocab_size: int) -> np.ndarray:
    """One-hot symbol identity plus the unit's relative position in ``[0, 1]``."""
    k = len(symbols)
    feats = np.zeros((k, vocab_size + 1))
    feats[np.arange(k), symbols] = 1.0
    feats[:, -1] = np.arange(k) / max(k - 1, 1)
    return feats


def symbols_from_units(units: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.argmax(np.asarray(units)[:, :vocab_size], axis=1)


def sample_durations(spec: GenSpec, symbols: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    mean = spec.per_symbol(spec.duration_mean)[list(symbols)]
    std = spec.per_symbol(spec.duration_std)[list(symbols)]
    raw = np.rint(mean + std * rng.standard_normal(len(symbols)))
    return np.clip(raw, 1, spec.d_max_gen).astype(int)


def generate_utterance(spec: GenSpec, index: int, targets: np.ndarray | None = None) -> Utterance:
    targets = symbol_targets(spec) if targets is None else targets
    rng = np.random.default_rng([spec.seed, 0, index])
    k = int(rng.integers(spec.min_units, spec.max_units + 1))
    symbols: list[int] = []
    for _ in range(k):
        choices = [v for v in range(spec.vocab_size)
                   if not (spec.no_adjacent_repeats and symbols and v == symbols[-1])]
        symbols.append(int(rng.choice(choices)))
    durations = sample_durations(spec, symbols, rng)
    clean = np.repeat(targets[symbols], durations, axis=0)
    frames = clean + spec.noise_std * rng.standard_normal(clean.shape)
    return Utterance(f"utt{index:05d}", unit_features(symbols, spec.vocab_size), frames,
                     tuple(int(d) for d in durations))


def generate_corpus(spec: GenSpec, n: int, offset: int = 0) -> list[Utterance]:
    """Utterances ``offset .. offset + n - 1``; each has its own derived seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    targets = symbol_targets(spec)
    return [generate_utterance(spec, i, targets) for i in range(offset, offset + n)]


@dataclass
class BoundaryError:
    mean_abs_frame_error: float
    within_2_frames_pct: float
    n_boundaries: int = field(default=0)


def boundary_offsets(predicted: StateSequence, truth: StateSequence) -> np.ndarray:
    """Absolute offsets of the ``K - 1`` internal segment boundaries."""
    if predicted.n_states != truth.n_states:
        raise ValueError(f"state count mismatch: {predicted.n_states} vs {truth.n_states}")
    if predicted.n_frames != truth.n_frames:
        raise ValueError(f"frame count mismatch: {predicted.n_frames} vs {truth.n_frames}")
    return np.abs(predicted.boundaries()[:-1] - truth.boundaries()[:-1])


def boundary_error(predicted: StateSequence, truth: StateSequence) -> BoundaryError:
    return summarize_offsets(boundary_offsets(predicted, truth))


def summarize_offsets(offsets) -> BoundaryError:
    offsets = np.asarray(offsets, dtype=float)
    if offsets.size == 0:
        return BoundaryError(0.0, 100.0, 0)
    return BoundaryError(float(offsets.mean()), float(100.0 * np.mean(offsets <= 2)), int(offsets.size))
