"""Three-stage training: DNN-HSMM likelihood, decoder only, then the full ELBO."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import autodiff as ad
from .datagen import Utterance
from .elbo import compute_elbo
from .networks import ModelBundle

STAGES = ("encoder", "decoder", "joint")


@dataclass
class AdamHyper:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, hyper: AdamHyper) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update (gradient *descent*) over the named arrays in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    t = state.step + 1
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, g in grads.items():
        m = hyper.beta1 * state.m.get(name, 0.0) + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, 0.0) + (1.0 - hyper.beta2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = params[name] - hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return new_params, AdamState(t, m_new, v_new)


@dataclass
class TrainConfig:
    encoder_epochs: int = 200
    decoder_epochs: int = 100
    joint_epochs: int = 200
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None
    seed: int = 0
    var_floor: float = 1e-4
    d_max: int | str = "full"
    clip_norm: float | None = 5.0
    record_wall_time: bool = False

    def validate(self) -> None:
        for name in ("encoder_epochs", "decoder_epochs", "joint_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)

    def schedule(self) -> list[tuple[str, int]]:
        return list(zip(STAGES, (self.encoder_epochs, self.decoder_epochs, self.joint_epochs)))

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], metrics: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.metrics = metrics


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[dict]


def stage_parameters(bundle: ModelBundle, stage: str) -> list[str]:
    groups = bundle.param_groups()
    if stage == "encoder":
        return groups["encoder"]
    if stage == "decoder":
        return groups["decoder"]
    return bundle.store.names()


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def _batches(corpus: Sequence[Utterance], batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= len(corpus):
        return [sorted(corpus, key=lambda u: u.id)]
    order = rng.permutation(len(corpus))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [sorted((corpus[j] for j in chunk), key=lambda u: u.id) for chunk in chunks]


def run_step(bundle: ModelBundle, batch: Sequence[Utterance], stage: str, config: TrainConfig,
             state: AdamState) -> tuple[AdamState, dict[str, float]]:
    """Forward, backward and one Adam update on a batch; returns summed diagnostics."""
    names = stage_parameters(bundle, stage)
    store = bundle.store
    store.zero_grad()
    sums = dict.fromkeys(("q_dec", "q_prior", "entropy", "total", "corpus_ll"), 0.0)
    n = len(batch)
    for utt in batch:
        graph = compute_elbo(bundle.encoder, bundle.decoder, bundle.prior, utt,
                             d_max=config.d_max, track_encoder=(stage != "decoder"))
        b = graph.breakdown()
        for key, val in (("q_dec", b.q_dec), ("q_prior", b.q_prior), ("entropy", b.entropy),
                         ("total", b.total), ("corpus_ll", b.log_likelihood)):
            sums[key] += val
        objective = {"encoder": graph.log_likelihood, "decoder": graph.q_dec, "joint": graph.total}[stage]
        if not np.isfinite(objective.data):
            raise FloatingPointError(f"non-finite {stage} objective on {utt.id}")
        ad.backward(objective, seed=-1.0 / n)
    grads = {name: np.array(store[name].grad) for name in names}
    if stage == "joint" and config.clip_norm is not None:
        grads = clip_by_global_norm(grads, config.clip_norm)
    params = {name: store[name].data for name in names}
    new_params, state = adam_step(params, grads, state, config.adam)
    for name in names:
        store[name].data = new_params[name]
    return state, sums


def train(config: TrainConfig, corpus: Sequence[Utterance], bundle: ModelBundle,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the encoder / decoder / joint schedule; one metrics record per epoch.

    Each stage starts a fresh Adam state.  Raises :class:`TrainingDiverged`
    (carrying the last finite parameters) on a non-finite loss or gradient.
    """
    config.validate()
    if not corpus:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(config.seed)
    metrics: list[dict] = []
    epoch = 0
    for stage, n_epochs in config.schedule():
        state = AdamState()
        for _ in range(n_epochs):
            start = time.perf_counter()
            totals = dict.fromkeys(("q_dec", "q_prior", "entropy", "total", "corpus_ll"), 0.0)
            for batch in _batches(corpus, config.batch_size, rng):
                last_good = bundle.store.snapshot()
                try:
                    state, sums = run_step(bundle, batch, stage, config, state)
                except FloatingPointError as exc:
                    bundle.store.load(last_good)
                    raise TrainingDiverged(str(exc), last_good, metrics) from exc
                for key in totals:
                    totals[key] += sums[key]
            epoch += 1
            record = {"epoch": epoch, "stage": stage, **totals,
                      "wall_ms": (time.perf_counter() - start) * 1e3 if config.record_wall_time else None}
            metrics.append(record)
            if on_epoch is not None:
                on_epoch(record)
    return TrainResult(bundle, metrics)


def corpus_statistics(corpus: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray, float]:
    """Global frame mean and variance and the mean number of frames per unit."""
    frames = np.vstack([u.frames for u in corpus])
    per_unit = sum(u.n_frames for u in corpus) / sum(u.n_units for u in corpus)
    return frames.mean(axis=0), frames.var(axis=0), float(per_unit)
