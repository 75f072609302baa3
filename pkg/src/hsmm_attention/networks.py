"""Encoder (DNN-HSMM head), autoregressive decoder and duration prior networks.

All parameters live in one :class:`ParamStore`, keyed by dotted names such as
``encoder.trunk.w0``.  A shared prior simply reuses the encoder's entries, so
both paths write into the same leaf.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .core import autodiff as ad
from .core.autodiff import Value
from .core.numerics import DEFAULT_VAR_FLOOR, floored_log_variance, gaussian_logpdf
from .hsmm import HsmmParams

NORMALIZATION_TOL = 1e-6


class ParamStore:
    """Ordered mapping of parameter name to trainable leaf."""

    def __init__(self):
        self._values: dict[str, Value] = {}

    def create(self, name: str, data: np.ndarray) -> Value:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name}")
        v = ad.param(data, name=name)
        self._values[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def values(self) -> list[Value]:
        return list(self._values.values())

    def zero_grad(self) -> None:
        ad.zero_grad(self._values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._values.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self._values) - set(arrays)
        extra = set(arrays) - set(self._values)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in self._values.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ValueError(f"{k}: expected shape {v.shape}, got {arr.shape}")
            v.data = arr.copy()

    def flat(self, names: list[str] | None = None) -> np.ndarray:
        names = self.names() if names is None else names
        return np.concatenate([self._values[n].data.ravel() for n in names]) if names else np.zeros(0)

    @contextlib.contextmanager
    def substitute(self, vector: Value, names: list[str]) -> Iterator[None]:
        """Temporarily replace the named leaves by slices of ``vector``.

        Lets a scalar function of a flat parameter vector be built from the
        networks, e.g. for finite-difference checking.
        """
        saved = {n: self._values[n] for n in names}
        offset = 0
        try:
            for n in names:
                shape = saved[n].shape
                size = int(np.prod(shape))
                self._values[n] = ad.reshape(ad.take(vector, slice(offset, offset + size)), shape)
                offset += size
            yield
        finally:
            self._values.update(saved)


class Mlp:
    """Dense network: tanh on hidden layers, identity on the output layer."""

    def __init__(self, store: ParamStore, prefix: str, widths: list[int],
                 rng: np.random.Generator, activate_last: bool = False):
        if len(widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        self.store = store
        self.prefix = prefix
        self.widths = list(widths)
        self.activate_last = activate_last
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            store.create(f"{prefix}.w{i}", rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))
            store.create(f"{prefix}.b{i}", np.zeros(n_out))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{p}{i}" for i in range(self.n_layers) for p in ("w", "b")]

    def __call__(self, x) -> Value:
        h = ad.as_value(x)
        if h.shape[-1] != self.widths[0]:
            raise ValueError(f"{self.prefix}: expected input width {self.widths[0]}, got {h.shape[-1]}")
        for i in range(self.n_layers):
            h = ad.matmul(h, self.store[f"{self.prefix}.w{i}"]) + self.store[f"{self.prefix}.b{i}"]
            if i < self.n_layers - 1 or self.activate_last:
                h = ad.tanh(h)
        return h


@dataclass
class NetworkConfig:
    unit_dim: int
    frame_dim: int
    hidden: int = 64
    layers: int = 2
    context_dim: int = 32
    shared_prior: bool = True
    var_floor: float = DEFAULT_VAR_FLOOR
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderNet:
    """Maps unit features ``K x F_l`` to the HSMM's per-state parameters."""

    def __init__(self, store: ParamStore, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.trunk = Mlp(store, "encoder.trunk", [cfg.unit_dim] + [cfg.hidden] * cfg.layers, rng,
                         activate_last=True)
        self.emission = Mlp(store, "encoder.emission", [cfg.hidden, 2 * cfg.frame_dim], rng)
        self.duration = Mlp(store, "encoder.duration", [cfg.hidden, 2], rng)

    @property
    def param_names(self) -> list[str]:
        return self.trunk.param_names + self.emission.param_names + self.duration.param_names

    def duration_params(self, units) -> tuple[Value, Value]:
        out = self.duration(self.trunk(units))
        return ad.take(out, (slice(None), 0)), ad.take(out, (slice(None), 1))

    def encode(self, units, d_max: int | None = None) -> HsmmParams:
        units = _check_matrix(units, self.cfg.unit_dim, "units")
        h = self.trunk(units)
        em = self.emission(h)
        f = self.cfg.frame_dim
        dur = self.duration(h)
        floor = self.cfg.var_floor
        return HsmmParams(
            emission_mean=ad.take(em, (slice(None), slice(0, f))),
            emission_log_var=floored_log_variance(ad.take(em, (slice(None), slice(f, 2 * f))), floor),
            duration_mean=ad.take(dur, (slice(None), 0)),
            duration_log_var=floored_log_variance(ad.take(dur, (slice(None), 1)), floor),
            d_max=d_max,
            var_floor=floor,
        )


class PriorNet:
    """Duration prior ``p(d | l_k)``; either its own network or the encoder's duration head."""

    def __init__(self, store: ParamStore, cfg: NetworkConfig, rng: np.random.Generator,
                 encoder: EncoderNet):
        self.cfg = cfg
        self.shared = cfg.shared_prior
        if self.shared:
            self.trunk, self.head = encoder.trunk, encoder.duration
        else:
            self.trunk = Mlp(store, "prior.trunk", [cfg.unit_dim] + [cfg.hidden] * cfg.layers, rng,
                             activate_last=True)
            self.head = Mlp(store, "prior.duration", [cfg.hidden, 2], rng)

    @property
    def param_names(self) -> list[str]:
        return self.trunk.param_names + self.head.param_names

    def __call__(self, units) -> tuple[Value, Value]:
        """Duration means and floored log-variances, one per unit."""
        units = _check_matrix(units, self.cfg.unit_dim, "units")
        out = self.head(self.trunk(units))
        log_var = floored_log_variance(ad.take(out, (slice(None), 1)), self.cfg.var_floor)
        return ad.take(out, (slice(None), 0)), log_var


class DecoderNet:
    """Autoregressive Gaussian decoder driven by attention context vectors."""

    def __init__(self, store: ParamStore, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        hidden = [cfg.hidden] * cfg.layers
        self.prenet_l = Mlp(store, "decoder.prenet_l", [cfg.unit_dim] + hidden + [cfg.context_dim], rng)
        self.prenet_o = Mlp(store, "decoder.prenet_o", [cfg.frame_dim] + hidden + [cfg.context_dim], rng)
        self.core = Mlp(store, "decoder.core", [2 * cfg.context_dim] + hidden + [2 * cfg.frame_dim], rng)

    @property
    def param_names(self) -> list[str]:
        return self.prenet_l.param_names + self.prenet_o.param_names + self.core.param_names

    def encode_units(self, units) -> Value:
        return self.prenet_l(_check_matrix(units, self.cfg.unit_dim, "units"))

    def frame_params(self, contexts, previous) -> tuple[Value, Value]:
        """Per-frame mean and floored log-variance given contexts and previous frames."""
        x = ad.concat([ad.as_value(contexts), self.prenet_o(previous)], axis=1)
        out = self.core(x)
        f = self.cfg.frame_dim
        mean = ad.take(out, (slice(None), slice(0, f)))
        log_var = floored_log_variance(ad.take(out, (slice(None), slice(f, 2 * f))), self.cfg.var_floor)
        return mean, log_var

    def decode_teacher_forced(self, contexts, targets: np.ndarray) -> "DecoderOutput":
        targets = np.asarray(targets, dtype=np.float64)
        if not np.all(np.isfinite(targets)):
            raise ValueError("decoder targets must be finite")
        targets = _check_matrix(targets, self.cfg.frame_dim, "targets")
        if ad.as_value(contexts).shape[0] != len(targets):
            raise ValueError("contexts and targets must have the same number of frames")
        previous = np.vstack([np.zeros((1, self.cfg.frame_dim)), targets[:-1]])
        mean, log_var = self.frame_params(contexts, previous)
        log_prob = ad.vsum(gaussian_logpdf(targets, mean, log_var))
        return DecoderOutput(mean, log_var, log_prob)

    def decode_free_running(self, contexts) -> np.ndarray:
        """Feed back the predicted mean frame by frame; no sampling."""
        contexts = np.asarray(ad.as_value(contexts).data)
        prev = np.zeros((1, self.cfg.frame_dim))
        frames = []
        for t in range(len(contexts)):
            mean, _ = self.frame_params(contexts[t:t + 1], prev)
            prev = mean.data
            frames.append(prev[0])
        return np.array(frames).reshape(len(contexts), self.cfg.frame_dim)


@dataclass
class DecoderOutput:
    mean: Value
    log_var: Value
    log_prob: Value


def context_vectors(gamma, unit_encodings) -> Value:
    """Attention-weighted average of unit encodings: ``T x F_h``."""
    gamma = ad.as_value(gamma)
    unit_encodings = ad.as_value(unit_encodings)
    if gamma.ndim != 2 or gamma.shape[0] != unit_encodings.shape[0]:
        raise ValueError(f"gamma {gamma.shape} does not match encodings {unit_encodings.shape}")
    col = gamma.data.sum(axis=0)
    if np.any(np.abs(col - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"attention columns must sum to one (max deviation {np.abs(col - 1).max():.3g})")
    return ad.matmul(ad.transpose(gamma), unit_encodings)


@dataclass
class ModelBundle:
    """The three networks sharing one parameter store."""

    config: NetworkConfig
    store: ParamStore = field(repr=False)
    encoder: EncoderNet = field(repr=False)
    decoder: DecoderNet = field(repr=False)
    prior: PriorNet = field(repr=False)

    @classmethod
    def create(cls, config: NetworkConfig) -> "ModelBundle":
        rng = np.random.default_rng(config.seed)
        store = ParamStore()
        encoder = EncoderNet(store, config, rng)
        decoder = DecoderNet(store, config, rng)
        prior = PriorNet(store, config, rng, encoder)
        return cls(config, store, encoder, decoder, prior)

    def param_groups(self) -> dict[str, list[str]]:
        return {
            "encoder": self.encoder.param_names,
            "decoder": self.decoder.param_names,
            "prior": self.prior.param_names,
        }

    def initialize_from_data(self, frame_mean, frame_var, duration_mean: float) -> None:
        """Flat start: output biases at corpus statistics.

        Emission heads start at the global frame mean/variance and the
        duration heads at the average frames-per-unit.
        """
        f = self.config.frame_dim
        frame_mean = np.broadcast_to(np.asarray(frame_mean, dtype=float), (f,))
        frame_var = np.maximum(np.broadcast_to(np.asarray(frame_var, dtype=float), (f,)), self.config.var_floor)
        dur_var = max(1.0, duration_mean ** 2 / 4.0)
        s = self.store
        s["encoder.emission.b0"].data = np.concatenate([frame_mean, np.log(frame_var)])
        heads = [self.encoder.duration.prefix]
        if not self.prior.shared:
            heads.append(self.prior.head.prefix)
        for prefix in heads:
            s[f"{prefix}.b0"].data = np.array([duration_mean, np.log(dur_var)])
        s[f"decoder.core.b{self.config.layers}"].data = np.concatenate([frame_mean, np.log(frame_var)])


def _check_matrix(x, width: int, what: str):
    arr = x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{what}: expected a matrix with {width} columns, got shape {arr.shape}")
    return x if isinstance(x, Value) else arr
