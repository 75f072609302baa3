"""On-disk formats: corpus JSONL, model checkpoints, metrics JSONL, attention CSV/PGM.

Floats are written with 17 significant digits so every array round-trips
bit-exactly.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from .datagen import Utterance
from .networks import ModelBundle, NetworkConfig

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file."""


def dumps(obj: Any) -> str:
    """Compact JSON with ``%.17g`` floats and deterministic key order."""
    parts: list[str] = []
    _encode(obj, parts)
    return "".join(parts)


def _encode(obj: Any, out: list[str]) -> None:
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"cannot serialise non-finite float {x}")
        out.append(format(x, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _encode(v, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, v in enumerate(obj):
            if i:
                out.append(",")
            _encode(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


# -- corpus -------------------------------------------------------------
def utterance_to_dict(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "units": utt.units,
        "frames": utt.frames,
        "true_durations": list(utt.true_durations) if utt.true_durations is not None else None,
    }


def write_corpus(path, corpus: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt in corpus:
            fh.write(dumps(utterance_to_dict(utt)) + "\n")


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise FormatError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, record


def read_corpus(path) -> list[Utterance]:
    corpus = []
    for lineno, rec in iter_jsonl(path):
        try:
            corpus.append(Utterance(str(rec["id"]), np.array(rec["units"], dtype=float),
                                    np.array(rec["frames"], dtype=float), rec.get("true_durations")))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: bad utterance record ({exc})") from exc
    if not corpus:
        raise FormatError(f"{path}: no utterances")
    return corpus


def read_units(path) -> list[tuple[str, np.ndarray]]:
    """Unit matrices from JSONL records with a ``units`` field (corpus files work)."""
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            units = np.array(rec["units"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: line {lineno}: bad units record ({exc})") from exc
        if units.ndim != 2 or len(units) == 0 or not np.all(np.isfinite(units)):
            raise FormatError(f"{path}: line {lineno}: units must be a non-empty finite matrix")
        out.append((str(rec.get("id", f"line{lineno}")), units))
    return out


# -- checkpoints --------------------------------------------------------
def checkpoint_dict(bundle: ModelBundle, extra_config: dict | None = None) -> dict:
    config = {"network": bundle.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    params = {name: {"shape": list(v.shape), "data": v.data.ravel()} for name, v in bundle.store.items()}
    return {"format_version": CHECKPOINT_VERSION, "config": config, "params": params}


def save_checkpoint(path, bundle: ModelBundle, extra_config: dict | None = None) -> None:
    Path(path).write_text(dumps(checkpoint_dict(bundle, extra_config)) + "\n", encoding="utf-8")


def bundle_from_dict(doc: dict) -> ModelBundle:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    try:
        cfg = NetworkConfig(**doc["config"]["network"])
        arrays = {name: np.array(p["data"], dtype=np.float64).reshape(p["shape"])
                  for name, p in doc["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint ({exc})") from exc
    bundle = ModelBundle.create(cfg)
    bundle.store.load(arrays)
    return bundle


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    return bundle_from_dict(doc), doc["config"]


# -- metrics and attention exports --------------------------------------
def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")


def gamma_to_csv(gamma: np.ndarray) -> str:
    """Rows ``t,k,gamma`` with 1-based frame and state indices."""
    n_states, n_frames = gamma.shape
    lines = ["t,k,gamma"]
    for t in range(n_frames):
        for k in range(n_states):
            lines.append(f"{t + 1},{k + 1},{format(float(gamma[k, t]), '.17g')}")
    return "\n".join(lines) + "\n"


def gamma_to_pgm(gamma: np.ndarray) -> bytes:
    """Binary 8-bit PGM: one row per state, one column per frame, 255 for gamma = 1."""
    pixels = np.clip(np.rint(np.asarray(gamma) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def write_synthesis(path, results: Sequence[tuple[str, np.ndarray, Sequence[int]]]) -> None:
    write_jsonl(path, ({"id": uid, "frames": frames, "durations": list(durs)}
                       for uid, frames, durs in results))
