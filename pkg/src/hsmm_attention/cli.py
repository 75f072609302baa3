"""Command-line entry point: gen-data, train, align, synth, grad-check.

Exit codes: 0 success, 2 configuration or parse error, 3 training divergence,
4 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, hsmm
from .config import ConfigError, RunConfig, load_config
from .datagen import boundary_offsets, generate_corpus, summarize_offsets
from .networks import ModelBundle, NetworkConfig
from .pipeline import SYNTH_D_MAX, align, elbo_gradient_check, random_instance, synthesize, tiny_bundle
from .train import TrainingDiverged, corpus_statistics, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VALIDATION = 0, 2, 3, 4

log = logging.getLogger("hsmm_attention")


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.gen is None:
        raise ConfigError("config has no 'gen' section (gen.seed is required)")
    corpus = generate_corpus(cfg.gen.spec(), cfg.gen.n_utterances, cfg.gen.offset)
    formats.write_corpus(args.out, corpus)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return EXIT_OK


def _feasible(corpus, d_max):
    keep, skipped = [], []
    for utt in corpus:
        cap = d_max if isinstance(d_max, int) else max(1, utt.n_frames - utt.n_units + 1)
        try:
            hsmm.check_feasible(utt.n_units, utt.n_frames, cap)
        except hsmm.InfeasibleError as exc:
            skipped.append((utt.id, str(exc)))
            continue
        keep.append(utt)
    return keep, skipped


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = formats.read_corpus(args.corpus)
    tc = cfg.train.train_config()
    corpus, skipped = _feasible(corpus, tc.d_max)
    for uid, why in skipped:
        log.warning("skipping %s: %s", uid, why)
    if not corpus:
        raise ConfigError("no feasible utterances to train on")
    net = NetworkConfig(unit_dim=corpus[0].units.shape[1], frame_dim=corpus[0].frames.shape[1],
                        var_floor=tc.var_floor, **cfg.network.model_dump())
    bundle = ModelBundle.create(net)
    bundle.initialize_from_data(*corpus_statistics(corpus))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"train": tc.to_dict()}
    try:
        result = train(tc, corpus, bundle)
    except TrainingDiverged as exc:
        formats.save_checkpoint(out / "checkpoint.json", bundle, extra)
        formats.write_jsonl(out / "metrics.jsonl", exc.metrics)
        print(f"training diverged: {exc}; last good checkpoint written", file=sys.stderr)
        return EXIT_DIVERGED
    formats.save_checkpoint(out / "checkpoint.json", bundle, extra)
    formats.write_jsonl(out / "metrics.jsonl", result.metrics)
    if result.metrics:
        last = result.metrics[-1]
        print("final ELBO: " + " ".join(f"{k}={last[k]:.6g}" for k in ("q_dec", "q_prior", "entropy", "total")))
    return EXIT_OK


def cmd_align(args) -> int:
    bundle, ckpt_cfg = formats.load_checkpoint(args.ckpt)
    d_max = ckpt_cfg.get("train", {}).get("d_max", "full")
    corpus = formats.read_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, skipped, offsets = [], [], []
    for utt in corpus:
        try:
            post, seg = align(bundle, utt, d_max)
        except hsmm.InfeasibleError as exc:
            log.warning("skipping %s: %s", utt.id, exc)
            skipped.append({"id": utt.id, "reason": str(exc)})
            continue
        (out / f"{utt.id}_gamma.csv").write_text(formats.gamma_to_csv(post.gamma), encoding="utf-8")
        (out / f"{utt.id}_gamma.pgm").write_bytes(formats.gamma_to_pgm(post.gamma))
        entry = {"id": utt.id, "n_states": utt.n_units, "n_frames": utt.n_frames,
                 "durations": list(seg.durations), "log_evidence": post.log_evidence}
        if utt.truth is not None:
            off = boundary_offsets(seg, utt.truth)
            offsets.extend(off.tolist())
            err = summarize_offsets(off)
            entry["boundary_error"] = {"mean_abs_frame_error": err.mean_abs_frame_error,
                                       "within_2_frames_pct": err.within_2_frames_pct}
        entries.append(entry)
    report = {"utterances": entries, "skipped": skipped}
    if offsets or any("boundary_error" in e for e in entries):
        s = summarize_offsets(offsets)
        report["summary"] = {"mean_abs_frame_error": s.mean_abs_frame_error,
                             "within_2_frames_pct": s.within_2_frames_pct, "n_boundaries": s.n_boundaries}
        print(f"boundaries: mean_abs={s.mean_abs_frame_error:.4f} within2={s.within_2_frames_pct:.2f}%")
    (out / "report.json").write_text(formats.dumps(report) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_synth(args) -> int:
    bundle, _ = formats.load_checkpoint(args.ckpt)
    results = []
    for uid, units in formats.read_units(args.units):
        frames, seq = synthesize(bundle, units, args.d_max)
        results.append((uid, frames, seq.durations))
    formats.write_synthesis(args.out, results)
    print(f"synthesised {len(results)} sequences to {args.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    gc = _config(args).grad_check
    groups = None
    if args.groups:
        groups = [g.strip() for g in args.groups.split(",") if g.strip()]
        unknown = set(groups) - {"encoder", "decoder", "prior"}
        if unknown:
            raise ConfigError(f"unknown parameter groups: {sorted(unknown)}")
    bundle = tiny_bundle(gc.seed, gc.unit_dim, gc.frame_dim, gc.hidden, gc.layers, gc.context_dim,
                         gc.shared_prior)
    utt = random_instance(np.random.default_rng(gc.seed), gc.n_states, gc.n_frames, gc.unit_dim, gc.frame_dim)
    checks = elbo_gradient_check(bundle, utt, groups, gc.epsilon)
    ok = True
    for c in checks:
        passed = c.max_rel_error < gc.tolerance
        ok &= passed
        print(f"{c.group:8s} params={c.n_params:5d} max_rel_error={c.max_rel_error:.3e} "
              f"{'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsmm-attention", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.lr=0.01")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the three-stage training schedule")
    with_config(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", help="export attention matrices and boundary errors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("synth", help="synthesise frames from unit sequences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--units", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-max", type=int, default=SYNTH_D_MAX, help="longest duration per unit")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grad-check", help="finite-difference check of the ELBO gradient")
    with_config(p, required=False)
    p.add_argument("--groups", help="comma-separated subset of encoder,decoder,prior")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, formats.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
