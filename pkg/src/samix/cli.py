"""Command-line entry point: simulate | fit-labels | pretrain | evaluate | probe | version."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .audio import write_wav
from .config import RunConfig, apply_overrides, validate_config
from .errors import ConfigError, ManifestError, SamixError
from .evalkit import build_eval_items, probe_target_labeling, run_invariant_suite
from .labeler import fit_codebook, frame_spectral_features, save_codebook, load_codebook, assign_labels, save_labels
from .mixsim import load_manifest, render_mixture, sample_scenario
from .audio import read_wav
from .trainer import build_model, run_pretraining

log = logging.getLogger("samix")


def _setup_logging():
    level = os.environ.get("SAMIX_LOG_LEVEL", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(message)s")


class OutputLock:
    """Guards an output directory against concurrent commands."""

    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, ".samix.lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise SamixError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


def _load_run_config(args) -> RunConfig:
    try:
        with open(args.config, encoding="utf-8") as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
    document = apply_overrides(document, args.set or [])
    if args.seed is not None:
        document.setdefault("trainer", {})["seed"] = args.seed
        document.setdefault("labeler", {})["seed"] = args.seed
        document.setdefault("eval", {})["seed"] = args.seed
    cfg = validate_config(document)
    print(f"config_hash: {cfg.config_hash}")
    return cfg


def _manifest(cfg: RunConfig):
    path = cfg.doc["simulation"]["manifest"]
    if not path:
        raise ConfigError("simulation.manifest must point to a corpus manifest")
    return load_manifest(path)


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    corpus = _manifest(cfg)
    sim = cfg.sim_config()
    rng = np.random.default_rng(cfg.doc["eval"]["seed"])
    with OutputLock(args.out):
        index = []
        for i in range(args.count):
            spec = sample_scenario(rng, sim)
            sample = render_mixture(spec, corpus, rng)
            name = f"mix_{i:05d}.wav"
            write_wav(os.path.join(args.out, name), sample.mixture)
            index.append(
                {
                    "file": name,
                    "scenario": spec.kind,
                    "overlap_ratio": spec.overlap_ratio,
                    "sir_db": spec.sir_db,
                    "snr_db": spec.snr_db,
                    "sources": [
                        {
                            "utterance_id": s.clip.utterance_id,
                            "speaker_id": s.clip.speaker_id,
                            "gain": s.gain,
                            "onset": s.onset,
                        }
                        for s in sample.sources
                    ],
                }
            )
        meta = {"config_hash": cfg.config_hash, "mixtures": index}
        with open(os.path.join(args.out, "index.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2)
    log.info("wrote %d mixtures to %s", args.count, args.out)
    return 0


def cmd_fit_labels(args) -> int:
    cfg = _load_run_config(args)
    corpus = _manifest(cfg)
    fcfg = cfg.feature_config()
    with OutputLock(args.out):
        feats = []
        clips = {}
        for entry in corpus.entries:
            clip = read_wav(entry.path, entry.speaker_id, entry.utterance_id)
            clips[entry.utterance_id] = clip
            feats.append(frame_spectral_features(clip, fcfg))
        codebook = fit_codebook(
            np.concatenate(feats),
            cfg.doc["labeler"]["k"],
            seed=cfg.doc["labeler"]["seed"],
            feature_cfg=fcfg,
        )
        save_codebook(os.path.join(args.out, "codebook.bin"), codebook)
        labels_dir = os.path.join(args.out, "labels")
        os.makedirs(labels_dir, exist_ok=True)
        for utt, clip in clips.items():
            save_labels(
                os.path.join(labels_dir, f"{utt}.txt"), assign_labels(clip, codebook)
            )
        with open(os.path.join(args.out, "labeler.json"), "w", encoding="utf-8") as fh:
            json.dump({"config_hash": cfg.config_hash, "k": codebook.k}, fh)
    log.info("fitted %d-cluster codebook over %d utterances", codebook.k, len(clips))
    return 0


def _codebook_path(args):
    if args.codebook:
        return args.codebook
    return os.path.join(args.out, "codebook.bin")


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    corpus = _manifest(cfg)
    codebook = load_codebook(_codebook_path(args))
    model_cfg = cfg.model_config()
    if codebook.k != model_cfg.k:
        raise ConfigError(
            f"codebook has {codebook.k} clusters but config expects {model_cfg.k}"
        )
    with OutputLock(args.out):
        final, _ = run_pretraining(
            cfg.train_config(),
            corpus,
            codebook,
            model_cfg,
            cfg.sim_config(),
            args.out,
            resume_from=args.resume,
        )
        with open(os.path.join(args.out, "run.json"), "w", encoding="utf-8") as fh:
            json.dump({"config_hash": cfg.config_hash, "checkpoint": final}, fh)
    log.info("final checkpoint: %s", final)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    model_cfg = cfg.model_config()
    model = None
    fingerprint_extra = {}
    if args.checkpoint:
        model = build_model(model_cfg, "sa_wavlm", cfg.doc["trainer"]["seed"])
        ckpt.load_checkpoint(args.checkpoint, model)
        fingerprint_extra["checkpoint_hash"] = ckpt.checkpoint_hash(args.checkpoint)
    with OutputLock(args.out):
        report = run_invariant_suite(
            model=model, model_cfg=model_cfg, seed=cfg.doc["eval"]["seed"]
        )
        report.fingerprint["config_hash"] = cfg.config_hash
        report.fingerprint.update(fingerprint_extra)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    print(report.to_table())
    return 0 if report.all_passed else 2


def cmd_probe(args) -> int:
    cfg = _load_run_config(args)
    corpus = _manifest(cfg)
    codebook = load_codebook(_codebook_path(args))
    model_cfg = cfg.model_config()
    model = build_model(model_cfg, "sa_wavlm", cfg.doc["trainer"]["seed"])
    ckpt.load_checkpoint(args.checkpoint, model)
    with OutputLock(args.out):
        items = build_eval_items(
            corpus,
            codebook,
            model_cfg,
            cfg.doc["eval"]["items"],
            cfg.doc["eval"]["seed"],
            crop_seconds=cfg.doc["eval"]["crop_seconds"],
        )
        result = probe_target_labeling(model, items)
        result["config_hash"] = cfg.config_hash
        with open(os.path.join(args.out, "probe.json"), "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2)
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samix")
    sub = parser.add_subparsers(dest="command")

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scalar config leaf (repeatable)")

    p = sub.add_parser("simulate", help="render mixtures to WAV files")
    common(p)
    p.add_argument("--count", type=int, default=10)

    p = sub.add_parser("fit-labels", help="fit the k-means codebook and dump labels")
    common(p)

    p = sub.add_parser("pretrain", help="run pre-training")
    common(p)
    p.add_argument("--codebook", default=None, help="codebook path (default: <out>/codebook.bin)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("evaluate", help="run the invariant suite")
    common(p)
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("probe", help="frozen-representation probe on a checkpoint")
    common(p)
    p.add_argument("--codebook", default=None)
    p.add_argument("--checkpoint", required=True)

    sub.add_parser("version", help="print the version")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-labels": cmd_fit_labels,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
}


def dispatch(argv) -> int:
    _setup_logging()
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    if argv[0] == "version":
        print(__version__)
        return 0
    if argv[0] not in COMMANDS:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SamixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
