"""Command-line entry points: synth, train, caption, propose, evaluate.

Every command resolves its settings from defaults, then an optional
JSON config file (section named after the command), then explicit
flags, and serializes the result as runconfig.json next to its outputs
so a run can be reproduced exactly. Seeds default to 0. Progress goes
to stderr; set MDVC_LOG=debug|info|warning|error to adjust verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as data_mod
from . import synth as synth_mod
from .errors import ConfigError, DataError, MdvcError
from .evaluation import DEFAULT_TIOU_THRESHOLDS, dense_caption_eval
from .model import DEFAULT_WIDTHS, CaptioningModel, ModalityConfig, ModelConfig, caption_proposals
from .proposals import ConfidenceStream, filter_proposals, fuse_bidirectional
from .training import AUDIO_ONLY_PRESET, TrainConfig, train_loop

log = logging.getLogger("mdvc")

SYNTH_DEFAULTS = {
    "seed": 0, "n_train": 2048, "n_val": 512, "rows": 3,
    "audio_dim": 8, "visual_dim": 16,
    "audio_noise": 0.5, "visual_noise": 0.05,
    "step_seconds": data_mod.DEFAULT_STEP_SECONDS,
}

TRAIN_DEFAULTS = {
    "seed": 0,
    "modalities": ["speech", "audio", "visual"],
    "widths": dict(DEFAULT_WIDTHS),
    "n_layers": 1, "n_heads": 4, "d_inner": 2048,
    "dropout": 0.1, "residual_mode": "verbatim", "fusion": "concat",
    "max_caption_len": 30, "min_freq": 1,
    "batch_size": 28, "lr": 1e-5, "beta1": 0.9, "beta2": 0.99, "eps": 1e-8,
    "gamma": 0.7, "max_epochs": 200, "patience": 50, "val_metric": "bleu4",
    "preset": None,
}

CAPTION_DEFAULTS = {"seed": 0, "batch_size": 32}

PROPOSE_DEFAULTS = {"threshold": 0.5, "max_count": 100, "video_id": None}

EVALUATE_DEFAULTS = {
    "tiou_thresholds": list(DEFAULT_TIOU_THRESHOLDS),
    "bleu_n": 4,
}


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, os.environ.get("MDVC_LOG", "info").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except MdvcError as exc:
        _fail(type(exc).__name__, str(exc))
        return 1
    except OSError as exc:
        _fail("OSError", str(exc))
        return 1


def _fail(kind: str, message: str) -> None:
    record = {"error": kind, "message": message}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdvc",
        description="Multi-modal dense video captioning at desk scale.",
    )
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("synth", help="generate a synthetic tri-modal dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file")
    for flag in ("seed", "n-train", "n-val", "rows", "audio-dim", "visual-dim"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("audio-noise", "visual-noise", "step-seconds"):
        p.add_argument(f"--{flag}", type=float)
    p.set_defaults(handler=cmd_synth, command="synth")

    p = sub.add_parser("train", help="train a captioning model on a manifest")
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--modalities", help="comma list, e.g. speech,audio,visual")
    p.add_argument("--widths", help="comma list of name=width overrides")
    p.add_argument("--fusion", choices=["concat", "average"])
    p.add_argument("--residual-mode", choices=["verbatim", "standard"])
    p.add_argument("--val-metric", choices=["bleu4", "exact"])
    p.add_argument("--preset", choices=["audio-only"])
    for flag in ("seed", "n-layers", "n-heads", "d-inner", "max-caption-len",
                 "min-freq", "batch-size", "max-epochs", "patience"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("dropout", "lr", "beta1", "beta2", "eps", "gamma"):
        p.add_argument(f"--{flag}", type=float)
    p.set_defaults(handler=cmd_train, command="train")

    p = sub.add_parser("caption", help="caption proposals with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--proposals", help="proposals JSON {video_id: [...]}")
    group.add_argument("--gt-proposals", action="store_true",
                       help="caption the manifest's annotated segments")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(handler=cmd_caption, command="caption")

    p = sub.add_parser("propose", help="fuse two confidence streams into proposals")
    p.add_argument("--forward", required=True, help="forward stream JSON")
    p.add_argument("--backward", required=True, help="backward stream JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-count", type=int)
    p.add_argument("--video-id")
    p.set_defaults(handler=cmd_propose, command="propose")

    p = sub.add_parser("evaluate", help="score a submission against references")
    p.add_argument("--pred", required=True, help="submission JSON")
    p.add_argument("--ref", required=True, action="append",
                   help="reference manifest.json or submission-shaped JSON; "
                        "repeat for a second set")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--tiou-thresholds", help="comma list, e.g. 0.3,0.5,0.7,0.9")
    p.add_argument("--bleu-n", type=int)
    p.set_defaults(handler=cmd_evaluate, command="evaluate")

    return parser


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def _resolve(defaults: dict, args, keys: list[str]) -> dict:
    """defaults <- config-file section <- explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        section = _load_json(args.config).get(args.command, {})
        unknown = set(section) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown {args.command} config keys: {sorted(unknown)}")
        resolved.update(section)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            resolved[key] = value
    return resolved


def _prepare_out(args, resolved: dict) -> Path:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "settings": resolved}
    with open(out_dir / "runconfig.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")
    return out_dir


def cmd_synth(args) -> int:
    resolved = _resolve(SYNTH_DEFAULTS, args, list(SYNTH_DEFAULTS))
    out_dir = _prepare_out(args, resolved)
    spec = synth_mod.SynthSpec(**{k: resolved[k] for k in SYNTH_DEFAULTS})
    manifest_path = synth_mod.generate(out_dir, spec)
    log.info("wrote %s (%d train / %d val)", manifest_path,
             spec.n_train, spec.n_val)
    print(str(manifest_path))
    return 0


def _model_config_from(resolved: dict, vocab_size: int,
                       speech_vocab_size: int | None) -> ModelConfig:
    modalities = []
    widths = dict(DEFAULT_WIDTHS)
    widths.update(resolved["widths"])
    n_layers = resolved["n_layers"]
    if resolved["preset"] == "audio-only":
        n_layers = AUDIO_ONLY_PRESET["n_layers"]
    for name in resolved["modalities"]:
        if name not in widths:
            raise ConfigError(f"no width configured for modality {name!r}")
        kind = "token" if name == "speech" else "dense"
        modalities.append(ModalityConfig(
            name=name, d_model=widths[name], kind=kind, n_layers=n_layers,
            input_vocab=speech_vocab_size if kind == "token" else None,
        ))
    return ModelConfig(
        modalities=modalities,
        vocab_size=vocab_size,
        n_heads=resolved["n_heads"],
        d_inner=resolved["d_inner"],
        dropout=resolved["dropout"],
        smoothing=resolved["gamma"],
        residual_mode=resolved["residual_mode"],
        fusion=resolved["fusion"],
        max_caption_len=resolved["max_caption_len"],
    )


def cmd_train(args) -> int:
    resolved = _resolve(TRAIN_DEFAULTS, args, list(TRAIN_DEFAULTS))
    if isinstance(resolved["modalities"], str):
        resolved["modalities"] = [m for m in resolved["modalities"].split(",") if m]
    if isinstance(resolved["widths"], str):
        resolved["widths"] = _parse_widths(resolved["widths"])
    if resolved["preset"] == "audio-only":
        if resolved["modalities"] != ["audio"]:
            raise ConfigError("preset audio-only needs --modalities audio")
        resolved["lr"] = AUDIO_ONLY_PRESET["lr"]
        resolved["gamma"] = AUDIO_ONLY_PRESET["gamma"]
    resolved["data"] = str(args.data)
    out_dir = _prepare_out(args, resolved)

    manifest = data_mod.load_manifest(args.data)
    train_entries = manifest.split("train")
    if not train_entries:
        raise DataError("manifest has no train split")
    caption_vocab = data_mod.Vocabulary.build(
        (text for entry in train_entries for _, _, text in entry.annotations),
        min_freq=resolved["min_freq"],
    )
    speech_vocab = None
    if "speech" in resolved["modalities"]:
        speech_vocab = data_mod.Vocabulary.build(
            (data_mod.strip_sound_tags(text)
             for entry in train_entries for _, _, text in entry.speech_segments),
            min_freq=resolved["min_freq"],
        )
    config = _model_config_from(resolved, len(caption_vocab),
                                None if speech_vocab is None else len(speech_vocab))
    model = CaptioningModel(config, seed=resolved["seed"])

    train_samples = data_mod.build_training_samples(
        manifest, config, "train", caption_vocab, speech_vocab, seed=resolved["seed"])
    val_samples = data_mod.build_training_samples(
        manifest, config, "val", caption_vocab, speech_vocab, seed=resolved["seed"])
    log.info("training on %d samples, validating on %d",
             len(train_samples), len(val_samples))

    train_cfg = TrainConfig(
        batch_size=resolved["batch_size"], lr=resolved["lr"],
        beta1=resolved["beta1"], beta2=resolved["beta2"], eps=resolved["eps"],
        gamma=resolved["gamma"], max_epochs=resolved["max_epochs"],
        patience=resolved["patience"], seed=resolved["seed"],
        val_metric=resolved["val_metric"],
    )
    result = train_loop(model, train_samples, val_samples, train_cfg)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    ckpt.save_model(out_dir / "checkpoint.bin", model, caption_vocab, speech_vocab,
                    extra={"best_score": result.best_score,
                           "best_epoch": result.best_epoch,
                           "stopped": result.stopped})
    log.info("stopped (%s); best val %s at epoch %s", result.stopped,
             result.best_score, result.best_epoch)
    print(str(out_dir / "checkpoint.bin"))
    return 0


def _parse_widths(raw: str) -> dict[str, int]:
    widths = {}
    for part in raw.split(","):
        if not part:
            continue
        try:
            name, value = part.split("=")
            widths[name.strip()] = int(value)
        except ValueError:
            raise ConfigError(f"bad width override {part!r}; use name=width") from None
    return widths


def cmd_caption(args) -> int:
    resolved = _resolve(CAPTION_DEFAULTS, args, list(CAPTION_DEFAULTS))
    resolved["checkpoint"] = str(args.checkpoint)
    resolved["data"] = str(args.data)
    resolved["proposals"] = args.proposals or "ground-truth"
    out_dir = _prepare_out(args, resolved)

    model, caption_vocab, speech_vocab, _ = ckpt.load_model(args.checkpoint)
    manifest = data_mod.load_manifest(args.data)
    if args.proposals:
        raw = _load_json(args.proposals)
        wanted = {vid: [(float(p["start"]), float(p["end"])) for p in plist]
                  for vid, plist in raw.items()}
    else:
        wanted = {v.video_id: [(s, e) for s, e, _ in v.annotations]
                  for v in manifest.videos}

    submission: dict[str, list] = {}
    by_id = {v.video_id: v for v in manifest.videos}
    for video_id, intervals in sorted(wanted.items()):
        entry = by_id.get(video_id)
        if entry is None:
            raise DataError(f"proposals reference unknown video {video_id!r}")
        results = caption_proposals(model, manifest, entry, intervals,
                                    caption_vocab, speech_vocab,
                                    seed=resolved["seed"],
                                    batch_size=resolved["batch_size"])
        submission[video_id] = [
            {"start": r.start, "end": r.end, "sentence": r.sentence,
             "substituted": r.substituted,
             **({"error": r.error} if r.error else {})}
            for r in results
        ]
    out_path = out_dir / "submission.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(submission, fh, sort_keys=True, indent=1)
        fh.write("\n")
    log.info("captioned %d videos", len(submission))
    print(str(out_path))
    return 0


def cmd_propose(args) -> int:
    resolved = _resolve(PROPOSE_DEFAULTS, args, list(PROPOSE_DEFAULTS))
    resolved["forward"] = str(args.forward)
    resolved["backward"] = str(args.backward)
    out_dir = _prepare_out(args, resolved)

    forward_raw = _load_json(args.forward)
    backward_raw = _load_json(args.backward)
    video_id = (resolved["video_id"] or forward_raw.get("video_id")
                or backward_raw.get("video_id") or "video")
    fused = fuse_bidirectional(ConfidenceStream.from_json(forward_raw),
                               ConfidenceStream.from_json(backward_raw))
    kept = filter_proposals(fused, threshold=resolved["threshold"],
                            max_count=resolved["max_count"])
    out_path = out_dir / "proposals.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump({video_id: [{"start": p.start, "end": p.end, "score": p.score}
                              for p in kept]},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    log.info("kept %d proposals for %s", len(kept), video_id)
    print(str(out_path))
    return 0


def _load_reference_set(path) -> dict[str, list]:
    raw = _load_json(path)
    if isinstance(raw, dict) and "videos" in raw:
        manifest = data_mod.load_manifest(path)
        return {
            v.video_id: [((s, e), data_mod.tokenize(text))
                         for s, e, text in v.annotations]
            for v in manifest.videos if v.annotations
        }
    return _parse_submission(raw, path)


def _parse_submission(raw, path) -> dict[str, list]:
    if not isinstance(raw, dict):
        raise DataError(f"{path}: expected an object keyed by video id")
    parsed: dict[str, list] = {}
    for video_id, items in raw.items():
        if not isinstance(items, list):
            raise DataError(f"{path}: video {video_id!r} must map to a list")
        segments = []
        for i, item in enumerate(items):
            try:
                if item.get("sentence") is None:
                    continue  # failed caption slots carry no text
                segments.append(((float(item["start"]), float(item["end"])),
                                 data_mod.tokenize(str(item["sentence"]))))
            except (AttributeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(
                    f"{path}: video {video_id!r} entry {i}: {exc}"
                ) from None
        parsed[video_id] = segments
    return parsed


def cmd_evaluate(args) -> int:
    resolved = _resolve(EVALUATE_DEFAULTS, args, ["bleu_n"])
    if args.tiou_thresholds:
        resolved["tiou_thresholds"] = [float(x) for x in
                                       args.tiou_thresholds.split(",") if x]
    resolved["pred"] = str(args.pred)
    resolved["ref"] = [str(r) for r in args.ref]
    out_dir = _prepare_out(args, resolved)

    predictions = _parse_submission(_load_json(args.pred), args.pred)
    reference_sets = [_load_reference_set(path) for path in args.ref]
    report = dense_caption_eval(predictions, reference_sets,
                                thresholds=resolved["tiou_thresholds"],
                                max_n=resolved["bleu_n"])
    out_path = out_dir / "report.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"{report.metric} final: {report.final:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
