"""Command-line entry point: ``wase <command> ...``.

Exit codes: 0 success, 2 I/O error, 3 configuration error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .model import PRESETS, WASE, ModelConfig, preset
from .signal import (load_corpus, load_examples, read_wav, sample_mixtures, save_corpus,
                     save_examples, synth_corpus, Waveform, write_wav)
from .toy import split_corpus
from .train import NumericalError, Trainer, TrainConfig, evaluate, train_preset, write_report

log = logging.getLogger("wase")

EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 2, 3, 4
PATH_KEYS = ("train_manifest", "dev_manifest", "corpus_manifest", "checkpoint", "report_dir", "log")
INPUT_PATHS = ("train_manifest", "dev_manifest", "corpus_manifest")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_run_config(path) -> tuple[ModelConfig, TrainConfig, dict[str, Path | None]]:
    """Parse a flat JSON run config: ``preset`` + model/train fields + paths.

    Paths are resolved relative to the config file.
    """
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    for key in raw:
        if key not in model_keys | train_keys | set(PATH_KEYS) | {"preset"}:
            raise ConfigError(f"{path}:{_key_line(text, key)}: unknown key {key!r}")
    name = raw.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"{path}:{_key_line(text, 'preset')}: unknown preset {name!r} (choose {sorted(PRESETS)})")

    def build(cls, keys, make):
        kw = {k: v for k, v in raw.items() if k in keys}
        try:
            return make(**kw)
        except (TypeError, ValueError) as e:
            bad = next((k for k in kw if k in str(e)), next(iter(kw), "preset"))
            raise ConfigError(f"{path}:{_key_line(text, bad)}: {cls.__name__}: {e}") from None

    model_cfg = build(ModelConfig, model_keys, lambda **kw: preset(name, **kw))
    train_cfg = build(TrainConfig, train_keys, lambda **kw: train_preset(name, **kw))
    paths = {k: (path.parent / raw[k]) if raw.get(k) else None for k in PATH_KEYS}
    for k in INPUT_PATHS:
        if paths[k] is not None and not paths[k].exists():
            raise ConfigError(f"{path}:{_key_line(text, k)}: {k} {paths[k]} does not exist")
    for k in ("train_manifest", "checkpoint"):
        if paths[k] is None:
            raise ConfigError(f"{path}: missing required key {k!r}")
    return model_cfg, train_cfg, paths


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.speakers < 2:
        raise ConfigError("need ≥ 2 speakers")
    clips = synth_corpus(args.speakers, args.clips, args.seconds, seed=args.seed)
    manifest = save_corpus(clips, args.out)
    print(f"wrote {len(clips)} clips, manifest {manifest}")
    return 0


def cmd_build_dataset(args) -> int:
    clips = load_corpus(args.corpus)
    if args.n_eval % 2:
        raise ConfigError("--n-eval must be even (each eval mixture is used once per speaker)")
    train_clips, held = split_corpus(clips, args.eval_clips_per_speaker) if args.eval_clips_per_speaker else (clips, clips)
    stride = ModelConfig().L_enc_stride
    out = Path(args.out)
    written = {}
    sets = [("train", train_clips, args.n_train, False, 0), ("eval", held, args.n_eval, True, 1)]
    if args.n_dev:
        sets.append(("dev", held, args.n_dev + args.n_dev % 2, True, 2))
    for name, pool, count, doubled, salt in sets:
        rng = np.random.default_rng([args.seed, salt])
        examples = sample_mixtures(pool, count, rng, args.mode, args.segment_seconds, stride, doubled=doubled)
        written[name] = save_examples(examples, out, name)
    for name, manifest in written.items():
        print(f"{name}: {manifest}")
    return 0


def _read_examples(path):
    return load_examples(path) if path else []


def cmd_train(args) -> int:
    model_cfg, train_cfg, paths = load_run_config(args.config)
    train_set = load_examples(paths["train_manifest"])
    dev_set = _read_examples(paths["dev_manifest"])
    pool = load_corpus(paths["corpus_manifest"]) if paths["corpus_manifest"] else None
    _check_mode(model_cfg, train_set, "train_manifest")
    ckpt = paths["checkpoint"]
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    last = ckpt.with_name(ckpt.name + ".last")
    log_path = paths["log"] or ckpt.with_name(ckpt.stem + ".log.jsonl")
    if args.resume:
        trainer = Trainer.restore(args.resume, train_set, dev_set, pool, train_cfg)
        if trainer.model.cfg != model_cfg:
            raise ConfigError(f"{args.resume}: checkpoint model config differs from {args.config}")
    else:
        trainer = Trainer(WASE(model_cfg), train_cfg, train_set, dev_set, pool)
    run_record = {"preset_expanded": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                  "paths": {k: str(v) if v else None for k, v in paths.items()}}
    with open(log_path, "a") as fh:
        fh.write(json.dumps({"config": run_record}, sort_keys=True) + "\n")
    history = []
    while not trainer.state.stop and trainer.state.epoch < train_cfg.max_epochs:
        entry = trainer.fit(log_path=log_path, ckpt_path=ckpt if dev_set else None, epochs=1)
        history += entry
        trainer.save(last)
        if not dev_set:
            trainer.save(ckpt)
        print(json.dumps(entry[-1], sort_keys=True), flush=True)
    if paths["report_dir"]:
        rd = paths["report_dir"]
        rd.mkdir(parents=True, exist_ok=True)
        summary = {"history": history, "final_state": trainer.state.to_dict(), "config": run_record}
        if dev_set:
            best, _, _ = load_checkpoint(ckpt)
            summary["best_dev"] = {k: v for k, v in evaluate(best, dev_set, train_cfg.oracle_cues).items()
                                   if k != "per_example"}
        (rd / "train_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _check_mode(cfg: ModelConfig, examples, what: str) -> None:
    if not examples or cfg.label_mode is None:
        return
    modes = {ex.meta.get("mode") for ex in examples} - {None}
    if modes and modes != {cfg.label_mode}:
        raise ConfigError(f"{what}: labels are {sorted(modes)} but cue mode {cfg.cue_mode!r} "
                          f"expects {cfg.label_mode!r}")


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    examples = load_examples(args.dataset)
    _check_mode(model.cfg, examples, str(args.dataset))
    if args.oracle_cues and not model.cfg.uses_onset:
        raise ConfigError(f"--oracle-cues needs an onset cue mode, checkpoint has {model.cfg.cue_mode!r}")
    report = evaluate(model, examples, oracle_cues=args.oracle_cues)
    out_json = Path(args.out_json or Path(args.dataset).with_suffix(".report.json"))
    out_csv = Path(args.out_csv or out_json.with_suffix(".csv"))
    write_report(report, out_json, out_csv)
    print(json.dumps({k: report[k] for k in ("mean_sisnri_db", "acc", "f1", "n_examples")}))
    return 0


def cmd_extract(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    mix, ref = read_wav(args.mixture), read_wav(args.reference)
    for name, w in (("mixture", mix), ("reference", ref)):
        if w.sample_rate != model.cfg.sample_rate:
            raise OSError(f"{name} sample rate {w.sample_rate} Hz does not match the model's "
                          f"{model.cfg.sample_rate} Hz; resample it first")
    with T.no_grad():
        out = model.forward(mix.samples, ref.samples)
    write_wav(args.out, Waveform(out.target_est.data, mix.sample_rate), float32=True)
    if out.cue_pred is not None:
        trace = Path(args.cue_trace or Path(args.out).with_suffix(".cue.csv"))
        stride = model.cfg.L_enc_stride
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "time_s", "value"])
            for i, v in enumerate(out.cue_pred.data.reshape(-1)):
                w.writerow([i, i * stride / mix.sample_rate, float(v)])
    print(f"wrote {args.out}")
    return 0


def cmd_count_params(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)[0]
    else:
        cfg = preset(args.preset, cue_mode=args.cue_mode)
    n = WASE(cfg).count_params()
    print(json.dumps({"preset": args.preset if not args.config else None, "cue_mode": cfg.cue_mode,
                      "parameters": n}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wase", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a pseudo-speaker corpus")
    s.add_argument("--speakers", type=int, default=8)
    s.add_argument("--clips", type=int, default=10)
    s.add_argument("--seconds", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-dataset", help="mix a corpus into train/eval example sets")
    s.add_argument("--corpus", required=True, help="corpus manifest.jsonl")
    s.add_argument("--n-train", type=int, required=True)
    s.add_argument("--n-eval", type=int, required=True)
    s.add_argument("--n-dev", type=int, default=0)
    s.add_argument("--mode", choices=("onset", "onset_offset"), default="onset_offset")
    s.add_argument("--segment-seconds", type=float, default=4.0)
    s.add_argument("--eval-clips-per-speaker", type=int, default=2,
                   help="clips per speaker held out for eval/dev (0: share all clips)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("train", help="train from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on an example manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--oracle-cues", action="store_true")
    s.add_argument("--out-json")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("extract", help="extract the reference speaker from one mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cue-trace")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("count-params", help="report the parameter count of a preset or run config")
    s.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    s.add_argument("--cue-mode", default="onset_offset")
    s.add_argument("--config")
    s.set_defaults(func=cmd_count_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
