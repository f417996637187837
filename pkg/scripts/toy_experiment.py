#!/usr/bin/env python3
"""Train desk-preset models on the 8-speaker toy corpus and tabulate SI-SNRi / SDVAD scores.

Example:
    python3 scripts/toy_experiment.py --runs onset_offset:oracle onset:oracle --seeds 0 1 2 --out toy.json
"""
import argparse
import json
import statistics
from dataclasses import asdict

from wase.toy import TOY_MODEL_OVERRIDES, ToySetup, run_toy, toy_train_config

DEFAULT_RUNS = ["onset_offset:oracle", "onset:oracle", "onset_offset", "voiceprint", "onset_offset_voiceprint"]


def parse_run(spec: str) -> tuple[str, bool]:
    mode, _, source = spec.partition(":")
    if source not in ("", "oracle"):
        raise argparse.ArgumentTypeError(f"run {spec!r}: expected MODE or MODE:oracle")
    return mode, source == "oracle"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--runs", nargs="+", default=DEFAULT_RUNS, help="cue modes, optionally suffixed ':oracle'")
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--blocks-per-group", type=int, default=None)
    ap.add_argument("--no-remix", action="store_true", help="reuse the fixed training mixtures every epoch")
    ap.add_argument("--out", default=None, help="write all reports to this JSON file")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args(argv)

    setup = ToySetup()
    train_cfg = toy_train_config(max_epochs=args.epochs, batch_size=args.batch_size,
                                 remix_each_epoch=not args.no_remix)
    overrides = dict(TOY_MODEL_OVERRIDES)
    if args.blocks_per_group is not None:
        overrides["blocks_per_group"] = args.blocks_per_group
    results = []
    for spec in args.runs:
        mode, oracle = parse_run(spec)
        for seed in args.seeds:
            r = run_toy(mode, oracle=oracle, seed=seed, setup=setup, train_cfg=train_cfg,
                        model_overrides=overrides, verbose=not args.quiet)
            r.pop("per_example")
            r["run"] = spec
            results.append(r)
            probes = ", ".join(f"{a:.3f}/{f:.3f}" for a, f in zip(r["acc"], r["f1"]))
            print(f"{spec:32s} seed {seed}: SI-SNRi {r['mean_sisnri_db']:6.2f} dB  "
                  f"probes ACC/F1 [{probes}]  {r['train_seconds'] / 60:.1f} min", flush=True)

    print("\nmedian SI-SNRi over seeds")
    for spec in args.runs:
        vals = [r["mean_sisnri_db"] for r in results if r["run"] == spec]
        print(f"  {spec:32s} {statistics.median(vals):6.2f} dB  (n={len(vals)})")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"setup": asdict(setup), "train": train_cfg.to_dict(), "model_overrides": overrides,
                       "results": results}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
