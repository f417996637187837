"""Desk-scale toy runs on the synthetic pseudo-speaker corpus."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .model import WASE, preset
from .signal import Clip, group_by_speaker, sample_mixtures, synth_corpus
from .train import Trainer, TrainConfig, evaluate


@dataclass
class ToySetup:
    speakers: int = 8
    clips_per_speaker: int = 10
    clip_seconds: float = 2.0
    eval_clips_per_speaker: int = 3
    n_train: int = 48
    n_dev: int = 8
    n_eval: int = 24
    segment_seconds: float = 2.0
    corpus_seed: int = 7


# 8 blocks per group give a 1531-frame receptive field, enough to span a 2 s mixture
TOY_MODEL_OVERRIDES = {"blocks_per_group": 8}


def toy_train_config(**overrides) -> TrainConfig:
    """Training schedule used by the toy acceptance runs: 30 epochs of freshly remixed data."""
    return TrainConfig(**{"max_epochs": 30, "batch_size": 4, "remix_each_epoch": True, **overrides})


def split_corpus(clips: list[Clip], eval_per_speaker: int) -> tuple[list[Clip], list[Clip]]:
    train, held = [], []
    for spk_clips in group_by_speaker(clips).values():
        train += spk_clips[:-eval_per_speaker]
        held += spk_clips[-eval_per_speaker:]
    return train, held


def make_toy_data(setup: ToySetup, label_mode: str, seed: int):
    clips = synth_corpus(setup.speakers, setup.clips_per_speaker, setup.clip_seconds, seed=setup.corpus_seed)
    train_clips, held_clips = split_corpus(clips, setup.eval_clips_per_speaker)
    rng = np.random.default_rng([seed, 101])
    train = sample_mixtures(train_clips, setup.n_train, rng, label_mode, setup.segment_seconds)
    dev = sample_mixtures(held_clips, setup.n_dev, np.random.default_rng([seed, 102]), label_mode,
                          setup.segment_seconds, doubled=True)
    test = sample_mixtures(held_clips, setup.n_eval, np.random.default_rng([seed, 103]), label_mode,
                           setup.segment_seconds, doubled=True)
    return train_clips, train, dev, test


def run_toy(cue_mode: str, oracle: bool = False, seed: int = 0, setup: ToySetup | None = None,
            train_cfg: TrainConfig | None = None, model_overrides: dict | None = None,
            label_mode: str | None = None, verbose: bool = False) -> dict:
    """Train one desk-preset model and evaluate it on held-out clips."""
    setup = setup or ToySetup()
    overrides = TOY_MODEL_OVERRIDES if model_overrides is None else model_overrides
    cfg = preset("desk", cue_mode=cue_mode, seed=seed, **overrides)
    label_mode = label_mode or cfg.label_mode or "onset_offset"
    tcfg = replace(train_cfg or toy_train_config(), seed=seed, oracle_cues=oracle,
                   clip_seconds=setup.segment_seconds)
    train_clips, train, dev, test = make_toy_data(setup, label_mode, seed)
    model = WASE(cfg)
    trainer = Trainer(model, tcfg, train, dev, reference_pool=train_clips)
    t0 = time.time()
    history = []
    while not trainer.state.stop and trainer.state.epoch < tcfg.max_epochs:
        history += trainer.fit(epochs=1)
        if verbose:
            h = history[-1]
            print(f"[{cue_mode}{' oracle' if oracle else ''} s{seed}] epoch {h['epoch']} "
                  f"loss {h['train_loss']:.3f} dev {h.get('dev_sisnri', float('nan')):.2f} "
                  f"acc {[round(a, 3) for a in h.get('acc', [])]} {h['wall_s']:.0f}s", flush=True)
    report = evaluate(model, test, oracle_cues=oracle)
    report["history"] = history
    report["train_seconds"] = time.time() - t0
    report["seed"] = seed
    return report
