"""Multi-task training, learning-rate schedule, and the evaluation harness."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .model import WASE, ForwardOutput
from .signal import (Clip, MixtureExample, Waveform, f1_from_counts, frame_counts, group_by_speaker,
                     sample_mixtures, si_snr)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_halve_patience: int = 10
    stop_patience: int = 10
    lr_floor: float = 2.5e-4
    vp_freeze_epoch: int = 15
    loss_ratio: float = 1.0
    interferer_weight: float = 1.0
    batch_size: int = 4
    max_epochs: int = 30
    seed: int = 0
    snr_range: tuple[float, float] = (-2.5, 2.5)
    clip_seconds: float = 4.0
    oracle_cues: bool = False
    grad_clip: Optional[float] = 5.0
    remix_each_epoch: bool = False

    def __post_init__(self):
        self.snr_range = tuple(self.snr_range)
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.loss_ratio < 0:
            raise ValueError("loss_ratio must be non-negative")
        if min(self.lr_halve_patience, self.stop_patience, self.batch_size) < 1:
            raise ValueError("patience values and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range"] = list(self.snr_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


TRAIN_PRESETS = {
    "desk": {},
    "paper": dict(vp_freeze_epoch=150, max_epochs=200),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


@dataclass
class TrainState:
    epoch: int = 0
    batch_index: int = 0
    step: int = 0
    lr: float = 1e-3
    best_dev_score: Optional[float] = None
    epochs_since_improve: int = 0
    stop: bool = False
    frozen_modules: list[str] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def compute_loss(out: ForwardOutput, target: np.ndarray, interferer: np.ndarray,
                 oracle_labels: np.ndarray | None, loss_ratio: float = 1.0,
                 interferer_weight: float = 1.0) -> tuple[T.Tensor, dict]:
    """Negative SI-SNR of both estimates plus the weighted mean cue cross-entropy.

    The gating detector and every probe contribute one CE term each; their mean is the
    detection loss.
    """
    snr_t = T.si_snr(out.target_est, target)
    snr_i = T.si_snr(out.interferer_est, interferer)
    target_term = -snr_t
    interferer_term = snr_i * (-interferer_weight)
    total = target_term + interferer_term
    breakdown = {"target_si_snr_db": snr_t.item(), "interferer_si_snr_db": snr_i.item(),
                 "target_term": target_term.item(), "interferer_term": interferer_term.item(),
                 "cue_ce": 0.0, "cue_term": 0.0}
    detectors = out.detectors
    if detectors and oracle_labels is not None:
        labels = np.asarray(oracle_labels, dtype=np.float64).reshape(1, -1)
        ce = None
        for det in detectors:
            term = T.binary_cross_entropy(det, labels)
            ce = term if ce is None else ce + term
        ce = ce * (1.0 / len(detectors))
        cue_term = ce * loss_ratio
        total = total + cue_term
        breakdown["cue_ce"] = ce.item()
        breakdown["cue_term"] = cue_term.item()
    breakdown["total"] = total.item()
    return total, breakdown


# ---------------------------------------------------------------------------
# schedule


def lr_schedule_step(state: TrainState, dev_score: float, cfg: TrainConfig) -> TrainState:
    """Halve on plateau until the floor is reached; then stop on a further plateau."""
    if state.best_dev_score is None or dev_score > state.best_dev_score:
        state.best_dev_score = float(dev_score)
        state.epochs_since_improve = 0
        return state
    state.epochs_since_improve += 1
    at_floor = state.lr <= cfg.lr_floor * (1 + 1e-12)
    if at_floor:
        if state.epochs_since_improve >= cfg.stop_patience:
            state.stop = True
    elif state.epochs_since_improve >= cfg.lr_halve_patience:
        state.lr /= 2.0
        state.epochs_since_improve = 0
    return state


# ---------------------------------------------------------------------------
# evaluation


def run_oracle_cue_mode(model: WASE, example: MixtureExample) -> Waveform:
    """Extract with the oracle label vector gating the features instead of the detector."""
    if example.oracle_labels is None:
        raise ValueError("example has no oracle labels")
    with T.no_grad():
        out = model.forward(example.mixture.samples, example.reference.samples, oracle_cue=example.oracle_labels)
    return Waveform(out.target_est.data.copy(), example.mixture.sample_rate)


def _forward_eval(model: WASE, ex: MixtureExample, oracle: bool) -> ForwardOutput:
    with T.no_grad():
        return model.forward(ex.mixture.samples, ex.reference.samples,
                             oracle_cue=ex.oracle_labels if oracle else None)


def evaluate(model: WASE, examples: Sequence[MixtureExample], oracle_cues: bool = False) -> dict:
    """SI-SNR improvement per example and pooled frame ACC/F1.

    ``acc``/``f1`` list the probes from shallow to deep; ``cue_acc``/``cue_f1`` score the
    gating detector.
    """
    if not examples:
        raise ValueError("evaluate: empty example set")
    rows = []
    counts = None
    for i, ex in enumerate(examples):
        out = _forward_eval(model, ex, oracle_cues)
        est = Waveform(out.target_est.data, ex.mixture.sample_rate)
        s_est = si_snr(est, ex.target).si_snr_db
        s_mix = si_snr(ex.mixture, ex.target).si_snr_db
        rows.append({"index": i, "sisnri_db": s_est - s_mix, "si_snr_db": s_est, "mixture_si_snr_db": s_mix,
                     "snr_db": ex.snr_db, "target_speaker_id": ex.target_speaker_id,
                     "interferer_speaker_id": ex.interferer_speaker_id})
        if out.detectors and not oracle_cues:
            c = [frame_counts(d.data.reshape(-1), ex.oracle_labels, model.cfg.cue_threshold) for d in out.detectors]
            counts = c if counts is None else [tuple(a + b for a, b in zip(x, y)) for x, y in zip(counts, c)]
    acc = [cnt[3] / cnt[4] for cnt in counts] if counts else []
    f1 = [f1_from_counts(cnt[0], cnt[1], cnt[2]) for cnt in counts] if counts else []
    return {
        "cue_mode": model.cfg.cue_mode,
        "oracle_cues": bool(oracle_cues),
        "n_examples": len(rows),
        "mean_sisnri_db": float(np.mean([r["sisnri_db"] for r in rows])),
        "cue_acc": acc[0] if acc else None,
        "cue_f1": f1[0] if f1 else None,
        "acc": acc[1:],
        "f1": f1[1:],
        "per_example": rows,
    }


def write_report(report: dict, json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    if csv_path is not None:
        rows = report["per_example"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    """Owns the optimiser, schedule state and the deterministic batch order.

    Batch order for epoch ``e`` depends only on ``(seed, e)``, so a run restored from a
    checkpoint mid-epoch continues exactly where it stopped.
    """

    def __init__(self, model: WASE, cfg: TrainConfig, train_set: Sequence[MixtureExample],
                 dev_set: Sequence[MixtureExample] = (), reference_pool: Sequence[Clip] | None = None,
                 state: TrainState | None = None):
        self.model = model
        self.cfg = cfg
        self.train_set = list(train_set)
        self.dev_set = list(dev_set)
        self.pool = group_by_speaker(reference_pool) if reference_pool else None
        self.state = state or TrainState(lr=cfg.lr_init)
        self.opt = T.Adam(model.params, lr=self.state.lr)
        self._remixed: tuple[int, list[MixtureExample]] | None = None

    # -- data order ------------------------------------------------------------

    def epoch_examples(self, epoch: int) -> list[MixtureExample]:
        """Fixed training set, or fresh mixtures of the pool clips when remixing."""
        if not (self.cfg.remix_each_epoch and self.pool):
            return self.train_set
        if self._remixed is None or self._remixed[0] != epoch:
            ex0 = self.train_set[0]
            mode = ex0.meta.get("mode", "onset_offset")
            seconds = len(ex0.mixture) / ex0.mixture.sample_rate
            clips = [c for group in self.pool.values() for c in group]
            rng = np.random.default_rng([self.cfg.seed, epoch, 2])
            self._remixed = (epoch, sample_mixtures(clips, len(self.train_set), rng, mode, seconds,
                                                    self.model.cfg.L_enc_stride, self.cfg.snr_range))
        return self._remixed[1]

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch, 0]).permutation(len(self.train_set))

    def _reference(self, ex: MixtureExample, epoch: int, idx: int) -> np.ndarray:
        """Re-draw a same-speaker reference per epoch when a clip pool is available."""
        if not self.pool:
            return ex.reference.samples
        target_clip = ex.meta.get("target_clip")
        options = [c for c in self.pool.get(ex.target_speaker_id, []) if c.clip_id != target_clip]
        if not options:
            return ex.reference.samples
        rng = np.random.default_rng([self.cfg.seed, epoch, 1, idx])
        return options[int(rng.integers(len(options)))].wave.samples

    def batches(self, epoch: int) -> list[np.ndarray]:
        order = self.epoch_order(epoch)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    # -- steps ----------------------------------------------------------------

    def frozen_names(self, epoch: int) -> list[str]:
        return self.model.voiceprint_param_names() if epoch >= self.cfg.vp_freeze_epoch else []

    def train_step(self, indices: Sequence[int], epoch: int) -> dict:
        model, cfg = self.model, self.cfg
        model.zero_grad()
        agg: dict[str, float] = {}
        examples = self.epoch_examples(epoch)
        for pos, idx in enumerate(indices):
            ex = examples[idx]
            ref = self._reference(ex, epoch, int(idx))
            out = model.forward(ex.mixture.samples, ref, oracle_cue=ex.oracle_labels if cfg.oracle_cues else None)
            loss, parts = compute_loss(out, ex.target.samples, ex.interferer.samples, ex.oracle_labels,
                                       cfg.loss_ratio, cfg.interferer_weight)
            if not all(math.isfinite(v) for v in parts.values()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {self.state.step}, "
                                     f"batch item {pos} (example {idx}): {parts}")
            (loss * (1.0 / len(indices))).backward()
            for k, v in parts.items():
                agg[k] = agg.get(k, 0.0) + v / len(indices)
        frozen = self.frozen_names(epoch)
        self._clip_gradients(frozen)
        self.opt.step(lr=self.state.lr, frozen=frozen)
        self.state.step += 1
        self.state.loss_trace.append(agg["total"])
        return agg

    def _clip_gradients(self, frozen) -> None:
        if not self.cfg.grad_clip:
            return
        skip = set(frozen)
        grads = [p.grad for k, p in self.model.params.items() if p.grad is not None and k not in skip]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if norm > self.cfg.grad_clip:
            for g in grads:
                g *= self.cfg.grad_clip / norm

    def train_epoch(self, max_steps: int | None = None) -> dict:
        """Run the remaining batches of the current epoch (or at most ``max_steps``)."""
        st = self.state
        epoch = st.epoch
        st.frozen_modules = ["voiceprint"] if self.frozen_names(epoch) else []
        batches = self.batches(epoch)
        losses = []
        t0 = time.time()
        while st.batch_index < len(batches):
            if max_steps is not None and len(losses) >= max_steps:
                return {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                        "complete": False}
            parts = self.train_step(batches[st.batch_index], epoch)
            losses.append(parts["total"])
            st.batch_index += 1
        st.epoch += 1
        st.batch_index = 0
        return {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                "complete": True, "wall_s": time.time() - t0}

    def fit(self, log_path=None, ckpt_path=None, epochs: int | None = None) -> list[dict]:
        """Train until the schedule stops, ``max_epochs`` is reached, or ``epochs`` more have run."""
        history = []
        remaining = epochs
        while not self.state.stop and self.state.epoch < self.cfg.max_epochs:
            if remaining is not None:
                if remaining <= 0:
                    break
                remaining -= 1
            t0 = time.time()
            metrics = self.train_epoch()
            lr_used = self.state.lr
            entry = {"epoch": metrics["epoch"], "lr": lr_used, "train_loss": metrics["train_loss"]}
            if self.dev_set:
                report = evaluate(self.model, self.dev_set, oracle_cues=self.cfg.oracle_cues)
                entry.update(dev_sisnri=report["mean_sisnri_db"], acc=report["acc"], f1=report["f1"])
                improved = self.state.best_dev_score is None or report["mean_sisnri_db"] > self.state.best_dev_score
                lr_schedule_step(self.state, report["mean_sisnri_db"], self.cfg)
                if improved and ckpt_path is not None:
                    self.save(ckpt_path)
            entry["wall_s"] = time.time() - t0
            history.append(entry)
            log.info("epoch %d lr %.2e loss %.3f dev %s", entry["epoch"], lr_used, entry["train_loss"],
                     entry.get("dev_sisnri"))
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return history

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        extras = {"adam.step": np.array([float(self.opt.step_count)])}
        for k in self.model.params:
            extras[f"adam.m.{k}"] = self.opt.m[k]
            extras[f"adam.v.{k}"] = self.opt.v[k]
        self.state.lr = float(self.state.lr)
        save_checkpoint(path, self.model, extras,
                        meta={"train_config": self.cfg.to_dict(), "train_state": self.state.to_dict()})

    @classmethod
    def restore(cls, path, train_set, dev_set=(), reference_pool=None,
                cfg: TrainConfig | None = None) -> "Trainer":
        model, extras, meta = load_checkpoint(path)
        cfg = cfg or TrainConfig.from_dict(meta["train_config"])
        state = TrainState.from_dict(meta["train_state"]) if "train_state" in meta else None
        trainer = cls(model, cfg, train_set, dev_set, reference_pool, state)
        if "adam.step" in extras:
            trainer.opt.step_count = int(extras["adam.step"][0])
            for k in model.params:
                trainer.opt.m[k] = extras[f"adam.m.{k}"]
                trainer.opt.v[k] = extras[f"adam.v.{k}"]
        return trainer
