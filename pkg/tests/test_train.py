import json
import math

import numpy as np
import pytest

from wase import tensor as T
from wase.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from wase.model import WASE, ModelConfig, ForwardOutput
from wase.signal import frame_acc_f1, sample_mixtures, synth_corpus
from wase.tensor import Tensor
from wase.train import (NumericalError, Trainer, TrainConfig, TrainState, compute_loss, evaluate,
                        lr_schedule_step, run_oracle_cue_mode, train_preset, write_report)


def small_cfg(**kw) -> ModelConfig:
    base = dict(C=8, B=6, H_conv=8, skip=6, groups=2, blocks_per_group=2, vp_channels=6, vp_hidden=4,
                vp_kernel=64, vp_stride=32, cue_mode="onset_offset_voiceprint")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def clips():
    return synth_corpus(3, 4, 0.5, seed=5)


@pytest.fixture(scope="module")
def tiny_data(clips):
    rng = np.random.default_rng(0)
    train = sample_mixtures(clips, 6, rng, "onset_offset", 0.5)
    dev = sample_mixtures(clips, 4, np.random.default_rng(1), "onset_offset", 0.5, doubled=True)
    return train, dev


def fresh_trainer(tiny_data, clips, **kw):
    train, dev = tiny_data
    cfg = TrainConfig(**{"batch_size": 2, "max_epochs": 3, "seed": 3, **kw})
    return Trainer(WASE(small_cfg()), cfg, train, dev, reference_pool=clips)


# ---------------------------------------------------------------------------
# loss


def _out(est_t, est_i, probes=()):
    return ForwardOutput(Tensor(est_t, requires_grad=True), Tensor(est_i, requires_grad=True),
                         probes[0] if probes else None, list(probes[1:]))


class TestLoss:
    def test_perfect_estimates_floor(self):
        rng = np.random.default_rng(0)
        s, n = rng.standard_normal(400), rng.standard_normal(400)
        s, n = s - s.mean(), n - n.mean()
        s, n = s / np.linalg.norm(s), n / np.linalg.norm(n)
        labels = np.r_[np.zeros(20), np.ones(30)]
        cue = Tensor(np.clip(labels, 1e-7, 1 - 1e-7).reshape(1, -1))
        loss, parts = compute_loss(_out(s, n, [cue]), s, n, labels)
        assert loss.item() == pytest.approx(-240.0, abs=1e-3)
        assert parts["cue_ce"] < 1e-6

    def test_breakdown_sums(self):
        rng = np.random.default_rng(1)
        labels = (np.arange(30) > 10).astype(float)
        probes = [Tensor(rng.uniform(0.05, 0.95, (1, 30))) for _ in range(3)]
        loss, parts = compute_loss(_out(rng.standard_normal(240), rng.standard_normal(240), probes),
                                   rng.standard_normal(240), rng.standard_normal(240), labels, loss_ratio=0.7)
        assert loss.item() == pytest.approx(parts["target_term"] + parts["interferer_term"] + parts["cue_term"],
                                            abs=1e-12)
        assert parts["cue_term"] == pytest.approx(0.7 * parts["cue_ce"], abs=1e-12)
        expected = np.mean([T.binary_cross_entropy(p, labels.reshape(1, -1)).item() for p in probes])
        assert parts["cue_ce"] == pytest.approx(expected, abs=1e-12)

    def test_zero_ratio_is_extraction_only(self):
        rng = np.random.default_rng(2)
        s, n = rng.standard_normal(200), rng.standard_normal(200)
        est = rng.standard_normal(200), rng.standard_normal(200)
        cue = Tensor(rng.uniform(0.1, 0.9, (1, 25)))
        a, _ = compute_loss(_out(*est, [cue]), s, n, np.ones(25), loss_ratio=0.0)
        b, _ = compute_loss(_out(*est), s, n, None)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_default_ratio_is_one(self):
        assert TrainConfig().loss_ratio == 1.0
        assert TrainConfig().interferer_weight == 1.0

    def test_config_guards(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_init=0)
        with pytest.raises(ValueError):
            TrainConfig(loss_ratio=-1)
        with pytest.raises(ValueError):
            TrainConfig(lr_halve_patience=0)

    def test_presets(self):
        assert train_preset("desk").vp_freeze_epoch == 15
        assert train_preset("paper").vp_freeze_epoch == 150


# ---------------------------------------------------------------------------
# schedule


class TestSchedule:
    def run(self, scores, **kw):
        cfg = TrainConfig(**kw)
        st = TrainState(lr=cfg.lr_init)
        trace = []
        for s in scores:
            lr_schedule_step(st, s, cfg)
            trace.append((st.lr, st.stop))
        return st, trace

    def test_halves_after_ten_flat_epochs(self):
        st, trace = self.run([1.0] + [0.5] * 10)
        assert trace[9][0] == 1e-3 and trace[10][0] == 5e-4
        assert st.epochs_since_improve == 0

    def test_improvement_resets(self):
        st, _ = self.run([1.0] + [0.5] * 9 + [2.0] + [0.5] * 9)
        assert st.lr == 1e-3

    def test_stop_only_at_floor(self):
        st, trace = self.run([1.0] + [0.0] * 200)
        lrs = [lr for lr, _ in trace]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert all(math.log2(1e-3 / lr) == round(math.log2(1e-3 / lr)) for lr in lrs)
        assert not any(stop for lr, stop in trace if lr > 2.5e-4)
        assert st.stop and st.lr == 2.5e-4
        # two halvings (1e-3 -> 5e-4 -> 2.5e-4), 10 flat epochs each, then 10 at the floor
        first_stop = next(i for i, (_, s) in enumerate(trace) if s)
        assert first_stop == 30


# ---------------------------------------------------------------------------
# evaluation


class TestEvaluate:
    def test_oracle_labels_score_perfectly(self):
        labels = np.r_[np.zeros(7), np.ones(20), np.zeros(3)]
        assert frame_acc_f1(labels, labels) == (1.0, 1.0)

    def test_report_schema_and_doubling(self, tiny_data, tmp_path):
        _, dev = tiny_data
        model = WASE(small_cfg())
        report = evaluate(model, dev)
        assert report["n_examples"] == 4 == 2 * len({ex.meta["mixture_id"] for ex in dev})
        assert {"mean_sisnri_db", "acc", "f1", "n_examples", "cue_mode", "per_example"} <= set(report)
        assert len(report["acc"]) == len(report["f1"]) == model.cfg.groups + 1
        write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
        assert len((tmp_path / "r.csv").read_text().strip().splitlines()) == 1 + len(dev)
        assert json.loads((tmp_path / "r.json").read_text())["n_examples"] == 4

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate(WASE(small_cfg()), [])

    def test_oracle_mode_identities(self, tiny_data):
        _, dev = tiny_data
        ex = dev[0]
        m = WASE(small_cfg(cue_mode="onset_offset", zero_init_heads=False))
        none = WASE(small_cfg(cue_mode="none", zero_init_heads=False),
                    params={k: v for k, v in m.params.items() if not k.startswith(("det.", "probe.", "vp."))})
        ones = type(ex)(**{**ex.__dict__, "oracle_labels": np.ones_like(ex.oracle_labels)})
        zeros = type(ex)(**{**ex.__dict__, "oracle_labels": np.zeros_like(ex.oracle_labels)})
        with T.no_grad():
            ref = none.forward(ex.mixture.samples).target_est.data
        np.testing.assert_allclose(run_oracle_cue_mode(m, ones).samples, ref, atol=1e-12)
        assert not run_oracle_cue_mode(m, zeros).samples.any()

    def test_oracle_mode_needs_labels(self, tiny_data):
        ex = tiny_data[1][0]
        bad = type(ex)(**{**ex.__dict__, "oracle_labels": None})
        with pytest.raises(ValueError, match="labels"):
            run_oracle_cue_mode(WASE(small_cfg(cue_mode="onset")), bad)


# ---------------------------------------------------------------------------
# training loop


class TestTraining:
    def test_overfit_single_example(self, tiny_data):
        ex = tiny_data[0][0]
        trainer = Trainer(WASE(small_cfg(cue_mode="onset_offset")), TrainConfig(batch_size=1, seed=0, lr_init=3e-3),
                          [ex], [])
        losses = [trainer.train_step([0], 0)["total"] for _ in range(50)]
        # monotone up to a 3-step window: each loss beats the max of the 3 before it
        assert all(losses[i] < max(losses[i - 3:i]) for i in range(3, 50))
        assert losses[-1] < losses[0]
        report = evaluate(trainer.model, [ex])
        assert report["mean_sisnri_db"] > 0

    def test_determinism(self, tiny_data, clips):
        a = fresh_trainer(tiny_data, clips)
        b = fresh_trainer(tiny_data, clips)
        for t in (a, b):
            t.train_epoch()
            t.train_epoch(max_steps=2)
        assert len(a.state.loss_trace) >= 5
        assert a.state.loss_trace == b.state.loss_trace

    def test_batch_order_depends_on_epoch_only(self, tiny_data, clips):
        t = fresh_trainer(tiny_data, clips)
        np.testing.assert_array_equal(t.epoch_order(4), fresh_trainer(tiny_data, clips).epoch_order(4))
        assert not np.array_equal(t.epoch_order(0), t.epoch_order(1))

    def test_reference_redrawn_from_other_clips(self, tiny_data, clips):
        t = fresh_trainer(tiny_data, clips)
        ex = t.train_set[0]
        seen = set()
        for epoch in range(12):
            r = t._reference(ex, epoch, 0)
            match = [c for c in clips if c.wave.samples.size == r.size and np.array_equal(c.wave.samples, r)]
            assert match and match[0].speaker_id == ex.target_speaker_id
            assert match[0].clip_id != ex.meta["target_clip"]
            seen.add(match[0].clip_id)
        assert len(seen) > 1

    def test_freeze_is_exact(self, tiny_data, clips):
        t = fresh_trainer(tiny_data, clips, vp_freeze_epoch=1)
        t.train_epoch()
        before = {k: t.model.params[k].data.tobytes() for k in t.model.voiceprint_param_names()}
        others = {k: p.data.copy() for k, p in t.model.params.items() if not k.startswith("vp.")}
        t.train_epoch()
        assert t.state.frozen_modules == ["voiceprint"]
        for k, raw in before.items():
            assert t.model.params[k].data.tobytes() == raw, k
        assert any(not np.array_equal(t.model.params[k].data, v) for k, v in others.items())

    def test_nonfinite_loss_aborts(self, tiny_data, clips):
        t = fresh_trainer(tiny_data, clips)
        t.model.params["enc.weight"].data[:] = np.nan
        with pytest.raises(NumericalError, match="batch item"):
            t.train_step([0, 1], 0)

    def test_remix_is_deterministic(self, tiny_data, clips):
        a = fresh_trainer(tiny_data, clips, remix_each_epoch=True)
        b = fresh_trainer(tiny_data, clips, remix_each_epoch=True)
        ea, eb = a.epoch_examples(2), b.epoch_examples(2)
        assert len(ea) == len(a.train_set)
        for x, y in zip(ea, eb):
            np.testing.assert_array_equal(x.mixture.samples, y.mixture.samples)
        assert not np.array_equal(a.epoch_examples(3)[0].mixture.samples, ea[0].mixture.samples)

    def test_fit_logs_and_checkpoints(self, tiny_data, clips, tmp_path):
        t = fresh_trainer(tiny_data, clips, max_epochs=2)
        hist = t.fit(log_path=tmp_path / "log.jsonl", ckpt_path=tmp_path / "best.ckpt")
        lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert len(lines) == len(hist) == 2
        assert {"epoch", "lr", "train_loss", "dev_sisnri", "acc", "f1", "wall_s"} <= set(lines[0])
        assert (tmp_path / "best.ckpt").exists()


# ---------------------------------------------------------------------------
# checkpoints


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = WASE(small_cfg())
        save_checkpoint(tmp_path / "m.ckpt", m, {"x": np.arange(3.0)}, {"note": "hi"})
        m2, extras, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert m2.cfg == m.cfg and meta == {"note": "hi"}
        np.testing.assert_array_equal(extras["x"], np.arange(3.0))
        for k in m.params:
            assert m.params[k].data.tobytes() == m2.params[k].data.tobytes()

    def test_header_layout(self, tmp_path):
        m = WASE(small_cfg(cue_mode="none"))
        save_checkpoint(tmp_path / "m.ckpt", m)
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"WASE"
        header, arrays = read_checkpoint(tmp_path / "m.ckpt")
        offsets = [e["offset"] for e in header["manifest"]]
        assert offsets == sorted(offsets) and offsets[0] == 0
        assert len(raw) == 16 + len(json.dumps(header, sort_keys=True, separators=(",", ":"))) + 8 * m.count_params()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_shape_mismatch(self, tmp_path):
        m = WASE(small_cfg(cue_mode="none"))
        m.params["enc.weight"] = Tensor(np.zeros((3, 1, 2)))
        save_checkpoint(tmp_path / "m.ckpt", m)
        with pytest.raises(CheckpointError, match="enc.weight"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", WASE(small_cfg(cue_mode="none")))
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_resume_bit_identical(self, tiny_data, clips, tmp_path):
        straight = fresh_trainer(tiny_data, clips, vp_freeze_epoch=1)
        straight.train_epoch()
        straight.train_epoch()
        split = fresh_trainer(tiny_data, clips, vp_freeze_epoch=1)
        split.train_epoch(max_steps=2)
        split.save(tmp_path / "mid.ckpt")
        resumed = Trainer.restore(tmp_path / "mid.ckpt", *tiny_data, reference_pool=clips)
        resumed.train_epoch()
        resumed.train_epoch()
        assert len(straight.state.loss_trace) >= 5
        assert resumed.state.loss_trace == straight.state.loss_trace
        for k, p in straight.model.params.items():
            assert p.data.tobytes() == resumed.model.params[k].data.tobytes(), k


# ---------------------------------------------------------------------------
# toy harness


def test_run_toy_smoke():
    from wase.toy import ToySetup, run_toy, toy_train_config

    setup = ToySetup(speakers=3, clips_per_speaker=4, clip_seconds=0.5, eval_clips_per_speaker=2,
                     n_train=4, n_dev=2, n_eval=2, segment_seconds=0.5)
    dims = dict(C=8, B=6, H_conv=8, skip=6, groups=2, blocks_per_group=2, vp_channels=6, vp_hidden=4)
    r = run_toy("onset", setup=setup, train_cfg=toy_train_config(max_epochs=1, batch_size=2),
                model_overrides=dims)
    assert r["n_examples"] == 2 and len(r["history"]) == 1
    assert len(r["acc"]) == 3 and np.isfinite(r["mean_sisnri_db"])
    assert toy_train_config().remix_each_epoch
