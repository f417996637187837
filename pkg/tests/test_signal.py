import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wase.signal import (
    Clip, Waveform, WavFormatError, build_example, count_transitions, downsample_labels, energy_vad,
    frame_acc_f1, load_corpus, load_examples, make_oracle_labels, measured_snr_db, mix_sources,
    pad_random_silence, quantize_16bit, read_wav, rle_decode, rle_encode, sample_mixtures, save_corpus,
    save_examples, scale_to_snr, si_snr, si_snr_improvement, spectral_centroid, swap_target, synth_corpus,
    write_wav,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(4, 4, 1.5, seed=3)


def tone(seconds, freq=200.0, sr=8000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestWav:
    def test_round_trip_16bit(self, tmp_path):
        rng = np.random.default_rng(0)
        x = quantize_16bit(rng.uniform(-1, 1, 500)).astype(float) / 32768.0
        write_wav(tmp_path / "a.wav", Waveform(x, 8000))
        y = read_wav(tmp_path / "a.wav")
        assert y.sample_rate == 8000
        np.testing.assert_array_equal(y.samples, x)

    def test_zeros(self, tmp_path):
        write_wav(tmp_path / "z.wav", Waveform(np.zeros(64)))
        np.testing.assert_array_equal(read_wav(tmp_path / "z.wav").samples, 0.0)

    def test_min_code_is_minus_one(self, tmp_path):
        write_wav(tmp_path / "m.wav", Waveform(np.array([-1.0, 0.5])))
        y = read_wav(tmp_path / "m.wav").samples
        assert y[0] == -1.0 and y[1] == 0.5

    def test_clamps_positive_full_scale(self, tmp_path):
        write_wav(tmp_path / "c.wav", Waveform(np.array([1.0, 2.0])))
        np.testing.assert_array_equal(read_wav(tmp_path / "c.wav").samples, 1 - 1 / 32768)

    def test_float32_round_trip(self, tmp_path):
        x = np.random.default_rng(1).uniform(-1, 1, 100).astype(np.float32).astype(float)
        write_wav(tmp_path / "f.wav", Waveform(x, 16000), float32=True)
        y = read_wav(tmp_path / "f.wav")
        assert y.sample_rate == 16000
        np.testing.assert_array_equal(y.samples, x)

    def test_truncated(self, tmp_path):
        write_wav(tmp_path / "t.wav", Waveform(np.zeros(100)))
        raw = (tmp_path / "t.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(raw[:-50])
        with pytest.raises(WavFormatError, match="truncated"):
            read_wav(tmp_path / "t.wav")

    def test_stereo_rejected(self, tmp_path):
        payload = np.zeros(8, dtype="<i2").tobytes()
        hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 8000, 32000, 4, 16)
        hdr += b"data" + struct.pack("<I", len(payload))
        (tmp_path / "s.wav").write_bytes(hdr + payload)
        with pytest.raises(WavFormatError, match="mono"):
            read_wav(tmp_path / "s.wav")

    def test_unsupported_depth(self, tmp_path):
        payload = np.zeros(8, dtype="u1").tobytes()
        hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
        hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 8000, 1, 8)
        hdr += b"data" + struct.pack("<I", len(payload))
        (tmp_path / "u.wav").write_bytes(hdr + payload)
        with pytest.raises(WavFormatError, match="unsupported"):
            read_wav(tmp_path / "u.wav")

    def test_not_wav(self, tmp_path):
        (tmp_path / "n.wav").write_bytes(b"hello world, not audio")
        with pytest.raises(WavFormatError):
            read_wav(tmp_path / "n.wav")


class TestMixing:
    def test_single_source(self):
        w = Waveform(np.array([1.0, -2.0]))
        np.testing.assert_array_equal(mix_sources([w]).samples, w.samples)

    def test_cancellation(self):
        s = np.random.default_rng(0).standard_normal(10)
        np.testing.assert_array_equal(mix_sources([Waveform(s), Waveform(-s)]).samples, 0.0)

    def test_sum(self):
        np.testing.assert_array_equal(mix_sources([Waveform([1.0, 2.0]), Waveform([3.0, 4.0])]).samples, [4, 6])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mix_sources([Waveform([1.0]), Waveform([1.0, 2.0])])

    def test_equal_power_zero_db(self):
        a, b = Waveform(tone(0.2)), Waveform(tone(0.2, 300))
        out = scale_to_snr(a, b, 0.0)
        assert abs(out.samples.std() / b.samples.std() - 1.0) < 1e-3

    def test_twenty_db(self):
        a = Waveform(tone(0.5))
        b = Waveform(tone(0.5))
        out = scale_to_snr(a, b, 20.0)
        np.testing.assert_allclose(np.sum(out.samples ** 2) * 100, np.sum(b.samples ** 2), rtol=1e-12)

    @pytest.mark.parametrize("snr", [-2.5, -1.0, 0.0, 1.7, 2.5, 30.0])
    def test_measured_snr(self, snr):
        rng = np.random.default_rng(1)
        a, b = Waveform(rng.standard_normal(300)), Waveform(3 * rng.standard_normal(300))
        assert abs(measured_snr_db(a, scale_to_snr(a, b, snr)) - snr) < 1e-9

    def test_silent_rejected(self):
        with pytest.raises(ValueError):
            scale_to_snr(Waveform(np.zeros(10)), Waveform(np.ones(10)), 0.0)


class TestPadding:
    def test_degenerate_range(self):
        w = Waveform(np.ones(10))
        out = pad_random_silence(w, np.random.default_rng(0), 200, 200)
        assert len(out) == 10 + 1600
        np.testing.assert_array_equal(out.samples[:10], 1.0)
        np.testing.assert_array_equal(out.samples[10:], 0.0)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        w = Waveform(np.ones(5))
        pads = [len(pad_random_silence(w, rng)) - 5 for _ in range(1000)]
        assert min(pads) >= 1600 and max(pads) <= 6400
        assert max(pads) - min(pads) > 3000

    def test_bad_range(self):
        with pytest.raises(ValueError):
            pad_random_silence(Waveform(np.ones(3)), np.random.default_rng(0), 500, 200)


class TestVad:
    def test_tone_all_ones(self):
        np.testing.assert_array_equal(energy_vad(Waveform(tone(0.3))), 1.0)

    def test_constructed_silence(self):
        sr = 8000
        x = np.concatenate([np.zeros(4000), tone(1.0), np.zeros(2400)])
        labels = energy_vad(Waveform(x, sr))
        on = np.flatnonzero(labels)[0]
        off = np.flatnonzero(labels)[-1] + 1
        assert abs(on - 4000) <= 80 and abs(off - 12000) <= 80

    def test_scale_invariant(self, corpus):
        x = corpus[0].wave
        np.testing.assert_array_equal(energy_vad(x), energy_vad(Waveform(x.samples * 0.1)))

    def test_silence_raises(self):
        with pytest.raises(ValueError, match="no voice activity"):
            energy_vad(Waveform(np.zeros(100)))

    def test_single_region(self, corpus):
        for c in corpus:
            assert count_transitions(energy_vad(c.wave)) == 2


class TestDownsample:
    def test_length(self):
        assert downsample_labels(np.zeros(32000), 8).size == 4000
        assert downsample_labels(np.zeros(33), 8).size == 5

    def test_transition_index(self):
        b = np.zeros(32000)
        b[8000:] = 1
        d = downsample_labels(b, 8)
        assert np.flatnonzero(d)[0] == 1000

    def test_all_ones(self):
        np.testing.assert_array_equal(downsample_labels(np.ones(100), 8), 1.0)

    def test_preserves_transitions_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(400, 4000))
            b = np.zeros(n)
            on = int(rng.integers(20, n // 2))
            off = int(rng.integers(on + 20, n - 20)) if rng.uniform() < 0.5 else n
            b[on:off] = 1
            assert count_transitions(downsample_labels(b, 8)) == count_transitions(b)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=300), st.integers(1, 16))
    def test_never_adds_transitions(self, bits, stride):
        b = np.array(bits, dtype=float)
        assert count_transitions(downsample_labels(b, stride)) <= count_transitions(b)


class TestSiSnr:
    def test_negated_estimate_capped(self):
        s = np.random.default_rng(0).standard_normal(200)
        s /= np.sqrt(np.sum((s - s.mean()) ** 2))
        score = si_snr(Waveform(-s), Waveform(s))
        assert score.e_noise_power < 1e-20
        assert abs(score.si_snr_db - 120.0) < 1e-6

    def test_hand_case(self):
        score = si_snr(Waveform([1.0, 1.0]), Waveform([1.0, 0.0]), center=False)
        assert abs(score.si_snr_db) < 1e-9
        assert score.s_target_power == 1.0 and score.e_noise_power == 1.0

    @pytest.mark.parametrize("a", [0.1, 3.0, -2.0])
    def test_scale_invariance(self, a):
        rng = np.random.default_rng(2)
        s, e = rng.standard_normal(300), rng.standard_normal(300)
        base = si_snr(Waveform(e), Waveform(s)).si_snr_db
        assert abs(si_snr(Waveform(a * e), Waveform(s)).si_snr_db - base) < 1e-6

    def test_score_consistency(self):
        rng = np.random.default_rng(3)
        sc = si_snr(Waveform(rng.standard_normal(50)), Waveform(rng.standard_normal(50)))
        assert abs(sc.si_snr_db - 10 * np.log10(sc.s_target_power / sc.e_noise_power)) < 1e-9

    def test_length_and_zero_reference(self):
        with pytest.raises(ValueError):
            si_snr(Waveform([1.0, 2.0]), Waveform([1.0]))
        with pytest.raises(ValueError):
            si_snr(Waveform([1.0, 2.0]), Waveform([0.0, 0.0]))

    def test_improvement(self):
        rng = np.random.default_rng(4)
        s, n = rng.standard_normal(400), rng.standard_normal(400)
        mix = Waveform(s + n)
        assert si_snr_improvement(mix, Waveform(s), mix) == 0.0
        top = si_snr_improvement(Waveform(s), Waveform(s), mix)
        assert abs(top - (si_snr(Waveform(s), Waveform(s)).si_snr_db - si_snr(mix, Waveform(s)).si_snr_db)) < 1e-12
        assert top > 100


class TestFrameMetrics:
    def test_perfect(self):
        labels = np.array([0, 0, 1, 1, 1, 0], dtype=float)
        assert frame_acc_f1(labels, labels) == (1.0, 1.0)

    def test_all_zero_prediction(self):
        labels = np.array([0, 1] * 10, dtype=float)
        assert frame_acc_f1(np.zeros(20), labels) == (0.5, 0.0)

    def test_threshold_is_strict(self):
        assert frame_acc_f1(np.array([0.5]), np.array([1.0]))[0] == 0.0

    def test_mismatch(self):
        with pytest.raises(ValueError):
            frame_acc_f1(np.zeros(3), np.zeros(4))


class TestCorpus:
    def test_deterministic(self):
        a = synth_corpus(3, 2, 1.0, seed=11)
        b = synth_corpus(3, 2, 1.0, seed=11)
        for x, y in zip(a, b):
            assert x.clip_id == y.clip_id
            assert np.array_equal(x.wave.samples, y.wave.samples)

    def test_leading_pause(self, corpus):
        for c in corpus:
            assert not c.wave.samples[:1600].any()

    def test_speakers_separable_by_centroid(self):
        clips = synth_corpus(6, 5, 1.5, seed=5)
        cents = {}
        for c in clips:
            cents.setdefault(c.speaker_id, []).append(spectral_centroid(c.wave))
        keys = sorted(cents)
        within = np.mean([abs(a - b) for k in keys for i, a in enumerate(cents[k]) for b in cents[k][i + 1:]])
        across = np.mean([abs(a - b) for i, k in enumerate(keys) for k2 in keys[i + 1:]
                          for a in cents[k] for b in cents[k2]])
        assert within < across

    def test_f0_range_and_guard(self):
        with pytest.raises(ValueError, match="need ≥ 2 speakers"):
            synth_corpus(1, 3, 1.0)


class TestExamples:
    def _clips(self, corpus):
        by = {}
        for c in corpus:
            by.setdefault(c.speaker_id, []).append(c)
        a, b = sorted(by)[:2]
        return by[a], by[b]

    @pytest.mark.parametrize("mode,transitions", [("onset", 1), ("onset_offset", 2)])
    def test_mode_contract(self, corpus, mode, transitions):
        a, b = self._clips(corpus)
        ex = build_example(a[0], a[1], b[0], 1.3, np.random.default_rng(0), mode, segment_seconds=2.5)
        assert count_transitions(ex.oracle_labels) == transitions
        assert ex.oracle_labels.size == -(-len(ex.mixture) // 8)
        np.testing.assert_allclose(ex.mixture.samples, ex.target.samples + ex.interferer.samples, atol=1e-12)
        assert len(ex.mixture) == len(ex.target) == len(ex.interferer) == 20000
        assert abs(measured_snr_db(ex.target, ex.interferer) - 1.3) < 1e-6

    def test_same_speaker_rejected(self, corpus):
        a, _ = self._clips(corpus)
        with pytest.raises(ValueError):
            build_example(a[0], a[1], a[2], 0.0, np.random.default_rng(0))

    def test_reference_must_differ(self, corpus):
        a, b = self._clips(corpus)
        with pytest.raises(ValueError):
            build_example(a[0], a[0], b[0], 0.0, np.random.default_rng(0))

    def test_swap_target(self, corpus):
        a, b = self._clips(corpus)
        ex = build_example(a[0], a[1], b[0], 2.0, np.random.default_rng(0), segment_seconds=2.5)
        sw = swap_target(ex, b[1])
        assert sw.mixture is ex.mixture and sw.snr_db == -2.0
        assert sw.target_speaker_id == b[0].speaker_id
        assert count_transitions(sw.oracle_labels) == 2

    def test_doubled_protocol(self, corpus):
        exs = sample_mixtures(corpus, 10, np.random.default_rng(0), "onset_offset", 2.5, doubled=True)
        assert len(exs) == 10
        for x, y in zip(exs[::2], exs[1::2]):
            assert x.mixture is y.mixture
        assert all(-2.5 <= e.snr_db <= 2.5 for e in exs)

    def test_oracle_labels_window(self):
        sr = 8000
        x = np.concatenate([np.zeros(2000), tone(0.5), np.zeros(1000)])
        lab = make_oracle_labels(Waveform(x, sr), 8, "onset_offset")
        on, off = np.flatnonzero(np.diff(lab))
        assert abs(on + 1 - 250) <= 10 and abs(off + 1 - 750) <= 10


class TestManifests:
    def test_rle_round_trip(self):
        b = np.array([0, 0, 1, 1, 1, 0], dtype=float)
        enc = rle_encode(b)
        assert enc == {"length": 6, "runs": [[0, 2], [1, 3], [0, 1]]}
        np.testing.assert_array_equal(rle_decode(json.loads(json.dumps(enc))), b)

    def test_corpus_round_trip(self, tmp_path, corpus):
        manifest = save_corpus(corpus, tmp_path)
        rows = [json.loads(line) for line in manifest.read_text().splitlines()]
        assert len(rows) == len(corpus)
        assert set(rows[0]) == {"speaker_id", "path", "duration_s", "sample_rate"}
        loaded = load_corpus(manifest)
        assert [c.speaker_id for c in loaded] == [c.speaker_id for c in corpus]
        assert np.abs(loaded[0].wave.samples - corpus[0].wave.samples).max() <= 1 / 32768

    def test_examples_round_trip(self, tmp_path, corpus):
        exs = sample_mixtures(corpus, 4, np.random.default_rng(1), "onset", 2.0, doubled=True)
        manifest = save_examples(exs, tmp_path, "eval")
        back = load_examples(manifest)
        assert len(back) == 4
        for a, b in zip(exs, back):
            np.testing.assert_array_equal(a.oracle_labels, b.oracle_labels)
            np.testing.assert_array_equal(b.mixture.samples, b.target.samples + b.interferer.samples)
            assert abs(a.snr_db - b.snr_db) == 0
