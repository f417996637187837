"""Audio I/O, mixture synthesis, oracle cue labels and separation metrics."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SR = 8000
SI_SNR_EPS = 1e-12


class WavFormatError(IOError):
    """Raised for WAV files this reader does not handle."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV files

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAV file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise WavFormatError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data[:len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format {tag}, {bits} bits)")
    return Waveform(samples, rate)


def quantize_16bit(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, wave: Waveform, float32: bool = False) -> None:
    """Write mono WAV; 16-bit mode rounds to nearest and clamps to [-1, 1 - 2**-15]."""
    if float32:
        payload, tag, bits = wave.samples.astype("<f4").tobytes(), _FLOAT, 32
    else:
        payload, tag, bits = quantize_16bit(wave.samples).tobytes(), _PCM, 16
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, wave.sample_rate,
                                    wave.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# mixing


def _check_rates(waves: Sequence[Waveform]) -> int:
    rates = {w.sample_rate for w in waves}
    if len(rates) != 1:
        raise ValueError(f"sample rates differ: {sorted(rates)}")
    return rates.pop()


def mix_sources(sources: Sequence[Waveform]) -> Waveform:
    """Plain sum of equal-length sources, no renormalisation."""
    if not sources:
        raise ValueError("mix_sources needs at least one source")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise ValueError(f"source lengths differ: {sorted(lengths)}")
    rate = _check_rates(sources)
    return Waveform(np.sum([s.samples for s in sources], axis=0), rate)


def energy(samples: np.ndarray) -> float:
    return float(np.dot(samples, samples))


def measured_snr_db(target: Waveform, interferer: Waveform) -> float:
    return 10.0 * np.log10(energy(target.samples) / energy(interferer.samples))


def scale_to_snr(target: Waveform, interferer: Waveform, snr_db: float) -> Waveform:
    """Rescale the interferer so the target/interferer energy ratio equals ``snr_db``.

    Energies are taken over the given (unpadded) signals, so appending silence later
    does not change the ratio.
    """
    pt, pi = energy(target.samples), energy(interferer.samples)
    if pt <= 1e-12 or pi <= 1e-12:
        raise ValueError("scale_to_snr: silent input")
    gain = np.sqrt(pt / (pi * 10.0 ** (snr_db / 10.0)))
    return Waveform(interferer.samples * gain, interferer.sample_rate)


def pad_random_silence(wave: Waveform, rng: np.random.Generator, min_ms: float = 200.0,
                       max_ms: float = 800.0) -> Waveform:
    if min_ms > max_ms:
        raise ValueError(f"min_ms {min_ms} exceeds max_ms {max_ms}")
    lo = int(round(min_ms * wave.sample_rate / 1000.0))
    hi = int(round(max_ms * wave.sample_rate / 1000.0))
    n = int(rng.integers(lo, hi, endpoint=True))
    return Waveform(np.concatenate([wave.samples, np.zeros(n)]), wave.sample_rate)


def fit_length(wave: Waveform, n: int) -> Waveform:
    """Truncate or zero-pad at the end."""
    s = wave.samples[:n]
    if s.size < n:
        s = np.concatenate([s, np.zeros(n - s.size)])
    return Waveform(s, wave.sample_rate)


# ---------------------------------------------------------------------------
# oracle cue labels


def energy_vad(wave: Waveform, frame_ms: float = 10.0, threshold_rel_db: float = -40.0) -> np.ndarray:
    """Per-sample 0/1 vector that is 1 from the first to the last active frame.

    A frame is active when its RMS exceeds the loudest frame's RMS by no more than
    ``threshold_rel_db``.
    """
    x = wave.samples
    if x.size == 0:
        raise ValueError("energy_vad: empty waveform")
    flen = max(1, int(round(frame_ms * wave.sample_rate / 1000.0)))
    n_frames = -(-x.size // flen)
    padded = np.zeros(n_frames * flen)
    padded[:x.size] = x
    counts = np.full(n_frames, flen)
    counts[-1] = x.size - flen * (n_frames - 1)
    rms = np.sqrt((padded.reshape(n_frames, flen) ** 2).sum(axis=1) / counts)
    peak = rms.max()
    active = rms > peak * 10.0 ** (threshold_rel_db / 20.0)
    if peak <= 0 or not active.any():
        raise ValueError("no voice activity")
    idx = np.flatnonzero(active)
    onset = idx[0] * flen
    offset = min(x.size, (idx[-1] + 1) * flen)
    labels = np.zeros(x.size)
    labels[onset:offset] = 1.0
    return labels


def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Frame i takes sample i*stride; length is floor((T-1)/stride) + 1."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return np.asarray(labels)[::stride].copy()


def count_transitions(labels: np.ndarray) -> int:
    labels = np.asarray(labels)
    return int(np.count_nonzero(labels[1:] != labels[:-1]))


def onset_only(labels: np.ndarray) -> np.ndarray:
    """Drop the offset: everything from the first 1 onwards becomes 1."""
    out = np.zeros_like(labels)
    on = np.flatnonzero(labels > 0.5)
    if on.size:
        out[on[0]:] = 1.0
    return out


def make_oracle_labels(target: Waveform, stride: int, mode: str) -> np.ndarray:
    """Frame-rate onset (or onset/offset) labels from a clean target."""
    labels = downsample_labels(energy_vad(target), stride)
    if mode == "onset":
        return onset_only(labels)
    if mode == "onset_offset":
        return labels
    raise ValueError(f"unknown label mode {mode!r}")


def rle_encode(labels: np.ndarray) -> dict:
    labels = np.asarray(labels).astype(int)
    runs: list[list[int]] = []
    for v in labels:
        if runs and runs[-1][0] == v:
            runs[-1][1] += 1
        else:
            runs.append([int(v), 1])
    return {"length": int(labels.size), "runs": runs}


def rle_decode(obj: dict) -> np.ndarray:
    out = np.concatenate([np.full(n, float(v)) for v, n in obj["runs"]]) if obj["runs"] else np.zeros(0)
    if out.size != obj["length"]:
        raise ValueError(f"run lengths sum to {out.size}, header says {obj['length']}")
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class SeparationScore:
    si_snr_db: float
    s_target_power: float
    e_noise_power: float


def si_snr(estimate: Waveform, reference: Waveform, center: bool = True) -> SeparationScore:
    e, s = estimate.samples, reference.samples
    if e.size != s.size:
        raise ValueError(f"si_snr: length mismatch {e.size} vs {s.size}")
    if center:
        e, s = e - e.mean(), s - s.mean()
    ss = energy(s)
    if ss <= 1e-12:
        raise ValueError("si_snr: reference has no energy")
    s_target = np.dot(e, s) / ss * s
    e_noise = e - s_target
    pt, pn = energy(s_target), energy(e_noise)
    return SeparationScore(10.0 * np.log10(pt / (pn + SI_SNR_EPS)), pt, pn)


def si_snr_improvement(estimate: Waveform, reference: Waveform, mixture: Waveform) -> float:
    return si_snr(estimate, reference).si_snr_db - si_snr(mixture, reference).si_snr_db


def frame_acc_f1(pred: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    tp, fp, fn, correct, n = frame_counts(pred, labels, threshold)
    return correct / n, f1_from_counts(tp, fp, fn)


def frame_counts(pred, labels, threshold: float = 0.5) -> tuple[int, int, int, int, int]:
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if pred.size != labels.size:
        raise ValueError(f"frame_acc_f1: length mismatch {pred.size} vs {labels.size}")
    p = pred > threshold
    t = labels > 0.5
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, int(np.count_nonzero(p == t)), int(p.size)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


# ---------------------------------------------------------------------------
# synthetic pseudo-speaker corpus


@dataclass
class Clip:
    speaker_id: str
    clip_id: str
    wave: Waveform


@dataclass
class PseudoSpeaker:
    f0: float
    formants: np.ndarray  # centre frequencies in Hz
    bandwidths: np.ndarray
    tilt_db_per_khz: float
    am_rate: float
    am_depth: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "PseudoSpeaker":
        return cls(
            f0=float(rng.uniform(90.0, 250.0)),
            formants=np.sort(rng.uniform([250.0, 900.0, 2000.0], [900.0, 2000.0, 3400.0])),
            bandwidths=rng.uniform(80.0, 250.0, 3),
            tilt_db_per_khz=float(rng.uniform(-9.0, -2.0)),
            am_rate=float(rng.uniform(3.0, 7.0)),
            am_depth=float(rng.uniform(0.2, 0.7)),
        )

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        amp = 10.0 ** (self.tilt_db_per_khz * freqs / 1000.0 / 20.0)
        res = sum(1.0 / (1.0 + ((freqs - fc) / bw) ** 2) for fc, bw in zip(self.formants, self.bandwidths))
        return amp * (0.05 + res)

    def voiced(self, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(n) / sr
        # slow intonation contour, distinct per phrase
        knots = rng.uniform(-0.08, 0.08, 4)
        contour = np.interp(t, np.linspace(0, t[-1] if n > 1 else 1.0, 4), knots)
        f0 = self.f0 * (1.0 + contour)
        phase = 2 * np.pi * np.cumsum(f0) / sr
        n_harm = int((sr / 2 - 100) // (self.f0 * 1.1))
        out = np.zeros(n)
        for h in range(1, n_harm + 1):
            amp = self.envelope(h * f0)
            out += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        am = 1.0 - self.am_depth * 0.5 * (1 + np.cos(2 * np.pi * self.am_rate * t + rng.uniform(0, 2 * np.pi)))
        ramp = min(n // 2, int(0.01 * sr))
        win = np.ones(n)
        if ramp:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
            win[:ramp], win[n - ramp:] = edge, edge[::-1]
        return out * am * win


def synth_clip(speaker: PseudoSpeaker, seconds: float, sr: int, rng: np.random.Generator,
               rms: float = 0.08) -> np.ndarray:
    """One phrase: leading pause of at least 200 ms, voiced runs split by short pauses, tail pause."""
    n = int(round(seconds * sr))
    # utterance-like variability: the active span covers 35-85 % of the clip
    active = rng.uniform(0.35, 0.85) * seconds
    lead = int(rng.uniform(0.2, max(0.2, seconds - active - 0.05)) * sr)
    tail = max(int(0.05 * sr), n - lead - int(active * sr))
    out = np.zeros(n)
    pos, end = lead, n - tail
    while pos < end:
        seg = min(int(rng.uniform(0.15, 0.6) * sr), end - pos)
        if seg >= int(0.05 * sr):
            out[pos:pos + seg] = speaker.voiced(seg, sr, rng)
        pos += seg + int(rng.uniform(0.03, 0.15) * sr)
    if not out.any():
        seg = max(1, min(int(0.3 * sr), n - lead))
        out[lead:lead + seg] = speaker.voiced(seg, sr, rng)
    return out * (rms / np.sqrt(np.mean(out[out != 0] ** 2)))


def synth_corpus(num_speakers: int, clips_per_speaker: int, clip_seconds: float,
                 sample_rate: int = DEFAULT_SR, seed: int = 0) -> list[Clip]:
    """Harmonic pseudo-speakers; each (speaker, clip) draws from its own RNG stream."""
    if num_speakers < 2:
        raise ValueError("need ≥ 2 speakers")
    clips = []
    for s in range(num_speakers):
        spk = PseudoSpeaker.draw(np.random.default_rng([seed, s]))
        for c in range(clips_per_speaker):
            rng = np.random.default_rng([seed, s, c + 1])
            wave = Waveform(synth_clip(spk, clip_seconds, sample_rate, rng), sample_rate)
            clips.append(Clip(f"spk{s:03d}", f"spk{s:03d}_{c:03d}", wave))
    return clips


def spectral_centroid(wave: Waveform) -> float:
    mag = np.abs(np.fft.rfft(wave.samples))
    freqs = np.fft.rfftfreq(wave.samples.size, 1.0 / wave.sample_rate)
    return float((mag * freqs).sum() / mag.sum())


def group_by_speaker(clips: Iterable[Clip]) -> dict[str, list[Clip]]:
    out: dict[str, list[Clip]] = {}
    for c in clips:
        out.setdefault(c.speaker_id, []).append(c)
    return out


# ---------------------------------------------------------------------------
# training / evaluation examples


@dataclass
class MixtureExample:
    mixture: Waveform
    target: Waveform
    interferer: Waveform
    reference: Waveform
    oracle_labels: np.ndarray
    snr_db: float
    target_speaker_id: str
    interferer_speaker_id: str
    meta: dict = field(default_factory=dict)


def build_example(target_clip: Clip, reference_clip: Clip, interferer_clip: Clip, snr_db: float,
                  rng: np.random.Generator, mode: str = "onset_offset", segment_seconds: float = 4.0,
                  stride: int = 8) -> MixtureExample:
    """Mix a clean target with a rescaled interferer and attach frame-rate oracle labels."""
    if interferer_clip.speaker_id == target_clip.speaker_id:
        raise ValueError("interferer must come from a different speaker than the target")
    if reference_clip.speaker_id != target_clip.speaker_id:
        raise ValueError("reference must come from the target speaker")
    if reference_clip.clip_id == target_clip.clip_id:
        raise ValueError("reference must be a different clip than the target")
    if mode not in ("onset", "onset_offset"):
        raise ValueError(f"unknown mode {mode!r}")
    sr = _check_rates([target_clip.wave, interferer_clip.wave, reference_clip.wave])
    n = int(round(segment_seconds * sr))
    target = fit_length(target_clip.wave, min(n, len(target_clip.wave)))
    interferer = fit_length(interferer_clip.wave, min(n, len(interferer_clip.wave)))
    interferer = scale_to_snr(target, interferer, snr_db)
    if mode == "onset_offset":
        target = pad_random_silence(target, rng)
        interferer = pad_random_silence(interferer, rng)
    target, interferer = fit_length(target, n), fit_length(interferer, n)
    return MixtureExample(
        mixture=mix_sources([target, interferer]),
        target=target,
        interferer=interferer,
        reference=reference_clip.wave,
        oracle_labels=make_oracle_labels(target, stride, mode),
        snr_db=float(snr_db),
        target_speaker_id=target_clip.speaker_id,
        interferer_speaker_id=interferer_clip.speaker_id,
        meta={"target_clip": target_clip.clip_id, "interferer_clip": interferer_clip.clip_id,
              "reference_clip": reference_clip.clip_id, "mode": mode},
    )


def swap_target(ex: MixtureExample, reference_clip: Clip, stride: int = 8) -> MixtureExample:
    """Same mixture with the interferer promoted to target (doubled test protocol)."""
    if reference_clip.speaker_id != ex.interferer_speaker_id:
        raise ValueError("reference must come from the new target speaker")
    mode = ex.meta.get("mode", "onset_offset")
    return MixtureExample(
        mixture=ex.mixture,
        target=ex.interferer,
        interferer=ex.target,
        reference=reference_clip.wave,
        oracle_labels=make_oracle_labels(ex.interferer, stride, mode),
        snr_db=-ex.snr_db,
        target_speaker_id=ex.interferer_speaker_id,
        interferer_speaker_id=ex.target_speaker_id,
        meta={"target_clip": ex.meta.get("interferer_clip"), "interferer_clip": ex.meta.get("target_clip"),
              "reference_clip": reference_clip.clip_id, "mode": mode},
    )


def sample_mixtures(clips: Sequence[Clip], count: int, rng: np.random.Generator, mode: str,
                    segment_seconds: float, stride: int = 8, snr_range=(-2.5, 2.5),
                    doubled: bool = False) -> list[MixtureExample]:
    """Random two-speaker mixtures; with ``doubled`` each mixture appears once per speaker."""
    by_spk = group_by_speaker(clips)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        raise ValueError("need ≥ 2 speakers")
    if any(len(v) < 2 for v in by_spk.values()):
        raise ValueError("every speaker needs ≥ 2 clips (target and reference)")
    out: list[MixtureExample] = []
    n_mix = count // 2 if doubled else count
    for k in range(n_mix):
        a, b = rng.choice(len(speakers), 2, replace=False)
        ta, ra = rng.choice(len(by_spk[speakers[a]]), 2, replace=False)
        tb, rb = rng.choice(len(by_spk[speakers[b]]), 2, replace=False)
        snr = float(rng.uniform(*snr_range))
        ex = build_example(by_spk[speakers[a]][ta], by_spk[speakers[a]][ra], by_spk[speakers[b]][tb],
                           snr, rng, mode, segment_seconds, stride)
        ex.meta["mixture_id"] = k
        out.append(ex)
        if doubled:
            twin = swap_target(ex, by_spk[speakers[b]][rb], stride)
            twin.meta["mixture_id"] = k
            out.append(twin)
    return out


# ---------------------------------------------------------------------------
# manifests


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_corpus(clips: Sequence[Clip], out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in clips:
        rel = Path("wav") / f"{c.clip_id}.wav"
        write_wav(out_dir / rel, c.wave)
        rows.append({"speaker_id": c.speaker_id, "path": str(rel), "duration_s": c.wave.duration_s,
                     "sample_rate": c.wave.sample_rate})
    manifest = out_dir / "manifest.jsonl"
    write_jsonl(manifest, rows)
    return manifest


def load_corpus(manifest) -> list[Clip]:
    manifest = Path(manifest)
    clips = []
    for row in read_jsonl(manifest):
        wave = read_wav(manifest.parent / row["path"])
        if wave.sample_rate != row["sample_rate"]:
            raise WavFormatError(f"{row['path']}: sample rate {wave.sample_rate} != manifest {row['sample_rate']}")
        clips.append(Clip(row["speaker_id"], Path(row["path"]).stem, wave))
    return clips


def save_examples(examples: Sequence[MixtureExample], out_dir, name: str) -> Path:
    """Float32 WAVs plus a JSON-lines manifest; labels as run-length JSON files."""
    out_dir = Path(out_dir)
    sub = out_dir / name
    sub.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, ex in enumerate(examples):
        stem = f"{i:05d}"
        row = {"snr_db": ex.snr_db, "target_speaker_id": ex.target_speaker_id,
               "interferer_speaker_id": ex.interferer_speaker_id, "meta": {"mixture_id": i, **ex.meta}}
        for key in ("mixture", "target", "interferer", "reference"):
            rel = Path(name) / f"{stem}_{key}.wav"
            write_wav(out_dir / rel, getattr(ex, key), float32=True)
            row[f"{key}_path"] = str(rel)
        label_rel = Path(name) / f"{stem}_labels.json"
        (out_dir / label_rel).write_text(json.dumps(rle_encode(ex.oracle_labels)))
        row["label_path"] = str(label_rel)
        rows.append(row)
    manifest = out_dir / f"{name}.jsonl"
    write_jsonl(manifest, rows)
    return manifest


def load_examples(manifest) -> list[MixtureExample]:
    """Load examples; the mixture is recomputed as target + interferer so the sum holds exactly."""
    manifest = Path(manifest)
    root = manifest.parent
    out = []
    for row in read_jsonl(manifest):
        target = read_wav(root / row["target_path"])
        interferer = read_wav(root / row["interferer_path"])
        out.append(MixtureExample(
            mixture=mix_sources([target, interferer]),
            target=target,
            interferer=interferer,
            reference=read_wav(root / row["reference_path"]),
            oracle_labels=rle_decode(json.loads((root / row["label_path"]).read_text())),
            snr_db=row["snr_db"],
            target_speaker_id=row["target_speaker_id"],
            interferer_speaker_id=row["interferer_speaker_id"],
            meta=dict(row.get("meta", {})),
        ))
    return out
