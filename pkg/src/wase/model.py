"""The WASE network: encoder/decoder, voiceprint encoder, cue detector and TCN masker."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

CUE_MODES = ("none", "voiceprint", "onset", "onset_offset", "onset_voiceprint", "onset_offset_voiceprint")


@dataclass
class ModelConfig:
    C: int = 64
    L_enc_kernel: int = 20
    L_enc_stride: int = 8
    B: int = 32
    H_conv: int = 64
    skip: int = 32
    K_dconv: int = 3
    groups: int = 3
    blocks_per_group: int = 4
    vp_kernel: int = 256
    vp_stride: int = 64
    vp_channels: int = 64
    vp_hidden: int = 64
    vp_layers: int = 2
    detector_blocks: int = 2
    cue_mode: str = "onset_offset"
    cue_threshold: float = 0.5
    probes: bool = True
    zero_init_heads: bool = True
    synthesis_init: bool = True
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.cue_mode not in CUE_MODES:
            raise ValueError(f"cue_mode must be one of {CUE_MODES}, got {self.cue_mode!r}")
        if self.groups < 1 or self.blocks_per_group < 1:
            raise ValueError("groups and blocks_per_group must be >= 1")
        if self.L_enc_kernel < self.L_enc_stride:
            raise ValueError("encoder kernel must be at least the stride")

    @property
    def uses_onset(self) -> bool:
        return self.cue_mode.startswith("onset")

    @property
    def uses_voiceprint_gate(self) -> bool:
        return self.cue_mode.endswith("voiceprint")

    @property
    def label_mode(self) -> Optional[str]:
        if not self.uses_onset:
            return None
        return "onset_offset" if self.cue_mode.startswith("onset_offset") else "onset"

    def dilations(self) -> list[int]:
        return [2 ** b for b in range(self.blocks_per_group)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": {},
    "paper": dict(C=512, B=128, H_conv=512, skip=128, groups=3, blocks_per_group=8,
                  vp_channels=256, vp_hidden=128, L_enc_kernel=20),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def receptive_field(kernel: int, dilations) -> int:
    return 1 + sum((kernel - 1) * d for d in dilations)


@dataclass
class ForwardOutput:
    target_est: Tensor
    interferer_est: Tensor
    cue_pred: Optional[Tensor]
    probes: list[Tensor] = field(default_factory=list)
    mask: Optional[Tensor] = None
    features: Optional[Tensor] = None
    applied_mask: Optional[Tensor] = None

    @property
    def detectors(self) -> list[Tensor]:
        """Every supervised cue output: the gating detector first, then the probes."""
        return ([self.cue_pred] if self.cue_pred is not None else []) + list(self.probes)


def frame_count(n_samples: int, cfg: ModelConfig) -> int:
    """Encoder frames for a padded input; equals the oracle label length ceil(T / stride)."""
    return -(-n_samples // cfg.L_enc_stride)


def synthesis_kernel(enc: np.ndarray, stride: int) -> np.ndarray:
    """Decoder kernel that inverts ``enc`` away from the signal edges.

    Each frame is recovered with the encoder's pseudo-inverse, then weighted so the
    overlapping frames sum to one at every sample. Exact when C >= kernel; otherwise a
    least-squares approximation.
    """
    K = enc.shape[2]
    inv = np.linalg.pinv(enc[:, 0, :])  # (K, C)
    cover = np.array([len(range(k % stride, K, stride)) for k in range(K)], dtype=np.float64)
    return np.ascontiguousarray((inv / cover[:, None]).T[:, None, :])


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class WASE:
    """Parameters live in ``self.params`` keyed by dotted names; forward builds a fresh graph."""

    VOICEPRINT_PREFIX = "vp."

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = params if params is not None else self._init_params()

    # -- construction ----------------------------------------------------------

    def _init_params(self) -> dict[str, Tensor]:
        c = self.cfg
        rng = np.random.default_rng([c.seed, 7919])
        p: dict[str, np.ndarray] = {}
        p["enc.weight"] = _uniform(rng, (c.C, 1, c.L_enc_kernel), c.L_enc_kernel)
        p["dec.weight"] = _uniform(rng, (c.C, 1, c.L_enc_kernel), c.C)
        if c.synthesis_init:
            p["dec.weight"] = synthesis_kernel(p["enc.weight"], c.L_enc_stride)
        if self._needs_voiceprint_params():
            self._init_voiceprint(p, rng)
        if c.uses_onset:
            p["det.in_u.weight"] = _uniform(rng, (c.H_conv, c.C), 2 * c.C)
            p["det.in_v.weight"] = _uniform(rng, (c.H_conv, c.C), 2 * c.C)
            p["det.in.bias"] = np.zeros(c.H_conv)
            for b in range(c.detector_blocks):
                self._init_block(p, rng, f"det.b{b}", c.H_conv, c.H_conv, 0)
            p["det.out.weight"] = _uniform(rng, (1, c.H_conv), c.H_conv)
            p["det.out.bias"] = np.zeros(1)
        p["ext.bottleneck.weight"] = _uniform(rng, (c.B, c.C), c.C)
        p["ext.bottleneck.bias"] = np.zeros(c.B)
        last = (c.groups - 1, c.blocks_per_group - 1)
        final_probe = c.uses_onset and c.probes
        for g in range(c.groups):
            for b in range(c.blocks_per_group):
                # the last residual output only feeds the final probe
                residual = (g, b) != last or final_probe
                self._init_block(p, rng, f"ext.g{g}.b{b}", c.B, c.H_conv, c.skip, residual)
        p["ext.mask_prelu"] = np.array([0.25])
        p["ext.mask.weight"] = _uniform(rng, (c.C, c.skip), c.skip)
        p["ext.mask.bias"] = np.zeros(c.C)
        if c.uses_onset and c.probes:
            for name in self.probe_names():
                p[f"probe.{name}.weight"] = _uniform(rng, (1, c.B), c.B)
                p[f"probe.{name}.bias"] = np.zeros(1)
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def probe_names(self) -> list[str]:
        return ["bottleneck"] + [f"g{g}" for g in range(self.cfg.groups)]

    def _probe(self, x: Tensor, name: str) -> Optional[Tensor]:
        key = f"probe.{name}"
        if f"{key}.weight" not in self.params:
            return None
        return T.sigmoid(T.pointwise_conv(x, self.params[f"{key}.weight"], self.params[f"{key}.bias"]))

    def _needs_voiceprint_params(self) -> bool:
        return self.cfg.cue_mode != "none"

    def _init_voiceprint(self, p, rng):
        c = self.cfg
        p["vp.conv.weight"] = _uniform(rng, (c.vp_channels, 1, c.vp_kernel), c.vp_kernel)
        p["vp.conv.bias"] = np.zeros(c.vp_channels)
        p["vp.norm.gain"] = np.ones(c.vp_channels)
        p["vp.norm.shift"] = np.zeros(c.vp_channels)
        h = c.vp_hidden
        for layer in range(c.vp_layers):
            d = c.vp_channels if layer == 0 else 2 * h
            for side in ("fwd", "bwd"):
                key = f"vp.lstm.l{layer}.{side}"
                p[f"{key}_w_ih"] = _uniform(rng, (4 * h, d), h)
                p[f"{key}_w_hh"] = _uniform(rng, (4 * h, h), h)
                bias = np.zeros(4 * h)
                bias[h:2 * h] = 1.0  # forget gate
                p[f"{key}_b"] = bias
        p["vp.fc.weight"] = _uniform(rng, (c.C, 2 * h), 2 * h)
        p["vp.fc.bias"] = np.zeros(c.C)

    def _init_block(self, p, rng, key, width, hidden, skip, residual=True):
        k = self.cfg.K_dconv
        p[f"{key}.in.weight"] = _uniform(rng, (hidden, width), width)
        p[f"{key}.in.bias"] = np.zeros(hidden)
        p[f"{key}.prelu1"] = np.array([0.25])
        p[f"{key}.norm1.gain"] = np.ones(hidden)
        p[f"{key}.norm1.shift"] = np.zeros(hidden)
        p[f"{key}.dconv.weight"] = _uniform(rng, (hidden, k), k)
        p[f"{key}.dconv.bias"] = np.zeros(hidden)
        p[f"{key}.prelu2"] = np.array([0.25])
        p[f"{key}.norm2.gain"] = np.ones(hidden)
        p[f"{key}.norm2.shift"] = np.zeros(hidden)
        heads = ([("res", width)] if residual else []) + ([("skip", skip)] if skip else [])
        for name, out in heads:
            w = _uniform(rng, (out, hidden), hidden)
            p[f"{key}.{name}.weight"] = np.zeros_like(w) if self.cfg.zero_init_heads else w
            p[f"{key}.{name}.bias"] = np.zeros(out)

    # -- bookkeeping -------------------------------------------------------------

    def count_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def voiceprint_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(self.VOICEPRINT_PREFIX)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- building blocks -----------------------------------------------------------

    def encode_speech(self, x: np.ndarray) -> Tensor:
        c = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.size < c.L_enc_kernel:
            raise ValueError(f"input of {x.size} samples is shorter than the encoder kernel {c.L_enc_kernel}")
        return T.conv1d(Tensor(x[None, :]), self.params["enc.weight"], c.L_enc_stride)

    def decode_speech(self, feats: Tensor) -> Tensor:
        return T.conv1d_transpose(feats, self.params["dec.weight"], self.cfg.L_enc_stride)

    def voiceprint_encode(self, r: np.ndarray) -> Tensor:
        """Reference waveform -> (C, 1) voiceprint."""
        c, p = self.cfg, self.params
        r = np.asarray(r, dtype=np.float64)
        if r.size < c.vp_kernel:
            raise ValueError(f"reference of {r.size} samples is shorter than {c.vp_kernel}")
        h = T.conv1d(Tensor(r[None, :]), p["vp.conv.weight"], c.vp_stride, p["vp.conv.bias"])
        h = T.global_layer_norm(h, p["vp.norm.gain"], p["vp.norm.shift"])
        layers = [
            {f"{side}_{n}": p[f"vp.lstm.l{i}.{side}_{n}"] for side in ("fwd", "bwd") for n in ("w_ih", "w_hh", "b")}
            for i in range(c.vp_layers)
        ]
        seq = T.bilstm(T.transpose(h), layers)
        seq = T.linear(seq, p["vp.fc.weight"], p["vp.fc.bias"])
        return T.reshape(T.mean_pool_time(seq), (c.C, 1))

    def tcn_block(self, x: Tensor, key: str, dilation: int) -> tuple[Tensor, Optional[Tensor]]:
        p = self.params
        h = T.pointwise_conv(x, p[f"{key}.in.weight"], p[f"{key}.in.bias"])
        h = T.global_layer_norm(T.prelu(h, p[f"{key}.prelu1"]), p[f"{key}.norm1.gain"], p[f"{key}.norm1.shift"])
        h = T.depthwise_conv1d(h, p[f"{key}.dconv.weight"], dilation, p[f"{key}.dconv.bias"])
        h = T.global_layer_norm(T.prelu(h, p[f"{key}.prelu2"]), p[f"{key}.norm2.gain"], p[f"{key}.norm2.shift"])
        res = x
        if f"{key}.res.weight" in p:
            res = x + T.pointwise_conv(h, p[f"{key}.res.weight"], p[f"{key}.res.bias"])
        skip = None
        if f"{key}.skip.weight" in p:
            skip = T.pointwise_conv(h, p[f"{key}.skip.weight"], p[f"{key}.skip.bias"])
        return res, skip

    def detect_cue(self, U: Tensor, v: Tensor) -> Tensor:
        """Cue vector (1, L) in (0, 1) from encoder features and the voiceprint."""
        p = self.params
        h = T.pointwise_conv(U, p["det.in_u.weight"], p["det.in.bias"])
        h = h + T.pointwise_conv(v, p["det.in_v.weight"])  # same as a 1x1 conv over [U; v broadcast]
        for b in range(self.cfg.detector_blocks):
            h, _ = self.tcn_block(h, f"det.b{b}", 2 ** b)
        return T.sigmoid(T.pointwise_conv(h, p["det.out.weight"], p["det.out.bias"]))

    @staticmethod
    def apply_cue_gate(U: Tensor, o) -> Tensor:
        o = T.as_tensor(o)
        if o.shape != (1, U.shape[1]):
            raise ValueError(f"cue of shape {o.shape} cannot gate features of shape {U.shape}")
        return U * o

    @staticmethod
    def apply_voiceprint_gate(U: Tensor, v: Tensor) -> Tensor:
        if v.shape != (U.shape[0], 1):
            raise ValueError(f"voiceprint of shape {v.shape} cannot gate features of shape {U.shape}")
        return U * T.sigmoid(v)

    def extract(self, gated: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Mask in (0, 1) with U's shape, plus auxiliary cue probes when enabled.

        Probes sit after the bottleneck and after every TCN group.
        """
        c, p = self.cfg, self.params
        x = T.pointwise_conv(gated, p["ext.bottleneck.weight"], p["ext.bottleneck.bias"])
        skips = None
        probes = [self._probe(x, "bottleneck")]
        for g in range(c.groups):
            for b, d in enumerate(c.dilations()):
                x, s = self.tcn_block(x, f"ext.g{g}.b{b}", d)
                skips = s if skips is None else skips + s
            probes.append(self._probe(x, f"g{g}"))
        probes = [q for q in probes if q is not None]
        h = T.prelu(skips, p["ext.mask_prelu"])
        return T.sigmoid(T.pointwise_conv(h, p["ext.mask.weight"], p["ext.mask.bias"])), probes

    # -- full model ------------------------------------------------------------------

    def padded_length(self, n: int) -> int:
        c = self.cfg
        return c.L_enc_kernel + c.L_enc_stride * (frame_count(n, c) - 1)

    def forward(self, mixture: np.ndarray, reference: np.ndarray | None = None,
                oracle_cue: np.ndarray | None = None) -> ForwardOutput:
        """Run the configured cue variant.

        With ``oracle_cue`` the detector is bypassed and the given 0/1 frame vector gates
        the features directly.
        """
        c = self.cfg
        mixture = np.asarray(mixture, dtype=np.float64)
        n = mixture.size
        x = np.zeros(self.padded_length(n))
        x[:n] = mixture
        U = self.encode_speech(x)
        gated = U
        v = None
        if c.uses_voiceprint_gate or (c.uses_onset and oracle_cue is None):
            if reference is None:
                raise ValueError(f"cue mode {c.cue_mode!r} needs a reference waveform")
            v = self.voiceprint_encode(reference)
        if c.uses_voiceprint_gate:
            gated = self.apply_voiceprint_gate(gated, v)
        cue = gate = None
        if oracle_cue is not None:
            if not c.uses_onset:
                raise ValueError(f"cue mode {c.cue_mode!r} has no onset gate for an oracle cue")
            gate = T.as_tensor(np.asarray(oracle_cue, dtype=np.float64).reshape(1, -1))
        elif c.uses_onset:
            cue = gate = self.detect_cue(U, v)
        if gate is not None:
            gated = self.apply_cue_gate(gated, gate)
        mask, probes = self.extract(gated)
        # the cue also gates the applied mask, so frames it rules out go to the interferer
        applied = mask if gate is None else self.apply_cue_gate(mask, gate)
        target = T.crop(T.reshape(self.decode_speech(U * applied), (-1,)), n)
        interferer = T.crop(T.reshape(self.decode_speech(U * (1.0 - applied)), (-1,)), n)
        return ForwardOutput(target, interferer, cue, probes if cue is not None else [], mask, U, applied)
