"""Toy attention ASR with a noise-adaptive residual U-Net adapter on its input features.

Pipeline: noisy features -> ``x + adapter(x)`` -> frozen conv/tanh encoder ->
recurrent attention decoder over characters.  The decoder attention combines a
learned dot-product score with a fixed Gaussian location prior that centres
output step ``t`` on the frames of the t-th character (plus a learned
end-of-input memory row), which is enough for the toy model to learn its
alignment quickly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .decoding import beam_search
from .hyp_text import BOS, EOS, PAD, NBestList
from .nn import ParamSet, add_linear, glorot, linear

FROZEN, FULL_FT, ADAPTER_ONLY = "frozen", "full_ft", "adapter_only"
FINETUNE_MODES = (FROZEN, FULL_FT, ADAPTER_ONLY)


@dataclass
class AsrConfig:
    vocab_size: int
    n_features: int = 16
    frames_per_char: int = 4
    d_enc: int = 32
    conv_channels: int = 32
    adapter_channels: int = 16
    d_emb: int = 16
    d_hidden: int = 64
    d_att: int = 32
    location_sigma: float = 0.35
    max_extra_steps: int = 4


@dataclass
class AsrLossConfig:
    lam: float = 0.5
    l1_target: str = "input"  # "input" (noisy X_in, literal) or "clean"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.l1_target not in ("input", "clean"):
            raise ValueError(f"unknown L1 target {self.l1_target!r}")


@dataclass
class FeatureBatch:
    """Zero-padded (B, T8, F) features; T8 is a multiple of 8."""

    x: np.ndarray
    lengths: np.ndarray  # valid frames per utterance

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    def frame_mask(self) -> np.ndarray:
        return (np.arange(self.x.shape[1])[None, :] < self.lengths[:, None]).astype(np.float64)


def _ceil8(n) -> np.ndarray:
    return (np.asarray(n) + 7) // 8 * 8


def batch_features(mats: Sequence[np.ndarray]) -> FeatureBatch:
    if not mats:
        raise ValueError("empty batch")
    lengths = np.array([m.shape[0] for m in mats])
    if (lengths == 0).any():
        raise ValueError("empty feature matrix")
    f = mats[0].shape[1]
    t8 = int(_ceil8(lengths.max()))
    x = np.zeros((len(mats), t8, f))
    for i, m in enumerate(mats):
        x[i, :len(m)] = m
    return FeatureBatch(x, lengths)


@dataclass
class AcousticMemory:
    """Per-utterance decoder memory: encoder frames plus one end-of-input row."""

    keys: Tensor    # (B, M, d_att)
    values: Tensor  # (B, M, d_att)
    positions: np.ndarray  # (B, M) position of each row in character units
    bias_mask: np.ndarray  # (B, M) 0 for valid rows, large negative for padding
    n_chars: np.ndarray    # (B,)


class NaaeModel:
    def __init__(self, cfg: AsrConfig, seed: int = 0, finetune_mode: str = FROZEN):
        self.cfg = cfg
        rng = np.random.default_rng((seed, 0xA5A))
        p = self.params = ParamSet("asr.")
        f, c, a = cfg.n_features, cfg.conv_channels, cfg.adapter_channels
        # base encoder
        p.add("enc.conv1.w", glorot(rng, 3 * f, c, (3, f, c)))
        p.add("enc.conv1.b", np.zeros(c))
        p.add("enc.conv2.w", glorot(rng, 3 * c, c, (3, c, c)))
        p.add("enc.conv2.b", np.zeros(c))
        add_linear(p, rng, "enc.out", c, cfg.d_enc)
        # U-Net adapter: three stride-2 convs down, three transpose convs up
        p.add("adapter.down1.w", glorot(rng, 4 * f, a, (4, f, a)))
        p.add("adapter.down1.b", np.zeros(a))
        p.add("adapter.down2.w", glorot(rng, 4 * a, a, (4, a, a)))
        p.add("adapter.down2.b", np.zeros(a))
        p.add("adapter.down3.w", glorot(rng, 4 * a, a, (4, a, a)))
        p.add("adapter.down3.b", np.zeros(a))
        p.add("adapter.up1.w", glorot(rng, 4 * a, a, (4, a, a)))
        p.add("adapter.up1.b", np.zeros(a))
        p.add("adapter.up2.w", glorot(rng, 8 * a, a, (4, 2 * a, a)))
        p.add("adapter.up2.b", np.zeros(a))
        p.add("adapter.up3.w", np.zeros((4, 2 * a, f)))  # zero-init: identity at start
        p.add("adapter.up3.b", np.zeros(f))
        # attention decoder
        p.add("dec.emb", rng.normal(scale=0.3, size=(cfg.vocab_size, cfg.d_emb)))
        add_linear(p, rng, "dec.rec", cfg.d_emb + cfg.d_att + cfg.d_hidden, cfg.d_hidden)
        add_linear(p, rng, "dec.query", cfg.d_hidden, cfg.d_att, bias=False)
        add_linear(p, rng, "dec.key", cfg.d_enc, cfg.d_att, bias=False)
        add_linear(p, rng, "dec.value", cfg.d_enc, cfg.d_att, bias=False)
        p.add("dec.end", rng.normal(scale=0.3, size=(cfg.d_enc,)))
        add_linear(p, rng, "dec.out", cfg.d_hidden + cfg.d_att, cfg.vocab_size)
        self.finetune_mode = finetune_mode
        self.set_finetune_mode(finetune_mode)

    # ------------------------------------------------------------- trainability

    def group(self, name: str) -> list[str]:
        return [n[len("asr."):] for n in self.params.names() if n.startswith(f"asr.{name}.")]

    def set_finetune_mode(self, mode: str) -> None:
        """frozen: nothing trains; adapter_only: U-Net only; full_ft: encoder + decoder."""
        if mode not in FINETUNE_MODES:
            raise ValueError(f"unknown finetune mode {mode!r}")
        self.finetune_mode = mode
        self.params.set_trainable(False)
        if mode == ADAPTER_ONLY:
            self.params.set_trainable(True, self.group("adapter"))
        elif mode == FULL_FT:
            self.params.set_trainable(True, self.group("enc") + self.group("dec"))

    def set_all_trainable(self) -> None:
        self.params.set_trainable(True, self.group("enc") + self.group("dec"))

    # ---------------------------------------------------------------- forward

    def adapter_residual(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        p = self.params
        t8 = x.shape[1]
        l8 = _ceil8(lengths)

        def mask(level):
            n = t8 >> level
            return (np.arange(n)[None, :] < (l8 >> level)[:, None]).astype(np.float64)[:, :, None]

        m1, m2, m3 = mask(1), mask(2), mask(3)
        d1 = ops.mul(ops.relu(ops.conv1d(x, p["adapter.down1.w"], p["adapter.down1.b"], 2, 1)), m1)
        d2 = ops.mul(ops.relu(ops.conv1d(d1, p["adapter.down2.w"], p["adapter.down2.b"], 2, 1)), m2)
        d3 = ops.mul(ops.relu(ops.conv1d(d2, p["adapter.down3.w"], p["adapter.down3.b"], 2, 1)), m3)
        u1 = ops.mul(ops.relu(ops.conv_transpose1d(d3, p["adapter.up1.w"], p["adapter.up1.b"], 2, 1)), m2)
        u2 = ops.mul(ops.relu(ops.conv_transpose1d(ops.concat([u1, d2]), p["adapter.up2.w"],
                                                   p["adapter.up2.b"], 2, 1)), m1)
        return ops.conv_transpose1d(ops.concat([u2, d1]), p["adapter.up3.w"], p["adapter.up3.b"], 2, 1)

    def adapt(self, feats: FeatureBatch | np.ndarray) -> Tensor:
        """Residual adaptation ``x + adapter(x)``; padded frames are zero on return.

        A single (T, F) matrix is accepted and returned unpadded.
        """
        if isinstance(feats, np.ndarray):
            if feats.ndim != 2 or feats.shape[0] == 0:
                raise ValueError("adapt needs a non-empty (T, F) matrix")
            fb = batch_features([feats])
            return self.adapt(fb)[0, :feats.shape[0]]
        x = Tensor(feats.x)
        res = self.adapter_residual(x, feats.lengths)
        return ops.mul(ops.add(x, res), feats.frame_mask()[:, :, None])

    def encode(self, x_adapted: Tensor, lengths: np.ndarray) -> Tensor:
        p = self.params
        m = (np.arange(x_adapted.shape[1])[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]
        h = ops.mul(ops.relu(ops.conv1d(x_adapted, p["enc.conv1.w"], p["enc.conv1.b"], 1, 1)), m)
        h = ops.mul(ops.relu(ops.conv1d(h, p["enc.conv2.w"], p["enc.conv2.b"], 1, 1)), m)
        return ops.mul(ops.tanh(linear(h, p, "enc.out")), m)

    def memory(self, x_audio: Tensor, lengths: np.ndarray) -> AcousticMemory:
        p = self.params
        bsz, t, _ = x_audio.shape
        fpc = self.cfg.frames_per_char
        end = ops.add(np.zeros((bsz, 1, self.cfg.d_enc)), p["dec.end"])
        mem = ops.concat([x_audio, end], axis=1)
        keys = ops.matmul(mem, p["dec.key.w"])
        values = ops.matmul(mem, p["dec.value.w"])
        frames = np.arange(t)
        pos = np.empty((bsz, t + 1))
        pos[:, :t] = (frames[None, :] + 0.5) / fpc - 0.5
        n_chars = lengths / fpc
        pos[:, t] = n_chars
        bias = np.zeros((bsz, t + 1))
        bias[:, :t] = np.where(frames[None, :] < lengths[:, None], 0.0, ops.NEG_INF)
        return AcousticMemory(keys, values, pos, bias, n_chars)

    def _location_bias(self, mem: AcousticMemory, steps: np.ndarray) -> np.ndarray:
        """(B, S, M) additive attention bias for decoder steps ``steps``."""
        s2 = 2.0 * self.cfg.location_sigma ** 2
        d = mem.positions[:, None, :] - steps[None, :, None]
        return -(d * d) / s2 + mem.bias_mask[:, None, :]

    def _cell(self, prev_ids, h, ctx, keys, values, bias):
        """One decoder step for R rows; keys/values (R, M, A), bias (R, M)."""
        p = self.params
        e = ops.embedding(p["dec.emb"], prev_ids)
        h = ops.tanh(linear(ops.concat([e, ctx, h]), p, "dec.rec"))
        q = ops.matmul(h, p["dec.query.w"])
        r, a = q.shape
        scores = ops.reshape(ops.matmul(keys, ops.reshape(q, (r, a, 1))), (r, -1))
        att = ops.softmax(ops.add(ops.scale(scores, 1.0 / math.sqrt(a)), bias))
        ctx = ops.reshape(ops.matmul(ops.reshape(att, (r, 1, -1)), values), (r, a))
        logits = linear(ops.concat([h, ctx]), p, "dec.out")
        return logits, h, ctx

    def teacher_forced_logits(self, mem: AcousticMemory, targets: np.ndarray) -> Tensor:
        """Logits (B, L, V) predicting ``targets`` (B, L; EOS-terminated, PAD-filled)."""
        bsz, steps = targets.shape
        prev = np.concatenate([np.full((bsz, 1), BOS), targets[:, :-1]], axis=1)
        prev = np.where(prev == PAD, EOS, prev)
        bias = self._location_bias(mem, np.arange(steps, dtype=np.float64))
        h = Tensor(np.zeros((bsz, self.cfg.d_hidden)))
        ctx = Tensor(np.zeros((bsz, self.cfg.d_att)))
        outs = []
        for t in range(steps):
            logits, h, ctx = self._cell(prev[:, t], h, ctx, mem.keys, mem.values, bias[:, t])
            outs.append(ops.reshape(logits, (bsz, 1, -1)))
        return ops.concat(outs, axis=1)

    def decode_nbest(self, x_audio: Tensor, lengths: np.ndarray, beam: int) -> list[NBestList]:
        """Beam search; returns one n-best list per utterance (BOS/EOS stripped)."""
        if beam < 1:
            raise ValueError("beam must be >= 1")
        mem = self.memory(x_audio, lengths)
        bsz = x_audio.shape[0]
        rows = np.repeat(np.arange(bsz), beam)
        keys = mem.keys.data[rows]
        values = mem.values.data[rows]
        max_len = np.ceil(mem.n_chars).astype(int) + self.cfg.max_extra_steps
        loc_all = self._location_bias(mem, np.arange(int(max_len.max()) + 1, dtype=np.float64))[rows]

        def step(state, prev, t):
            h, ctx = state
            logits, h2, c2 = self._cell(prev, Tensor(h), Tensor(ctx), Tensor(keys), Tensor(values),
                                        loc_all[:, t])
            return ops.log_softmax(logits).data, (h2.data, c2.data)

        init = (np.zeros((bsz * beam, self.cfg.d_hidden)), np.zeros((bsz * beam, self.cfg.d_att)))
        return beam_search(step, init, bsz, beam, max_len)


def pad_targets(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """EOS-terminate and PAD-fill token sequences; returns (ids, mask)."""
    n = max(len(s) for s in seqs) + 1
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        ids[i, len(s)] = EOS
        mask[i, :len(s) + 1] = 1.0
    return ids, mask


def asr_loss(model: NaaeModel, x_in: FeatureBatch, x_adapted: Tensor, x_audio: Tensor,
             targets: Sequence[Sequence[int]], cfg: AsrLossConfig,
             l1_reference: Optional[np.ndarray] = None) -> Tensor:
    """lam * teacher-forced CE + (1 - lam) * mean L1(adapted, reference).

    The reference is the (noisy) input itself unless ``cfg.l1_target`` is
    "clean", in which case ``l1_reference`` must hold padded clean frames.
    """
    if any(len(t) == 0 for t in targets):
        raise ValueError("ASR targets must be non-empty")
    ids, mask = pad_targets(targets)
    mem = model.memory(x_audio, x_in.lengths)
    ce = ops.cross_entropy(model.teacher_forced_logits(mem, ids), ids, mask)
    if cfg.l1_target == "clean":
        if l1_reference is None:
            raise ValueError("clean L1 target requested without clean frames")
        ref = l1_reference
    else:
        ref = x_in.x
    weights = x_in.frame_mask()[:, :, None]
    l1 = ops.l1_distance(x_adapted, Tensor(ref), weights)
    if cfg.lam == 1.0:
        return ce
    if cfg.lam == 0.0:
        return l1
    return ops.add(ops.scale(ce, cfg.lam), ops.scale(l1, 1.0 - cfg.lam))
