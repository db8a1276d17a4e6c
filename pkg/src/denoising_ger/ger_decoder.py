"""Generative error correction decoder: a small frozen-body "LLM" plus a trainable adapter.

The decoder cross-attends over a prefix made of

* one row per 1-best character carrying the fused acoustic/text embedding, then
* for every n-best hypothesis, a learned separator row followed by one row per
  character of that hypothesis,

and emits the corrected character sequence autoregressively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import hfcdf
from .autodiff import Tensor, ops
from .decoding import beam_search
from .hfcdf import FusionConfig
from .hyp_text import BOS, EOS, PAD, Hypothesis, NBestList
from .naae_asr import pad_targets
from .nn import ParamSet, add_linear, linear, sinusoid_positions

ADAPTER, PROJECTOR, FULL = "adapter", "projector", "full"
TRAINABLE_MASKS = (ADAPTER, PROJECTOR, FULL)
_PROJECTOR_GROUPS = ("proj", "sep", "seg", "mixer")


@dataclass
class GerConfig:
    vocab_size: int
    d_audio: int = 32
    d_llm: int = 32
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_extra_steps: int = 6


@dataclass
class GerInput:
    """Everything the corrector sees for a batch of utterances.

    ``x_audio`` is the (B, T, d_audio) acoustic embedding (zeros when no audio
    is available) and ``lengths`` its valid frame counts.  ``nbest[b]`` holds
    token lists, 1-best first.
    """

    x_audio: Tensor
    lengths: np.ndarray
    nbest: list[list[list[int]]]

    @property
    def batch(self) -> int:
        return len(self.nbest)


@dataclass
class Prefix:
    memory: Tensor          # (B, M, d_model)
    bias: np.ndarray        # (B, M): 0 valid, NEG_INF padding
    mu: Optional[Tensor]    # (B,) fusion weight, None for baselines
    x_mmc: Tensor           # (B, C, 2 d_llm)


@dataclass
class GerOutput:
    tokens: list[int]
    stepwise_log_probs: list[float]
    total_log_prob: float
    truncated: bool = False


@dataclass
class FusionSettings:
    mode: str = hfcdf.HFCDF
    cfg: FusionConfig = field(default_factory=FusionConfig)
    fixed_mu: Optional[float] = None

    def __post_init__(self):
        if self.mode not in hfcdf.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")


def _ln_params(p: ParamSet, name: str, d: int) -> None:
    p.add(f"{name}.g", np.ones(d))
    p.add(f"{name}.b", np.zeros(d))


def _ln(x, p: ParamSet, name: str) -> Tensor:
    return ops.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


class GerModel:
    def __init__(self, cfg: GerConfig, seed: int = 0, trainable_mask: str = ADAPTER):
        self.cfg = cfg
        rng = np.random.default_rng((seed, 0x6E2))
        p = self.params = ParamSet("ger.")
        d, v = cfg.d_model, cfg.vocab_size
        # body
        p.add("llm.emb", rng.normal(scale=0.5, size=(v, cfg.d_llm)))
        p.add("dec.tok", rng.normal(scale=0.5, size=(v, d)))
        _ln_params(p, "dec.mem_ln", d)
        for i in range(cfg.n_layers):
            pre = f"dec.l{i}"
            for part in ("sa", "ca"):
                _ln_params(p, f"{pre}.{part}_ln", d)
                for w in ("q", "k", "v"):
                    add_linear(p, rng, f"{pre}.{part}.{w}", d, d, bias=False)
                add_linear(p, rng, f"{pre}.{part}.o", d, d)
            _ln_params(p, f"{pre}.ff_ln", d)
            add_linear(p, rng, f"{pre}.ff1", d, cfg.d_ff)
            add_linear(p, rng, f"{pre}.ff2", cfg.d_ff, d)
        _ln_params(p, "dec.final_ln", d)
        # adapter
        # zero-init: before fine-tuning the acoustic slot carries nothing
        add_linear(p, rng, "proj.audio", cfg.d_audio, cfg.d_llm, zero=True)
        add_linear(p, rng, "proj.mmc", 2 * cfg.d_llm, d)
        add_linear(p, rng, "proj.ctx", cfg.d_llm, d)
        p.add("sep", rng.normal(scale=0.5, size=(d,)))
        p.add("seg", rng.normal(scale=0.5, size=(2, d)))
        hfcdf.add_mixer_params(p, rng, cfg.d_llm)
        p.add("head.w", rng.normal(scale=0.02, size=(d, v)))
        p.add("head.b", np.zeros(v))
        self._pe = sinusoid_positions(512, d)
        self.set_trainable_mask(trainable_mask)

    # ------------------------------------------------------------- trainability

    def names_in(self, groups: Sequence[str]) -> list[str]:
        return [n[len("ger."):] for n in self.params.names()
                if n[len("ger."):].split(".")[0] in groups]

    def set_trainable_mask(self, mask: str) -> None:
        """adapter: projectors + separator/segment rows + output head; projector: no head; full: all."""
        if mask not in TRAINABLE_MASKS:
            raise ValueError(f"unknown trainable mask {mask!r}")
        self.trainable_mask = mask
        if mask == FULL:
            self.params.set_trainable(True)
            return
        self.params.set_trainable(False)
        groups = _PROJECTOR_GROUPS + (("head",) if mask == ADAPTER else ())
        self.params.set_trainable(True, self.names_in(groups))

    def body_names(self) -> list[str]:
        return self.names_in(("llm", "dec"))

    # ------------------------------------------------------------------ prefix

    def embed_text(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.params["llm.emb"], ids)

    def audio_tokens(self, x_audio: Tensor, lengths: np.ndarray, char_counts: Sequence[int],
                     width: int) -> Tensor:
        """Mean-pool frames into one row per 1-best character, project to d_llm: (B, width, d_llm)."""
        from .hyp_text import pooling_plan

        bsz, t, _ = x_audio.shape
        pool = np.zeros((bsz, width, t))
        for b, c in enumerate(char_counts):
            pool[b, :c, :lengths[b]] = pooling_plan(int(lengths[b]), c)
        return linear(ops.matmul(pool, x_audio), self.params, "proj.audio")

    def prefix(self, inp: GerInput, fusion: FusionSettings,
               targets: Optional[Sequence[Sequence[int]]] = None) -> Prefix:
        """Build the cross-attention memory.

        ``targets`` (ground-truth tokens) drive the similarity weighting during
        training; without them the mean n-best embedding is used.
        """
        p, cfg = self.params, self.cfg
        bsz = inp.batch
        top1 = [list(nb[0]) if nb and nb[0] else [EOS] for nb in inp.nbest]
        counts = [len(t) for t in top1]
        c_max = max(counts)
        row_mask = (np.arange(c_max)[None, :] < np.array(counts)[:, None]).astype(np.float64)
        top_ids = np.full((bsz, c_max), PAD, dtype=np.int64)
        for b, t in enumerate(top1):
            top_ids[b, :len(t)] = t
        y_tok = ops.mul(self.embed_text(top_ids), row_mask[:, :, None])
        x_tok = ops.mul(self.audio_tokens(inp.x_audio, inp.lengths, counts, c_max), row_mask[:, :, None])

        mu = None
        if fusion.mode == hfcdf.HFCDF:
            target, sim_mask = self._similarity_target(inp, targets, counts, c_max)
            x_mmc, mu = hfcdf.fusion_slots(x_tok, y_tok, fusion.mode, fusion.cfg, target, sim_mask,
                                           fixed_mu=fusion.fixed_mu)
        else:
            x_mmc, _ = hfcdf.fusion_slots(x_tok, y_tok, fusion.mode, fusion.cfg, None, row_mask,
                                          params=p)
        pe = self._pe
        mmc_rows = ops.add(linear(x_mmc, p, "proj.mmc"), pe[:c_max] + 0.0)
        mmc_rows = ops.add(mmc_rows, p["seg"][0])

        # n-best context: [sep, hyp tokens...] per hypothesis
        ctx_lists, ctx_pos, ctx_sep = [], [], []
        for nb in inp.nbest:
            ids, pos, sep = [], [], []
            for h in nb:
                ids += [PAD] + list(h)
                pos += list(range(len(h) + 1))
                sep += [1.0] + [0.0] * len(h)
            ctx_lists.append(ids)
            ctx_pos.append(pos)
            ctx_sep.append(sep)
        m_ctx = max(max(len(c) for c in ctx_lists), 1)
        c_ids = np.full((bsz, m_ctx), PAD, dtype=np.int64)
        c_pe = np.zeros((bsz, m_ctx, cfg.d_model))
        is_sep = np.zeros((bsz, m_ctx))
        c_valid = np.zeros((bsz, m_ctx))
        for b in range(bsz):
            n = len(ctx_lists[b])
            c_ids[b, :n] = ctx_lists[b]
            c_pe[b, :n] = pe[ctx_pos[b]]
            is_sep[b, :n] = ctx_sep[b]
            c_valid[b, :n] = 1.0
        tok_rows = ops.mul(linear(self.embed_text(c_ids), p, "proj.ctx"),
                           ((1.0 - is_sep) * c_valid)[:, :, None])
        sep_rows = ops.mul(is_sep[:, :, None], p["sep"])
        ctx_rows = ops.add(ops.add(ops.add(tok_rows, sep_rows), c_pe), p["seg"][1])
        memory = _ln(ops.concat([mmc_rows, ctx_rows], axis=1), p, "dec.mem_ln")
        valid = np.concatenate([row_mask, c_valid], axis=1)
        bias = np.where(valid > 0, 0.0, ops.NEG_INF)
        return Prefix(memory, bias, mu, x_mmc)

    def _similarity_target(self, inp: GerInput, targets, counts, c_max):
        """Target embedding rows and the positions where they exist."""
        bsz, d = inp.batch, self.cfg.d_llm
        emb = self.params["llm.emb"].data
        tgt = np.zeros((bsz, c_max, d))
        mask = np.zeros((bsz, c_max))
        for b in range(bsz):
            if targets is not None:
                seq = list(targets[b])[:counts[b]]
                if seq:
                    tgt[b, :len(seq)] = emb[seq]
                    mask[b, :len(seq)] = 1.0
                continue
            hyps = [h for h in inp.nbest[b] if h] or [[EOS]]
            for i in range(counts[b]):
                rows = [emb[h[i]] for h in hyps if len(h) > i]
                if rows:
                    tgt[b, i] = np.mean(rows, axis=0)
                    mask[b, i] = 1.0
        return Tensor(tgt), mask

    # ----------------------------------------------------------------- decoder

    def _heads(self, t: Tensor) -> Tensor:
        r, n, d = t.shape
        h = self.cfg.n_heads
        return ops.swapaxes(ops.reshape(t, (r, n, h, d // h)), 1, 2)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray, name: str) -> Tensor:
        """q (R, H, Lq, dh) over k/v (R, H, Lk, dh) -> output projection (R, Lq, d)."""
        r, h, lq, dh = q.shape
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        att = ops.softmax(ops.add(scores, bias))
        ctx = ops.reshape(ops.swapaxes(ops.matmul(att, v), 1, 2), (r, lq, h * dh))
        return linear(ctx, self.params, f"{name}.o")

    def decoder_logits(self, prev: np.ndarray, memory: Tensor, mem_bias: np.ndarray,
                       rows: Optional[np.ndarray] = None) -> Tensor:
        """Logits (R, L, V) for decoder inputs ``prev`` (R, L) starting with BOS.

        ``memory`` has one entry per utterance; ``rows`` (length R) picks the
        utterance of each decoded sequence.  Keys and values of the memory are
        projected once per utterance and then gathered.
        """
        p = self.params
        r, steps = prev.shape
        x = ops.add(ops.embedding(p["dec.tok"], prev), self._pe[:steps])
        causal = np.triu(np.full((steps, steps), ops.NEG_INF), k=1)
        bias = mem_bias if rows is None else mem_bias[rows]
        cross = bias[:, None, None, :]
        for i in range(self.cfg.n_layers):
            pre = f"dec.l{i}"
            h = _ln(x, p, f"{pre}.sa_ln")
            q = self._heads(ops.matmul(h, p[f"{pre}.sa.q.w"]))
            k = self._heads(ops.matmul(h, p[f"{pre}.sa.k.w"]))
            v = self._heads(ops.matmul(h, p[f"{pre}.sa.v.w"]))
            x = ops.add(x, self._attend(q, k, v, causal, f"{pre}.sa"))
            h = _ln(x, p, f"{pre}.ca_ln")
            q = self._heads(ops.matmul(h, p[f"{pre}.ca.q.w"]))
            k = self._heads(ops.matmul(memory, p[f"{pre}.ca.k.w"]))
            v = self._heads(ops.matmul(memory, p[f"{pre}.ca.v.w"]))
            if rows is not None:
                k, v = ops.getitem(k, rows), ops.getitem(v, rows)
            x = ops.add(x, self._attend(q, k, v, cross, f"{pre}.ca"))
            hdn = ops.relu(linear(_ln(x, p, f"{pre}.ff_ln"), p, f"{pre}.ff1"))
            x = ops.add(x, linear(hdn, p, f"{pre}.ff2"))
        return linear(_ln(x, p, "dec.final_ln"), p, "head")

    def teacher_forced(self, prefix: Prefix, seqs: Sequence[Sequence[int]],
                       rows: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Logits for EOS-terminated ``seqs``; ``rows`` maps each sequence to its utterance."""
        ids, mask = pad_targets(seqs)
        prev = np.concatenate([np.full((len(seqs), 1), BOS), ids[:, :-1]], axis=1)
        prev = np.where(prev == PAD, EOS, prev)
        return self.decoder_logits(prev, prefix.memory, prefix.bias, rows), ids, mask


# --------------------------------------------------------------------- API

def llm_loss(model: GerModel, prefix: Prefix, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean per-token NLL of the EOS-terminated targets under teacher forcing."""
    if any(len(t) == 0 for t in targets):
        raise ValueError("GER targets must be non-empty")
    logits, ids, mask = model.teacher_forced(prefix, targets)
    return ops.cross_entropy(logits, ids, mask)


def sequence_log_probs(model: GerModel, prefix: Prefix, seqs: Sequence[Sequence[int]],
                       rows: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
    """Total log probability (incl. EOS) of each sequence, differentiable; plus stepwise values."""
    logits, ids, mask = model.teacher_forced(prefix, seqs, rows)
    logp = ops.log_softmax(logits)
    picked = ops.pick(logp, ids)  # (R, L)
    total = ops.sum(ops.mul(picked, mask), axis=1)
    return total, picked.data * mask


def score_hypothesis(model: GerModel, prefix: Prefix, y: Sequence[int], row: int = 0) -> float:
    if len(y) == 0:
        raise ValueError("hypothesis must be non-empty")
    total, _ = sequence_log_probs(model, prefix, [y], np.array([row]))
    return float(total.data[0])


def _np_ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class IncrementalDecoder:
    """Inference-only decoder that caches self-attention keys/values between steps.

    Matches :meth:`GerModel.decoder_logits` up to floating-point rounding.
    """

    def __init__(self, model: GerModel, memory: np.ndarray, mem_bias: np.ndarray, rows: np.ndarray):
        self.model = model
        self.w = {n[len("ger."):]: t.data for n, t in model.params.items()}
        h = model.cfg.n_heads
        self.cross_bias = mem_bias[rows][:, None, None, :]
        self.mem_kv = []
        for i in range(model.cfg.n_layers):
            k = self._split(memory @ self.w[f"dec.l{i}.ca.k.w"])[rows]
            v = self._split(memory @ self.w[f"dec.l{i}.ca.v.w"])[rows]
            self.mem_kv.append((k, v))
        self.n_heads = h

    def _split(self, x: np.ndarray) -> np.ndarray:
        r, n, d = x.shape
        h = self.model.cfg.n_heads
        return x.reshape(r, n, h, d // h).transpose(0, 2, 1, 3)

    def _attend(self, q, k, v, bias, name):
        dh = q.shape[-1]
        att = _np_softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(dh) + bias)
        ctx = att @ v
        r, h, lq, _ = ctx.shape
        ctx = ctx.transpose(0, 2, 1, 3).reshape(r, lq, h * dh)
        return ctx @ self.w[f"{name}.o.w"] + self.w[f"{name}.o.b"]

    def init_state(self, r: int) -> tuple:
        h = self.model.cfg.n_heads
        dh = self.model.cfg.d_model // h
        empty = np.zeros((r, h, 0, dh))
        return tuple(empty for _ in range(2 * self.model.cfg.n_layers))

    def step(self, state: tuple, prev: np.ndarray, t: int) -> tuple[np.ndarray, tuple]:
        w = self.w
        x = (w["dec.tok"][prev] + self.model._pe[t])[:, None, :]
        new_state = []
        for i in range(self.model.cfg.n_layers):
            pre = f"dec.l{i}"
            hdn = _np_ln(x, w[f"{pre}.sa_ln.g"], w[f"{pre}.sa_ln.b"])
            q = self._split(hdn @ w[f"{pre}.sa.q.w"])
            k = np.concatenate([state[2 * i], self._split(hdn @ w[f"{pre}.sa.k.w"])], axis=2)
            v = np.concatenate([state[2 * i + 1], self._split(hdn @ w[f"{pre}.sa.v.w"])], axis=2)
            new_state += [k, v]
            x = x + self._attend(q, k, v, 0.0, f"{pre}.sa")
            hdn = _np_ln(x, w[f"{pre}.ca_ln.g"], w[f"{pre}.ca_ln.b"])
            q = self._split(hdn @ w[f"{pre}.ca.q.w"])
            mk, mv = self.mem_kv[i]
            x = x + self._attend(q, mk, mv, self.cross_bias, f"{pre}.ca")
            hdn = _np_ln(x, w[f"{pre}.ff_ln.g"], w[f"{pre}.ff_ln.b"])
            ff = np.maximum(hdn @ w[f"{pre}.ff1.w"] + w[f"{pre}.ff1.b"], 0.0)
            x = x + ff @ w[f"{pre}.ff2.w"] + w[f"{pre}.ff2.b"]
        logits = _np_ln(x, w["dec.final_ln.g"], w["dec.final_ln.b"]) @ w["head.w"] + w["head.b"]
        z = logits[:, 0] - logits[:, 0].max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), tuple(new_state)


def generate(model: GerModel, prefix: Prefix, inp: GerInput, beam: int = 1) -> list[NBestList]:
    """Autoregressive correction with cached keys/values; beam 1 is greedy."""
    bsz = inp.batch
    rows = np.repeat(np.arange(bsz), beam)
    dec = IncrementalDecoder(model, prefix.memory.data, prefix.bias, rows)
    longest = [max((len(h) for h in nb), default=0) for nb in inp.nbest]
    max_len = np.array(longest) + model.cfg.max_extra_steps
    return beam_search(dec.step, dec.init_state(bsz * beam), bsz, beam, max_len)


def ger_forward(model: GerModel, prefix: Prefix, inp: GerInput,
                teacher: Optional[Sequence[Sequence[int]]] = None):
    """Teacher-forced (returns outputs and logits) or greedy generation (logits None)."""
    if teacher is not None:
        logits, ids, mask = model.teacher_forced(prefix, teacher)
        logp = ops.log_softmax(logits).data
        outs = []
        for r, seq in enumerate(teacher):
            steps = [float(logp[r, t, ids[r, t]]) for t in range(len(seq) + 1)]
            outs.append(GerOutput(list(seq) + [EOS], steps, float(np.sum(steps))))
        return outs, logits
    hyps: list[Hypothesis] = [nb.top1() for nb in generate(model, prefix, inp, beam=1)]
    seqs = [h.tokens for h in hyps]
    _, steps = sequence_log_probs(model, prefix, seqs, np.arange(len(seqs)))
    outs = []
    for r, h in enumerate(hyps):
        n = len(h.tokens) + (0 if h.truncated else 1)
        stepwise = [float(x) for x in steps[r, :n]]
        outs.append(GerOutput(list(h.tokens) + ([] if h.truncated else [EOS]), stepwise,
                              float(np.sum(stepwise)), h.truncated))
    return outs, None
