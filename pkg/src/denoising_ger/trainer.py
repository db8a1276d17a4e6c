"""Joint training of the noise adapter and the corrector, pretraining caches and ablations.

Training a configuration happens in three stages:

1. the base recogniser is pretrained on clean general-domain speech (random
   letter strings, no domain lexicon) and then frozen;
2. the corrector body is pretrained on text only, learning to map synthetically
   corrupted n-best lists of training transcripts back to the clean text;
3. the configured components are fine-tuned jointly on the noisy training split
   with ``L = L_LLM + alpha * L_ASR + beta * L_RL``.

Stages 1 and 2 depend only on the corpus and the seed, so they are cached and
shared across ablation rows.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint, hfcdf
from .autodiff import Graph, NonFiniteError, Tensor, no_grad, ops
from .evaluate import EVAL_SPLITS, EvalReport, evaluate
from .ger_decoder import ADAPTER, FusionSettings, GerConfig, GerInput, GerModel, llm_loss, sequence_log_probs
from .hfcdf import FusionConfig
from .hyp_text import Tokenizer
from .mwer import MwerBatchItem, batch_rl_loss
from .naae_asr import (ADAPTER_ONLY, FROZEN, FULL_FT, AsrConfig, AsrLossConfig, NaaeModel, asr_loss,
                       batch_features)
from .nn import Adam
from .speech_sim import Corpus, pretraining_utterances

log = logging.getLogger(__name__)

JOINT, TWO_STAGE = "joint", "two_stage"


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.2
    lam: float = 0.5
    k: float = 0.7
    k_a: float = 0.7
    k_t: float = 0.3
    paper_mode: bool = True
    fusion_mode: str = hfcdf.HFCDF
    beam: int = 5
    lr: float = 2e-4
    warmup_steps: int = 100
    epochs: int = 5
    batch_size: int = 8
    seed: int = 1
    naae_on: bool = True
    hfcdf_on: bool = True
    rl_on: bool = True
    asr_mode: str = ""            # "" derives frozen/adapter_only from naae_on; "full_ft" overrides
    ger_trainable: str = ADAPTER
    l1_target: str = "input"
    rl_scores: str = "ger"        # which model's likelihoods feed the RL term
    schedule: str = JOINT
    mu_inference: str = "nbest_mean"  # or "fixed" (mu = 0.5)
    clip_norm: float = 5.0
    eval_limit: int = 0           # 0 = full test splits
    eval_every: int = 1           # evaluate after every n-th epoch; 0 = only before training and at the end
    # pretraining
    asr_pretrain_utterances: int = 2000
    asr_pretrain_epochs: int = 2
    asr_pretrain_lr: float = 3e-3
    llm_pretrain_steps: int = 1500
    llm_pretrain_lr: float = 2e-3
    llm_pretrain_batch: int = 16

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.asr_mode not in ("", FROZEN, ADAPTER_ONLY, FULL_FT):
            raise ValueError(f"unknown asr_mode {self.asr_mode!r}")
        if self.fusion_mode not in hfcdf.FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.rl_scores not in ("ger", "asr"):
            raise ValueError("rl_scores must be 'ger' or 'asr'")
        if self.schedule not in (JOINT, TWO_STAGE):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.mu_inference not in ("nbest_mean", "fixed"):
            raise ValueError(f"unknown mu_inference {self.mu_inference!r}")
        AsrLossConfig(self.lam, self.l1_target)
        self.fusion_config()

    @property
    def effective_asr_mode(self) -> str:
        if self.asr_mode:
            return self.asr_mode
        return ADAPTER_ONLY if self.naae_on else FROZEN

    @property
    def effective_fusion_mode(self) -> str:
        """With the fusion component off the corrector sees text only."""
        return self.fusion_mode if self.hfcdf_on else hfcdf.LINGUISTIC_ONLY

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.k, self.k_a, self.k_t, self.paper_mode)

    def fusion(self, training: bool) -> FusionSettings:
        fixed = 0.5 if (not training and self.mu_inference == "fixed") else None
        return FusionSettings(self.effective_fusion_mode, self.fusion_config(), fixed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    llm: float
    asr: float
    rl: float
    alpha: float
    beta: float
    lam: float
    total: float

    def recomputed(self) -> float:
        return self.llm + self.alpha * self.asr + self.beta * self.rl


def total_loss(llm, asr, rl, cfg: TrainConfig) -> Tensor:
    """L_LLM + alpha * L_ASR + beta * L_RL; ``None`` parts are disabled and contribute 0."""
    if cfg.alpha < 0 or cfg.beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    total = llm if isinstance(llm, Tensor) else Tensor(llm)
    if asr is not None and cfg.alpha != 0.0:
        total = ops.add(total, ops.scale(asr if isinstance(asr, Tensor) else Tensor(asr), cfg.alpha))
    if rl is not None and cfg.beta != 0.0:
        total = ops.add(total, ops.scale(rl if isinstance(rl, Tensor) else Tensor(rl), cfg.beta))
    return total


@dataclass
class EpochRecord:
    epoch: int
    losses: Optional[LossBreakdown]   # mean over the epoch's steps; None for epoch 0
    wer: Optional[dict]              # split -> {"baseline": pooled, "corrected": pooled}; None if not evaluated
    clip_events: int = 0


@dataclass
class TrainReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[LossBreakdown] = field(default_factory=list)
    param_counts: dict = field(default_factory=dict)
    final_eval: Optional[EvalReport] = None
    wall_seconds: float = 0.0

    def wer(self, split: str, epoch: int = -1, column: str = "corrected") -> float:
        return self.epochs[epoch].wer[split][column]

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "config": self.config,
            "param_counts": self.param_counts,
            "epochs": [{"epoch": e.epoch, "losses": None if e.losses is None else asdict(e.losses),
                        "wer": e.wer, "clip_events": e.clip_events} for e in self.epochs],
            "steps": [asdict(s) for s in self.steps],
            "final_eval": None if self.final_eval is None else self.final_eval.to_dict(),
        }
        if timing:
            d["wall_seconds"] = self.wall_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        eps = [EpochRecord(e["epoch"], None if e["losses"] is None else LossBreakdown(**e["losses"]),
                           e["wer"], e.get("clip_events", 0)) for e in d["epochs"]]
        fe = None if d.get("final_eval") is None else EvalReport.from_dict(d["final_eval"])
        return cls(d["config"], eps, [LossBreakdown(**s) for s in d["steps"]], d["param_counts"], fe,
                   d.get("wall_seconds", 0.0))

    def table(self) -> str:
        first = self.epochs[0].wer
        # json round trips sort the keys; keep the canonical split order
        splits = [s for s in EVAL_SPLITS if s in first] + [s for s in first if s not in EVAL_SPLITS]
        lines = [f"{'epoch':>5}{'L_LLM':>10}{'L_ASR':>10}{'L_RL':>10}{'total':>10}  "
                 + "  ".join(f"{s[5:]:>14}" for s in splits)]
        for e in self.epochs:
            if e.losses is None:
                head = f"{e.epoch:>5}" + " " * 40
            else:
                lb = e.losses
                head = f"{e.epoch:>5}{lb.llm:>10.4f}{lb.asr:>10.4f}{lb.rl:>10.4f}{lb.total:>10.4f}"
            if e.wer is None:
                lines.append(f"{head}  (not evaluated)")
                continue
            cols = "  ".join(f"{100 * e.wer[s]['baseline']:>6.2f}/{100 * e.wer[s]['corrected']:>6.2f}"
                             for s in splits)
            lines.append(f"{head}  {cols}")
        return "\n".join(lines)


# ----------------------------------------------------------- shared models

def tokenizer_for(corpus: Corpus) -> Tokenizer:
    return Tokenizer(corpus.vocab.characters)


def make_models(corpus: Corpus, seed: int) -> tuple[NaaeModel, GerModel, Tokenizer]:
    tok = tokenizer_for(corpus)
    cfg = corpus.config
    asr = NaaeModel(AsrConfig(vocab_size=len(tok), n_features=cfg.n_features,
                              frames_per_char=cfg.frames_per_char), seed=seed)
    ger = GerModel(GerConfig(vocab_size=len(tok), d_audio=asr.cfg.d_enc), seed=seed)
    return asr, ger, tok


_CACHE: dict[str, dict[str, np.ndarray]] = {}


def _cached(key: str, cache_dir: Optional[Path], build: Callable[[], dict]) -> dict[str, np.ndarray]:
    if key in _CACHE:
        return _CACHE[key]
    path = None
    if cache_dir is not None:
        import hashlib

        path = Path(cache_dir) / f"pretrain-{hashlib.sha256(key.encode()).hexdigest()[:16]}.ckpt"
        if path.exists():
            _CACHE[key] = checkpoint.load(path)
            return _CACHE[key]
    state = build()
    _CACHE[key] = state
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, state)
    return state


def pretrain_asr(corpus: Corpus, cfg: TrainConfig, cache_dir: Optional[Path] = None) -> dict:
    """Base recogniser trained on clean random-letter speech (cross-entropy only)."""
    key = json.dumps({"stage": "asr", "corpus": corpus.fingerprint(), "seed": cfg.seed,
                      "n": cfg.asr_pretrain_utterances, "epochs": cfg.asr_pretrain_epochs,
                      "lr": cfg.asr_pretrain_lr}, sort_keys=True)

    def build():
        asr, _, tok = make_models(corpus, cfg.seed)
        asr.set_all_trainable()
        data = pretraining_utterances(corpus.vocab, cfg.asr_pretrain_utterances, cfg.seed,
                                      jitter=corpus.config.jitter)
        opt = Adam(asr.params.trainable_params(), lr=cfg.asr_pretrain_lr, clip_norm=cfg.clip_norm)
        for epoch in range(cfg.asr_pretrain_epochs):
            order = np.random.default_rng((cfg.seed, 0xA51, epoch)).permutation(len(data))
            for s in range(0, len(order), 16):
                chunk = [data[i] for i in order[s:s + 16]]
                fb = batch_features([f for _, f in chunk])
                with Graph() as g:
                    xa = asr.adapt(fb)
                    xe = asr.encode(xa, fb.lengths)
                    loss = asr_loss(asr, fb, xa, xe, [tok.encode(t) for t, _ in chunk], AsrLossConfig(lam=1.0))
                opt.step(g.backward(loss))
        log.info("ASR pretraining done (seed %d)", cfg.seed)
        return asr.params.state()

    return _cached(key, cache_dir, build)


def corrupt_tokens(tokens: Sequence[int], letters: Sequence[int], rng: np.random.Generator,
                   p_sub: float, p_ins: float, p_del: float) -> list[int]:
    out = []
    for t in tokens:
        r = rng.random()
        if r < p_del:
            continue
        if r < p_del + p_sub:
            out.append(int(rng.choice(letters)))
        else:
            out.append(int(t))
        if rng.random() < p_ins:
            out.append(int(rng.choice(letters)))
    return out


def synthetic_nbest(tokens: Sequence[int], letters: Sequence[int], n: int,
                    rng: np.random.Generator) -> list[list[int]]:
    """n variants sharing one base corruption, each with a little extra noise of its own."""
    strength = rng.uniform(0.0, 0.15)
    base = corrupt_tokens(tokens, letters, rng, strength, strength / 5, strength / 5)
    return [base] + [corrupt_tokens(base, letters, rng, 0.05, 0.01, 0.01) for _ in range(n - 1)]


def pretrain_llm(corpus: Corpus, cfg: TrainConfig, cache_dir: Optional[Path] = None) -> dict:
    """Text-only corrector pretraining on corrupted training transcripts."""
    key = json.dumps({"stage": "llm", "corpus": corpus.fingerprint(), "seed": cfg.seed,
                      "steps": cfg.llm_pretrain_steps, "lr": cfg.llm_pretrain_lr,
                      "batch": cfg.llm_pretrain_batch, "beam": cfg.beam,
                      "fusion": asdict(cfg.fusion_config())}, sort_keys=True)

    def build():
        _, ger, tok = make_models(corpus, cfg.seed)
        ger.set_trainable_mask("full")
        ger.params.set_trainable(False, ["proj.audio.w", "proj.audio.b"])
        texts = [tok.encode(u.text) for u in corpus["train"]]
        letters = [tok.char_to_id[c] for c in tok.characters if c != " "]
        rng = np.random.default_rng((cfg.seed, 0x11A))
        opt = Adam(ger.params.trainable_params(), lr=cfg.llm_pretrain_lr, warmup_steps=100,
                   clip_norm=cfg.clip_norm)
        # both prefix layouts the corrector meets later, with an empty acoustic slot
        layouts = [FusionSettings(hfcdf.LINGUISTIC_ONLY), FusionSettings(hfcdf.HFCDF, cfg.fusion_config())]
        for step in range(cfg.llm_pretrain_steps):
            fusion = layouts[step % 2]
            idx = rng.integers(0, len(texts), size=cfg.llm_pretrain_batch)
            targets = [texts[i] for i in idx]
            nbest = [synthetic_nbest(t, letters, cfg.beam, rng) for t in targets]
            inp = GerInput(Tensor(np.zeros((len(idx), 1, ger.cfg.d_audio))), np.ones(len(idx), dtype=int), nbest)
            with Graph() as g:
                loss = llm_loss(ger, ger.prefix(inp, fusion), targets)
            opt.step(g.backward(loss))
        log.info("corrector pretraining done (seed %d), final loss %.4f", cfg.seed, loss.item())
        return ger.params.state()

    return _cached(key, cache_dir, build)


def initial_models(corpus: Corpus, cfg: TrainConfig, cache_dir: Optional[Path] = None):
    asr, ger, tok = make_models(corpus, cfg.seed)
    asr.params.load_state(pretrain_asr(corpus, cfg, cache_dir))
    ger.params.load_state(pretrain_llm(corpus, cfg, cache_dir))
    asr.set_finetune_mode(cfg.effective_asr_mode)
    ger.set_trainable_mask(cfg.ger_trainable)
    return asr, ger, tok


# -------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


def _asr_sequence_scores(asr: NaaeModel, x_audio: Tensor, lengths: np.ndarray,
                         seqs: Sequence[Sequence[int]], rows: np.ndarray) -> Tensor:
    from .naae_asr import pad_targets

    ids, mask = pad_targets(seqs)
    mem = asr.memory(ops.getitem(x_audio, rows), lengths[rows])
    logp = ops.log_softmax(asr.teacher_forced_logits(mem, ids))
    return ops.sum(ops.mul(ops.pick(logp, ids), mask), axis=1)


def composed_loss(asr: NaaeModel, ger: GerModel, tok: Tokenizer, batch, cfg: TrainConfig,
                  nbest: Optional[Sequence[Sequence[Sequence[int]]]] = None,
                  stage: str = JOINT) -> tuple[Tensor, LossBreakdown, list]:
    """Total loss of a batch; the n-best lists are decoded unless given.

    Call inside a :class:`Graph`.  With ``nbest`` fixed the loss is a smooth
    function of the parameters, which is what gradient checking needs.
    """
    fb = batch_features([u.noisy_frames for u in batch])
    targets = [tok.encode(u.text) for u in batch]
    asr_active = cfg.naae_on and stage != "ger" and asr.finetune_mode != FROZEN
    ger_active = stage != "asr"
    xa = asr.adapt(fb)
    xe = asr.encode(xa, fb.lengths)
    if nbest is None:
        with no_grad():
            nbest = [[h.tokens for h in nb] for nb in asr.decode_nbest(Tensor(xe.data), fb.lengths, cfg.beam)]
    l_asr = None
    if asr_active:
        clean = None
        if cfg.l1_target == "clean":
            clean = batch_features([u.clean_frames for u in batch]).x
        l_asr = asr_loss(asr, fb, xa, xe, targets, AsrLossConfig(cfg.lam, cfg.l1_target), clean)
    l_llm, l_rl = None, None
    if ger_active:
        hyps = [list(hs) for hs in nbest]
        prefix = ger.prefix(GerInput(xe, fb.lengths, hyps), cfg.fusion(training=True), targets)
        l_llm = llm_loss(ger, prefix, targets)
        if cfg.rl_on:
            flat = [h for hs in hyps for h in hs]
            rows = np.repeat(np.arange(len(hyps)), [len(hs) for hs in hyps])
            if cfg.rl_scores == "ger":
                scores, _ = sequence_log_probs(ger, prefix, flat, rows)
            else:
                scores = _asr_sequence_scores(asr, xe, fb.lengths, flat, rows)
            items, start = [], 0
            for u, hs in zip(batch, hyps):
                idx = np.arange(start, start + len(hs))
                items.append(MwerBatchItem.build([tok.decode(h) for h in hs], u.text, ops.getitem(scores, idx)))
                start += len(hs)
            l_rl = batch_rl_loss(items)
    if l_llm is None:
        total = ops.scale(l_asr, cfg.alpha) if l_asr is not None else Tensor(0.0)
    else:
        total = total_loss(l_llm, l_asr, l_rl, cfg)
    parts = LossBreakdown(
        llm=0.0 if l_llm is None else l_llm.item(),
        asr=0.0 if l_asr is None else l_asr.item(),
        rl=0.0 if l_rl is None else l_rl.item(),
        alpha=cfg.alpha, beta=cfg.beta, lam=cfg.lam, total=total.item())
    return total, parts, nbest


def train_step(asr: NaaeModel, ger: GerModel, tok: Tokenizer, batch, cfg: TrainConfig,
               stage: str = JOINT) -> tuple[Graph, Tensor, LossBreakdown]:
    """Forward pass of one batch with freshly decoded n-best lists.

    ``stage`` is "asr" or "ger" for the two-stage schedule, otherwise joint.
    """
    with Graph() as g:
        total, parts, _ = composed_loss(asr, ger, tok, batch, cfg, stage=stage)
    return g, total, parts


def _mean_breakdown(items: Sequence[LossBreakdown], cfg: TrainConfig) -> LossBreakdown:
    llm = float(np.mean([s.llm for s in items]))
    asr = float(np.mean([s.asr for s in items]))
    rl = float(np.mean([s.rl for s in items]))
    return LossBreakdown(llm, asr, rl, cfg.alpha, cfg.beta, cfg.lam, llm + cfg.alpha * asr + cfg.beta * rl)


def _wer_summary(report: EvalReport) -> dict:
    return {n: {"baseline": s.baseline_pooled, "corrected": s.corrected_pooled}
            for n, s in report.splits.items()}


def _checkpoint_blocks(asr, ger, opt: Adam, epoch: int) -> dict:
    blocks = {}
    blocks.update(asr.params.state())
    blocks.update(ger.params.state())
    blocks.update(opt.state())
    blocks["train.epoch"] = np.array([float(epoch)])
    blocks["train.clip_events"] = np.array([float(opt.clip_events)])
    return blocks


def _trainable(asr: NaaeModel, ger: GerModel) -> list[Tensor]:
    return asr.params.trainable_params() + ger.params.trainable_params()


def sidecar_path(ckpt_path) -> Path:
    return Path(ckpt_path).with_suffix(".json")


def write_sidecar(ckpt_path, cfg: TrainConfig, corpus: Corpus) -> None:
    """Config and corpus identity next to a checkpoint, enough to rebuild the models."""
    meta = {"config": cfg.to_dict(),
            "corpus": {"seed": corpus.seed, "config": asdict(corpus.config), "fingerprint": corpus.fingerprint()}}
    sidecar_path(ckpt_path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_trained(ckpt_path, corpus: Optional[Corpus] = None):
    """(cfg, asr, ger, tok, corpus) from a checkpoint and its sidecar.

    Without ``corpus`` an empty one (vocabulary only) is rebuilt from the sidecar.
    """
    from .speech_sim import WORD_LIST, CorpusConfig, Vocabulary

    ckpt_path = Path(ckpt_path)
    meta_path = sidecar_path(ckpt_path)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    cfg = TrainConfig.from_dict(meta["config"])
    ccfg = CorpusConfig(**meta["corpus"]["config"])
    if corpus is None:
        vocab = Vocabulary.build(WORD_LIST[:ccfg.vocab_size], meta["corpus"]["seed"], ccfg.frames_per_char,
                                 ccfg.n_features, ccfg.template_spread, ccfg.n_groups, ccfg.homophones)
        corpus = Corpus(ccfg, meta["corpus"]["seed"], vocab)
    elif corpus.fingerprint() != meta["corpus"]["fingerprint"]:
        shape = ("vocab_size", "n_features", "frames_per_char")
        if any(getattr(corpus.config, a) != getattr(ccfg, a) for a in shape):
            raise ValueError("corpus vocabulary or feature shape does not match the checkpoint")
        log.warning("evaluating on a different corpus than the checkpoint was trained on")
    asr, ger, tok = make_models(corpus, cfg.seed)
    blocks = checkpoint.load(ckpt_path)
    asr.params.load_state(blocks)
    ger.params.load_state(blocks)
    asr.set_finetune_mode(cfg.effective_asr_mode)
    ger.set_trainable_mask(cfg.ger_trainable)
    return cfg, asr, ger, tok, corpus


def train(corpus: Corpus, cfg: TrainConfig, out_dir: Optional[Path] = None, resume: bool = False,
          cache_dir: Optional[Path] = None, stop_after_epoch: Optional[int] = None,
          splits: Sequence[str] = EVAL_SPLITS) -> tuple[TrainReport, NaaeModel, GerModel]:
    """Fine-tune per ``cfg``; evaluates every split before training and after each epoch.

    With ``out_dir`` a checkpoint (``model.ckpt``) and report are written after
    every epoch; ``resume`` continues from them.  ``stop_after_epoch`` ends the
    run early, simulating an interruption.
    """
    if "train" not in corpus.splits or len(corpus["train"]) == 0:
        raise ValueError("training split is empty")
    t0 = time.time()
    asr, ger, tok = initial_models(corpus, cfg, cache_dir)
    params = _trainable(asr, ger)
    opt = Adam(params, lr=cfg.lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
    report = TrainReport(cfg.to_dict())
    report.param_counts = {
        "asr_total": asr.params.count(), "asr_trainable": asr.params.count(trainable_only=True),
        "ger_total": ger.params.count(), "ger_trainable": ger.params.count(trainable_only=True),
    }
    limit = cfg.eval_limit or None
    start_epoch = 1
    ckpt_path = None if out_dir is None else Path(out_dir) / "model.ckpt"
    report_path = None if out_dir is None else Path(out_dir) / "report.json"
    if resume:
        if ckpt_path is None or not ckpt_path.exists() or not report_path.exists():
            raise FileNotFoundError("nothing to resume from")
        blocks = checkpoint.load(ckpt_path)
        asr.params.load_state({k: v for k, v in blocks.items() if k.startswith("asr.")})
        ger.params.load_state({k: v for k, v in blocks.items() if k.startswith("ger.")})
        opt.load_state(blocks)
        opt.clip_events = int(blocks["train.clip_events"][0])
        report = TrainReport.from_dict(json.loads(report_path.read_text()))
        start_epoch = int(blocks["train.epoch"][0]) + 1
    else:
        ev = evaluate(asr, ger, cfg.fusion(training=False), tok, corpus, cfg.beam, splits, limit)
        report.epochs.append(EpochRecord(0, None, _wer_summary(ev)))

    train_utts = corpus["train"].utterances
    total_epochs = cfg.epochs * (2 if cfg.schedule == TWO_STAGE else 1)
    for epoch in range(start_epoch, total_epochs + 1):
        stage = JOINT
        if cfg.schedule == TWO_STAGE:
            stage = "asr" if epoch <= cfg.epochs else "ger"
        order = np.random.default_rng((cfg.seed, 0x5EED, epoch)).permutation(len(train_utts))
        step_parts = []
        clip_before = opt.clip_events
        for s in range(0, len(order), cfg.batch_size):
            batch = [train_utts[i] for i in order[s:s + cfg.batch_size]]
            try:
                g, loss, parts = train_step(asr, ger, tok, batch, cfg, stage)
            except NonFiniteError as e:
                raise TrainingDiverged(f"non-finite value in op {e.op} at node {e.node_id} "
                                       f"(epoch {epoch}, step {opt.step_count + 1})") from e
            if not np.isfinite(parts.total):
                raise TrainingDiverged(f"loss became non-finite at step {opt.step_count + 1}")
            opt.step(g.backward(loss))
            step_parts.append(parts)
        report.steps.extend(step_parts)
        last = epoch == total_epochs or (stop_after_epoch is not None and epoch >= stop_after_epoch)
        wer_now = None
        if last or (cfg.eval_every and epoch % cfg.eval_every == 0):
            ev = evaluate(asr, ger, cfg.fusion(training=False), tok, corpus, cfg.beam, splits, limit)
            wer_now = _wer_summary(ev)
        report.epochs.append(EpochRecord(epoch, _mean_breakdown(step_parts, cfg), wer_now,
                                         opt.clip_events - clip_before))
        if opt.clip_events > clip_before:
            log.info("epoch %d: gradient clipped on %d steps", epoch, opt.clip_events - clip_before)
        if epoch == total_epochs:
            report.final_eval = ev
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            checkpoint.save(ckpt_path, _checkpoint_blocks(asr, ger, opt, epoch))
            write_sidecar(ckpt_path, cfg, corpus)
            report_path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        if stop_after_epoch is not None and epoch >= stop_after_epoch and epoch < total_epochs:
            break
    report.wall_seconds = time.time() - t0
    if out_dir is not None:
        (Path(out_dir) / "timing.json").write_text(json.dumps({"wall_seconds": report.wall_seconds}))
    return report, asr, ger


# ------------------------------------------------------------- ablations

# (naae, hfcdf, rl): the six component rows plus (off, on, on), which doubles
# as the frozen-encoder arm of the fine-tuning comparison
ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, True, True),
    (False, True, True),
)


@dataclass
class AblationRow:
    naae: bool
    hfcdf: bool
    rl: bool
    wer: dict            # split -> corrected pooled WER at the final epoch (mean over seeds)
    per_seed: dict       # seed -> split -> corrected WER
    initial: dict        # seed -> split -> epoch-0 {baseline, corrected}
    trainable_params: int


def ablation_matrix(corpus: Corpus, base_cfg: TrainConfig, seeds: Sequence[int] = (1,),
                    rows: Sequence[tuple] = ABLATION_ROWS, cache_dir: Optional[Path] = None,
                    splits: Sequence[str] = EVAL_SPLITS,
                    on_run: Optional[Callable] = None) -> list[AblationRow]:
    out = []
    for naae, hf, rl in rows:
        per_seed, initial, n_params = {}, {}, 0
        for seed in seeds:
            cfg = replace(base_cfg, naae_on=naae, hfcdf_on=hf, rl_on=rl, seed=seed)
            report, _, _ = train(corpus, cfg, cache_dir=cache_dir, splits=splits)
            per_seed[seed] = {s: report.wer(s) for s in splits}
            initial[seed] = report.epochs[0].wer
            n_params = report.param_counts["asr_trainable"] + report.param_counts["ger_trainable"]
            if on_run is not None:
                on_run((naae, hf, rl), seed, report)
        mean = {s: float(np.mean([per_seed[x][s] for x in seeds])) for s in splits}
        out.append(AblationRow(naae, hf, rl, mean, per_seed, initial, n_params))
    return out


def ablation_table(rows: Sequence[AblationRow]) -> str:
    mark = {True: "on", False: "-"}
    splits = list(rows[0].wer)
    lines = [f"{'NAAE':>5}{'HFCDF':>7}{'RL':>5}  " + "".join(f"{s[5:]:>16}" for s in splits)]
    for r in rows:
        lines.append(f"{mark[r.naae]:>5}{mark[r.hfcdf]:>7}{mark[r.rl]:>5}  "
                     + "".join(f"{100 * r.wer[s]:>15.2f}%" for s in splits))
    return "\n".join(lines)


def fusion_matrix(corpus: Corpus, base_cfg: TrainConfig, seeds: Sequence[int] = (1,),
                  modes: Sequence[str] = hfcdf.FUSION_MODES, cache_dir: Optional[Path] = None,
                  splits: Sequence[str] = EVAL_SPLITS, on_run: Optional[Callable] = None) -> dict:
    """Final corrected WER per fusion mode (all components on), mean over seeds."""
    out = {}
    for mode in modes:
        per_seed = {}
        for seed in seeds:
            cfg = replace(base_cfg, fusion_mode=mode, hfcdf_on=True, seed=seed)
            report, _, _ = train(corpus, cfg, cache_dir=cache_dir, splits=splits)
            per_seed[seed] = {s: report.wer(s) for s in splits}
            if on_run is not None:
                on_run(mode, seed, report)
        out[mode] = {"wer": {s: float(np.mean([per_seed[x][s] for x in seeds])) for s in splits},
                     "per_seed": per_seed}
    return out


def fusion_table(results: dict) -> str:
    splits = list(next(iter(results.values()))["wer"])
    lines = [f"{'fusion':<16}" + "".join(f"{s[5:]:>16}" for s in splits)]
    for mode, r in results.items():
        lines.append(f"{mode:<16}" + "".join(f"{100 * r['wer'][s]:>15.2f}%" for s in splits))
    return "\n".join(lines)


def trainable_counts(corpus: Corpus, seed: int = 1) -> dict[str, int]:
    """Recogniser trainable-parameter count per fine-tuning mode."""
    asr, _, _ = make_models(corpus, seed)
    out = {}
    for mode in (FROZEN, ADAPTER_ONLY, FULL_FT):
        asr.set_finetune_mode(mode)
        out[mode] = asr.params.count(trainable_only=True)
    return out
