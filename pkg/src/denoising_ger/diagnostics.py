"""Finite-difference gradient checks at every module seam."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import hfcdf
from .autodiff import Graph, Tensor, corrupt_backward, grad_check_leaves, ops
from .ger_decoder import FusionSettings, GerConfig, GerInput, GerModel, llm_loss
from .mwer import MwerBatchItem, rl_loss
from .naae_asr import ADAPTER_ONLY, AsrConfig, AsrLossConfig, NaaeModel, asr_loss, batch_features

OP_TOL = 1e-4
COMPONENT_TOL = 1e-3
STEP = 1e-4
COMPONENTS = ("ops", "naae", "hfcdf", "ger", "mwer", "total")


@dataclass
class CheckResult:
    component: str
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}  {self.component:<6} {self.name:<28} rel.err {self.error:.3e} (< {self.tolerance:g})"


def _leaf(rng, *shape, away_from_zero=False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, 0.3 * np.sign(x) + 0.01, x)
    return Tensor(x, requires_grad=True)


def _project(out: Tensor) -> Tensor:
    w = np.random.default_rng(out.data.size).normal(size=out.shape)
    return ops.sum(ops.mul(out, w))


def op_cases(rng: np.random.Generator) -> dict[str, tuple[list[Tensor], Callable]]:
    """One small random instance per differentiable op, keyed by op name."""
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    pool = ops.segment_pool_matrix(7, 3)
    r = lambda *s: _leaf(rng, *s)  # noqa: E731
    return {
        "add": ([r(3, 4), r(4)], ops.add),
        "sub": ([r(3, 4), r(3, 4)], ops.sub),
        "mul-by-scalar": ([r(5)], lambda a: ops.scale(a, -2.5)),
        "matmul": ([r(3, 4), r(4, 5)], ops.matmul),
        "concat-last-dim": ([r(2, 3), r(2, 5)], lambda a, b: ops.concat([a, b])),
        "relu": ([_leaf(rng, 4, 3, away_from_zero=True)], ops.relu),
        "tanh": ([r(4, 3)], ops.tanh),
        "softmax-last-dim": ([r(3, 6)], ops.softmax),
        "layer-norm": ([r(3, 6), r(6), r(6)], ops.layer_norm),
        "mean": ([r(3, 4)], lambda a: ops.mean(a, axis=0)),
        "l1-distance": ([r(3, 4), r(3, 4)], ops.l1_distance),
        "cross-entropy-with-logits": ([r(2, 3, 5)],
                                      lambda a: ops.cross_entropy(a, np.array([[0, 4, 2], [1, 1, 3]]))),
        "cosine-similarity": ([r(4, 6), r(4, 6)], ops.cosine_similarity),
        "embedding-lookup": ([r(4, 3)], lambda t: ops.embedding(t, ids)),
        "conv1d": ([r(2, 8, 3), r(4, 3, 2), r(2)], lambda x, w, b: ops.conv1d(x, w, b, 2, 1)),
        "transpose-conv1d": ([r(2, 4, 3), r(4, 3, 2), r(2)],
                             lambda x, w, b: ops.conv_transpose1d(x, w, b, 2, 1)),
        "mean-pool-segments": ([r(7, 4)], lambda x: ops.mean_pool_segments(x, pool)),
    }


def check_ops(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (leaves, fn) in op_cases(np.random.default_rng(seed)).items():
        err = grad_check_leaves(lambda fn=fn, leaves=leaves: _project(fn(*leaves)), leaves, step=STEP)
        out.append(CheckResult("ops", name, err, OP_TOL))
    return out


def _toy_features(rng, n_frames=(13, 9), n_features=6) -> list[np.ndarray]:
    return [rng.normal(size=(t, n_features)) for t in n_frames]


def _randomise(params, names: Iterable[str], rng, scale=0.3) -> None:
    for n in names:
        t = params[n]
        t.data = rng.normal(scale=scale, size=t.shape)


def check_naae(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    asr = NaaeModel(AsrConfig(vocab_size=7, n_features=6, frames_per_char=4, d_enc=8, conv_channels=6,
                              adapter_channels=4, d_emb=4, d_hidden=8, d_att=6), seed=seed,
                    finetune_mode=ADAPTER_ONLY)
    # zero biases on zero padding sit exactly on ReLU kinks; probe a generic point
    _randomise(asr.params, asr.group("adapter"), rng)
    fb = batch_features(_toy_features(rng))
    targets = [[4, 5, 6], [5, 4]]
    leaves = asr.params.trainable_params()

    def f():
        xa = asr.adapt(fb)
        return asr_loss(asr, fb, xa, asr.encode(xa, fb.lengths), targets, AsrLossConfig(lam=0.5))

    return [CheckResult("naae", "asr_loss wrt adapter", grad_check_leaves(f, leaves, STEP, max_coords=12),
                        COMPONENT_TOL)]


def check_hfcdf(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for label, cfg in (("variant", hfcdf.FusionConfig(k_a=0.7, k_t=0.3, paper_mode=False)),
                       ("paper_mode", hfcdf.FusionConfig(k=0.7))):
        x, y, target = _leaf(rng, 5, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)

        def f(cfg=cfg, x=x, y=y, target=target):
            xc, yc = hfcdf.compensate(x, y, cfg)
            mu = hfcdf.dynamic_weight(xc, yc, target)
            return _project(hfcdf.fuse(xc, yc, mu).x_mmc)

        out.append(CheckResult("hfcdf", f"compensate-weight-fuse ({label})",
                               grad_check_leaves(f, [x, y, target], STEP), COMPONENT_TOL))
    return out


def _toy_ger(seed: int) -> GerModel:
    return GerModel(GerConfig(vocab_size=8, d_audio=8, d_llm=6, d_model=8, n_heads=2, n_layers=2, d_ff=10),
                    seed=seed)


def check_ger(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    ger = _toy_ger(seed)
    ger.set_trainable_mask("full")
    _randomise(ger.params, ["proj.audio.w", "head.w"], rng)
    inp = GerInput(Tensor(rng.normal(size=(2, 9, 8))), np.array([9, 6]),
                   [[[4, 5, 6], [4, 6]], [[7, 5], [7, 5, 5]]])
    targets = [[4, 5, 6, 7], [7, 5]]
    fusion = FusionSettings(hfcdf.HFCDF, hfcdf.FusionConfig(paper_mode=False))
    leaves = ger.params.trainable_params()

    def f():
        return llm_loss(ger, ger.prefix(inp, fusion, targets), targets)

    return [CheckResult("ger", "llm_loss wrt all parameters", grad_check_leaves(f, leaves, STEP, max_coords=6),
                        COMPONENT_TOL)]


def check_mwer(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    scores = _leaf(rng, 5)
    item = MwerBatchItem(["a"] * 5, "a", scores, rng.uniform(0, 1, size=5))
    return [CheckResult("mwer", "rl_loss wrt scores", grad_check_leaves(lambda: rl_loss(item), [scores], STEP),
                        OP_TOL)]


def check_total(seed: int = 0, n_utterances: int = 1) -> list[CheckResult]:
    """L_LLM + alpha L_ASR + beta L_RL on a micro-batch, from generated features."""
    from .speech_sim import CorpusConfig, generate_corpus
    from .trainer import TrainConfig, composed_loss, make_models

    corpus = generate_corpus(CorpusConfig(vocab_size=6, n_train=n_utterances, n_test=1, min_words=1, max_words=2), seed)
    asr, ger, tok = make_models(corpus, seed)
    cfg = TrainConfig(paper_mode=False, beam=3, seed=seed)
    asr.set_finetune_mode(ADAPTER_ONLY)
    ger.set_trainable_mask("adapter")
    rng = np.random.default_rng(seed)
    _randomise(asr.params, asr.group("adapter"), rng, scale=0.05)
    _randomise(ger.params, ["proj.audio.w"], rng)
    batch = corpus["train"].utterances[:n_utterances]
    with Graph():
        _, _, nbest = composed_loss(asr, ger, tok, batch, cfg)
    leaves = asr.params.trainable_params() + ger.params.trainable_params()

    def f():
        return composed_loss(asr, ger, tok, batch, cfg, nbest=nbest)[0]

    return [CheckResult("total", f"L_DenoisingGER ({n_utterances} utt)", grad_check_leaves(f, leaves, STEP, max_coords=4),
                        COMPONENT_TOL)]


CHECKS = {
    "ops": check_ops,
    "naae": check_naae,
    "hfcdf": check_hfcdf,
    "ger": check_ger,
    "mwer": check_mwer,
    "total": check_total,
}


def run_checks(only: Optional[Sequence[str]] = None, corrupt: Sequence[str] = (),
               seed: int = 0) -> list[CheckResult]:
    """Run the selected component checks; ``corrupt`` names ops whose backward is scaled (negative control)."""
    names = list(only) if only else list(COMPONENTS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}; expected {list(COMPONENTS)}")
    results = []
    with corrupt_backward(*corrupt):
        for n in names:
            results.extend(CHECKS[n](seed))
    return results
