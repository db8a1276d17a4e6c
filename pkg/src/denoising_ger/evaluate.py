"""Baseline-vs-corrected WER evaluation and error-case records."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .ger_decoder import FusionSettings, GerInput, GerModel, generate
from .hyp_text import NBestList, Tokenizer, pooled_wer, wer
from .naae_asr import NaaeModel, batch_features
from .speech_sim import Utterance

EVAL_SPLITS = ("test_in_domain", "test_out_of_domain", "test_clean")


@dataclass
class CaseRecord:
    id: str
    reference: str
    one_best: str
    corrected: str
    wer_before: float
    wer_after: float

    @classmethod
    def build(cls, utt_id: str, reference: str, one_best: str, corrected: str) -> "CaseRecord":
        return cls(utt_id, reference, one_best, corrected, wer(reference, one_best), wer(reference, corrected))

    def check(self) -> bool:
        """Stored WERs agree with the stored strings."""
        return (wer(self.reference, self.one_best) == self.wer_before
                and wer(self.reference, self.corrected) == self.wer_after)


@dataclass
class SplitScores:
    baseline_pooled: float
    corrected_pooled: float
    baseline_mean: float
    corrected_mean: float
    n_utterances: int

    @property
    def delta(self) -> float:
        return self.corrected_pooled - self.baseline_pooled


def score_cases(cases: Sequence[CaseRecord]) -> SplitScores:
    if not cases:
        raise ValueError("no cases to score")
    return SplitScores(
        baseline_pooled=pooled_wer((c.reference, c.one_best) for c in cases),
        corrected_pooled=pooled_wer((c.reference, c.corrected) for c in cases),
        baseline_mean=float(np.mean([c.wer_before for c in cases])),
        corrected_mean=float(np.mean([c.wer_after for c in cases])),
        n_utterances=len(cases),
    )


@dataclass
class EvalReport:
    """Per-split scores, a pure aggregation of ``cases``."""

    cases: dict[str, list[CaseRecord]] = field(default_factory=dict)

    @property
    def splits(self) -> dict[str, SplitScores]:
        return {name: score_cases(c) for name, c in self.cases.items()}

    def deltas(self) -> dict[str, float]:
        return {name: s.delta for name, s in self.splits.items()}

    def worst_to_best(self, split: str) -> list[CaseRecord]:
        """Cases sorted by (baseline WER - corrected WER), most improved first."""
        return sorted(self.cases[split], key=lambda c: (-(c.wer_before - c.wer_after), c.id))

    def to_dict(self) -> dict:
        return {
            "splits": {n: {**asdict(s), "delta": s.delta} for n, s in self.splits.items()},
            "cases": {n: [asdict(c) for c in cs] for n, cs in self.cases.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls({n: [CaseRecord(**c) for c in cs] for n, cs in d["cases"].items()})

    def table(self) -> str:
        rows = [f"{'split':<22}{'ASR 1-best':>12}{'GER':>10}{'delta':>10}"]
        for name, s in self.splits.items():
            rows.append(f"{name:<22}{100 * s.baseline_pooled:>11.2f}%{100 * s.corrected_pooled:>9.2f}%"
                        f"{100 * s.delta:>+9.2f}%")
        return "\n".join(rows)


def recognise(asr: NaaeModel, frames: Sequence[np.ndarray], beam: int):
    """Adapted encoder states, lengths and n-best lists for a list of feature matrices."""
    with no_grad():
        fb = batch_features(list(frames))
        x_audio = asr.encode(asr.adapt(fb), fb.lengths)
        nbest = asr.decode_nbest(x_audio, fb.lengths, beam)
    return x_audio, fb.lengths, nbest


def correct_nbest(ger: GerModel, fusion: FusionSettings, x_audio: Tensor, lengths: np.ndarray,
                  nbest: Sequence[NBestList]) -> list[list[int]]:
    with no_grad():
        inp = GerInput(x_audio, lengths, [[h.tokens for h in nb] for nb in nbest])
        prefix = ger.prefix(inp, fusion)
        return [nb.top1().tokens for nb in generate(ger, prefix, inp, beam=1)]


def evaluate_split(asr: NaaeModel, ger: GerModel, fusion: FusionSettings, tok: Tokenizer,
                   utterances: Sequence[Utterance], beam: int, batch_size: int = 50,
                   noisy: bool = True) -> list[CaseRecord]:
    cases = []
    for i in range(0, len(utterances), batch_size):
        chunk = utterances[i:i + batch_size]
        frames = [u.noisy_frames if noisy else u.clean_frames for u in chunk]
        x_audio, lengths, nbest = recognise(asr, frames, beam)
        corrected = correct_nbest(ger, fusion, x_audio, lengths, nbest)
        for u, nb, c in zip(chunk, nbest, corrected):
            cases.append(CaseRecord.build(u.id, u.text, tok.decode(nb.top1().tokens), tok.decode(c)))
    return cases


def evaluate(asr: NaaeModel, ger: GerModel, fusion: FusionSettings, tok: Tokenizer, corpus,
             beam: int, splits: Sequence[str] = EVAL_SPLITS, limit: Optional[int] = None) -> EvalReport:
    report = EvalReport()
    for name in splits:
        utts = corpus[name].utterances[:limit] if limit else corpus[name].utterances
        report.cases[name] = evaluate_split(asr, ger, fusion, tok, utts, beam)
    return report
