"""Tokenisation, n-best lists, error-rate scoring and frame/character alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class Tokenizer:
    """Character tokenizer with an explicit space symbol."""

    def __init__(self, characters: Iterable[str]):
        chars = list(dict.fromkeys(characters))
        if any(len(c) != 1 for c in chars):
            raise ValueError("characters must be single symbols")
        self.id_to_char = list(SPECIALS) + chars
        self.char_to_id = {c: i + len(SPECIALS) for i, c in enumerate(chars)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Tokenizer":
        return cls(sorted(set("".join(words)) | {" "}))

    def __len__(self) -> int:
        return len(self.id_to_char)

    @property
    def characters(self) -> list[str]:
        return self.id_to_char[len(SPECIALS):]

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = [self.char_to_id.get(c, UNK) for c in text]
        return ([BOS] if bos else []) + ids + ([EOS] if eos else [])

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append("?" if i == UNK else self.id_to_char[i])
        return "".join(out)


def strip_specials(ids: Sequence[int]) -> list[int]:
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(int(i))
    return out


@dataclass
class Hypothesis:
    tokens: list[int]
    log_score: float
    truncated: bool = False


@dataclass
class NBestList:
    """Hypotheses sorted by descending log score.  Token lists exclude BOS/EOS."""

    hypotheses: list[Hypothesis] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.hypotheses)

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __getitem__(self, i) -> Hypothesis:
        return self.hypotheses[i]

    def top1(self) -> Hypothesis:
        return self.hypotheses[0]

    def texts(self, tok: Tokenizer) -> list[str]:
        return [tok.decode(h.tokens) for h in self.hypotheses]

    def to_records(self, utt_id: str, tok: Tokenizer) -> list[dict]:
        return [{"id": utt_id, "rank": r, "text": tok.decode(h.tokens), "log_score": h.log_score}
                for r, h in enumerate(self.hypotheses)]

    @classmethod
    def from_records(cls, records: Sequence[dict], tok: Tokenizer) -> "NBestList":
        recs = sorted(records, key=lambda r: r["rank"])
        return cls([Hypothesis(tok.encode(r["text"]), float(r["log_score"])) for r in recs])


def write_nbest_jsonl(path, items: Iterable[tuple[str, NBestList]], tok: Tokenizer) -> None:
    with open(path, "w") as fh:
        for utt_id, nb in items:
            for rec in nb.to_records(utt_id, tok):
                fh.write(json.dumps(rec) + "\n")


def read_nbest_jsonl(path, tok: Tokenizer) -> list[tuple[str, NBestList]]:
    grouped: dict[str, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                grouped.setdefault(rec["id"], []).append(rec)
    return [(k, NBestList.from_records(v, tok)) for k, v in grouped.items()]


# --------------------------------------------------------------------- scoring

@dataclass
class EditAlignment:
    substitutions: int
    insertions: int
    deletions: int
    hits: int
    pairs: list[tuple[Optional[str], Optional[str]]]

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def normalize(text) -> list[str]:
    if isinstance(text, str):
        return text.casefold().split()
    return [w.casefold() for w in text]


def align(reference, hypothesis) -> EditAlignment:
    """Minimal Levenshtein alignment over words with unit costs."""
    ref, hyp = normalize(reference), normalize(hypothesis)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ri != hyp[j - 1])
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)
    s = ins = dels = hits = 0
    pairs = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                hits += 1
            else:
                s += 1
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            pairs.append((ref[i - 1], None))
            i -= 1
        else:
            ins += 1
            pairs.append((None, hyp[j - 1]))
            j -= 1
    pairs.reverse()
    return EditAlignment(s, ins, dels, hits, pairs)


def wer(reference, hypothesis) -> float:
    """Word error rate (S + I + D) / |reference|; may exceed 1."""
    ref = normalize(reference)
    if not ref:
        raise ValueError("reference must contain at least one word")
    return align(ref, hypothesis).errors / len(ref)


def cer(reference: str, hypothesis: str) -> float:
    ref = list(reference)
    if not ref:
        raise ValueError("reference must be non-empty")
    return align(ref, list(hypothesis)).errors / len(ref)


def pooled_wer(pairs: Iterable[tuple[str, str]]) -> float:
    edits = words = 0
    for ref, hyp in pairs:
        r = normalize(ref)
        edits += align(r, hyp).errors
        words += len(r)
    if words == 0:
        raise ValueError("no reference words")
    return edits / words


# ------------------------------------------------------------------ embeddings

def embed_text(tok: Tokenizer, table: Tensor, tokens: Sequence[int]) -> Tensor:
    """Look up rows of ``table`` (|V| x D) for ``tokens``; empty input gives 0 x D."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if table.shape[0] != len(tok):
        raise ValueError(f"embedding table has {table.shape[0]} rows, tokenizer has {len(tok)}")
    if ids.size == 0:
        return Tensor(np.zeros((0, table.shape[1])))
    if ids.min() < 0 or ids.max() >= len(tok):
        raise ValueError("token id out of range")
    return ops.embedding(table, ids)


def pooling_plan(n_frames: int, char_count: int) -> np.ndarray:
    """(char_count, n_frames) matrix mean-pooling contiguous frame segments.

    When there are fewer frames than characters the last frame is repeated,
    so every character still gets exactly one frame.
    """
    if char_count < 1 or n_frames < 1:
        raise ValueError("need at least one frame and one character")
    if char_count <= n_frames:
        return ops.segment_pool_matrix(n_frames, char_count)
    m = np.zeros((char_count, n_frames))
    for i in range(char_count):
        m[i, min(i, n_frames - 1)] = 1.0
    return m


def align_frames_to_chars(x_audio: Tensor, char_count: int, proj_w: Tensor,
                          proj_b: Optional[Tensor] = None) -> Tensor:
    """Mean-pool T' frames into ``char_count`` segments, then project to the text width."""
    pooled = ops.mean_pool_segments(x_audio, pooling_plan(x_audio.shape[0], char_count))
    out = ops.matmul(pooled, proj_w)
    return out if proj_b is None else ops.add(out, proj_b)
