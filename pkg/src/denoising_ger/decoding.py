"""Batched beam search over any autoregressive step function."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .hyp_text import BOS, EOS, PAD, UNK, Hypothesis, NBestList

# step(state, prev_tokens, t) -> (log_probs (R, V), new_state); state is a tuple of
# arrays whose leading dimension indexes the R = batch * beam rows.
StepFn = Callable[[tuple, np.ndarray, int], tuple]

BANNED = (PAD, BOS, UNK)


def _sort_key(h: Hypothesis):
    return (-h.log_score, tuple(h.tokens), len(h.tokens))


def beam_search(step: StepFn, state: tuple, batch: int, beam: int, max_len: Sequence[int] | int,
                banned: Sequence[int] = BANNED) -> list[NBestList]:
    """Shrinking-width beam search.

    Each utterance keeps ``beam - finished`` live prefixes; a prefix leaves the
    beam when it emits EOS.  ``state`` rows must already be laid out as
    ``batch * beam`` (row ``b * beam + k``).  Prefixes still alive at
    ``max_len`` are returned flagged ``truncated``.  With ``beam == 1`` this is
    exactly greedy decoding.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lens = np.full(batch, max_len) if np.isscalar(max_len) else np.asarray(max_len)
    k = beam
    scores = np.full((batch, k), -np.inf)
    scores[:, 0] = 0.0
    history = [[[] for _ in range(k)] for _ in range(batch)]
    finished: list[list[Hypothesis]] = [[] for _ in range(batch)]
    done = np.zeros(batch, dtype=bool)
    prev = np.full(batch * k, BOS, dtype=np.int64)
    t = 0
    while not done.all():
        logp, new_state = step(state, prev, t)
        v = logp.shape[-1]
        logp = logp.reshape(batch, k, v).copy()
        logp[:, :, list(banned)] = -np.inf
        cand = (scores[:, :, None] + logp).reshape(batch, k * v)
        order = np.argsort(-cand, axis=1, kind="stable")
        src_rows = np.arange(batch * k) // k * k  # default: first row of each utterance
        new_scores = np.full((batch, k), -np.inf)
        new_prev = np.full(batch * k, EOS, dtype=np.int64)
        new_history = [[[] for _ in range(k)] for _ in range(batch)]
        for b in range(batch):
            if done[b]:
                continue
            width = k - len(finished[b])
            slot = 0
            for flat in order[b, :width]:
                sc = cand[b, flat]
                if not np.isfinite(sc):
                    break
                src, tokid = divmod(int(flat), v)
                toks = history[b][src] + [tokid]
                if tokid == EOS:
                    finished[b].append(Hypothesis(toks[:-1], float(sc)))
                else:
                    new_scores[b, slot] = sc
                    new_history[b][slot] = toks
                    src_rows[b * k + slot] = b * k + src
                    new_prev[b * k + slot] = tokid
                    slot += 1
            if slot == 0:
                done[b] = True
            elif t + 1 >= lens[b]:
                for s in range(slot):
                    finished[b].append(Hypothesis(new_history[b][s], float(new_scores[b, s]), truncated=True))
                done[b] = True
                new_scores[b] = -np.inf
        state = tuple(np.take(arr, src_rows, axis=0) for arr in new_state)
        scores, prev, history = new_scores, new_prev, new_history
        t += 1
    return [NBestList(sorted(f, key=_sort_key)[:beam]) for f in finished]


def greedy(step: StepFn, state: tuple, batch: int, max_len: Sequence[int] | int,
           banned: Sequence[int] = BANNED) -> list[NBestList]:
    return beam_search(step, state, batch, 1, max_len, banned)
