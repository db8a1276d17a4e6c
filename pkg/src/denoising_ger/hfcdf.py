"""Heterogeneous feature compensation and dynamic fusion (HFCDF).

Acoustic and text embeddings of the 1-best hypothesis are first pulled
towards each other by their cross-modal difference, then weighted by how
similar each compensated stream is to a target transcription embedding, and
finally concatenated.

All functions accept either a single (C, D) sequence or a padded (B, C, D)
batch; batched calls take a (B, C) row mask so padding rows never contribute
to the similarity scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .nn import ParamSet, add_linear, linear

log = logging.getLogger(__name__)

HFCDF = "hfcdf"
LINGUISTIC_ONLY = "linguistic_only"
ACOUSTIC_ONLY = "acoustic_only"
ADD = "add"
CONCAT = "concat"
TRANSFORMER = "transformer"
BASELINE_MODES = (LINGUISTIC_ONLY, ACOUSTIC_ONLY, ADD, CONCAT, TRANSFORMER)
FUSION_MODES = (HFCDF,) + BASELINE_MODES


@dataclass
class FusionConfig:
    """Compensation strengths.

    In ``paper_mode`` both directions use the single ``k`` and the two
    compensated streams coincide; otherwise ``k_a`` and ``k_t`` are independent.
    """

    k: float = 0.7
    k_a: float = 0.7
    k_t: float = 0.3
    paper_mode: bool = True

    def __post_init__(self):
        for name in ("k", "k_a", "k_t"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def strengths(self) -> tuple[float, float]:
        return (self.k, self.k) if self.paper_mode else (self.k_a, self.k_t)


@dataclass
class FusedMultimodal:
    x_mmc: Tensor               # (C, 2D) or (B, C, 2D)
    y_context: Optional[Tensor]  # n-best context rows, carried through for the decoder
    mu: Tensor                  # scalar or (B,)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _truncate(op: str, *seqs: Tensor) -> list[Tensor]:
    n = min(s.shape[-2] for s in seqs)
    if any(s.shape[-2] != n for s in seqs):
        log.warning("%s: truncating sequences of lengths %s to %d", op,
                    [s.shape[-2] for s in seqs], n)
        seqs = [s if s.shape[-2] == n else s[..., :n, :] for s in seqs]
    return list(seqs)


def compensate(x_tok, y_tok, cfg: FusionConfig) -> tuple[Tensor, Tensor]:
    """x' = x + k_a (y - x);  y' = y + (1 - k_t)(x - y)."""
    x_tok, y_tok = _truncate("compensate", _as_t(x_tok), _as_t(y_tok))
    if x_tok.shape != y_tok.shape:
        raise ShapeError("compensate", x_tok.shape, y_tok.shape)
    k_a, k_t = cfg.strengths
    dx = ops.sub(x_tok, y_tok)
    dy = ops.sub(y_tok, x_tok)
    return ops.add(x_tok, ops.scale(dy, k_a)), ops.add(y_tok, ops.scale(dx, 1.0 - k_t))


def _row_mean(scores: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is None:
        return ops.mean(scores, axis=-1)
    counts = np.maximum(mask.sum(axis=-1), 1.0)
    return ops.sum(ops.mul(scores, mask / counts[..., None]), axis=-1)


def similarity_scores(x_c, y_c, target, mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """(R_a, R_t): mean row cosine of each stream with the target."""
    x_c, y_c, target = _truncate("dynamic_weight", _as_t(x_c), _as_t(y_c), _as_t(target))
    if mask is not None:
        mask = mask[..., :x_c.shape[-2]]
    if x_c.shape != y_c.shape or x_c.shape != target.shape:
        raise ShapeError("dynamic_weight", x_c.shape, y_c.shape, target.shape)
    zero_rows = (np.linalg.norm(x_c.data, axis=-1) == 0) | (np.linalg.norm(y_c.data, axis=-1) == 0) \
        | (np.linalg.norm(target.data, axis=-1) == 0)
    if mask is not None:
        zero_rows &= mask > 0
    if zero_rows.any():
        log.debug("dynamic_weight: %d zero-norm rows scored as cosine 0", int(zero_rows.sum()))
    r_a = _row_mean(ops.cosine_similarity(x_c, target), mask)
    r_t = _row_mean(ops.cosine_similarity(y_c, target), mask)
    return r_a, r_t


def dynamic_weight(x_c, y_c, target, mask: Optional[np.ndarray] = None) -> Tensor:
    """mu = e^R_a / (e^R_a + e^R_t), i.e. a two-way softmax written as a sigmoid."""
    r_a, r_t = similarity_scores(x_c, y_c, target, mask)
    return ops.sigmoid(ops.sub(r_a, r_t))


def fuse(x_c, y_top1, mu, y_context=None) -> FusedMultimodal:
    """x_mmc = concat(mu * x', (1 - mu) * y'_top1) row by row."""
    x_c, y_top1, mu = _as_t(x_c), _as_t(y_top1), _as_t(mu)
    if x_c.shape != y_top1.shape:
        raise ShapeError("fuse", x_c.shape, y_top1.shape)
    if np.any(mu.data <= 0.0) or np.any(mu.data >= 1.0):
        raise ValueError("mu must lie strictly inside (0, 1)")
    m = ops.reshape(mu, mu.shape + (1, 1))
    a = ops.mul(x_c, m)
    b = ops.mul(y_top1, ops.sub(1.0, m))
    return FusedMultimodal(ops.concat([a, b]), y_context, mu)


def add_mixer_params(params: ParamSet, rng, dim: int) -> None:
    """Parameters of the one-layer cross-attention ``transformer`` baseline."""
    add_linear(params, rng, "mixer.q", dim, dim, bias=False)
    add_linear(params, rng, "mixer.k", dim, dim, bias=False)
    add_linear(params, rng, "mixer.v", dim, dim, bias=False)
    add_linear(params, rng, "mixer.o", dim, dim, zero=True)


def _mixer(x_tok: Tensor, y_tok: Tensor, params: ParamSet, mask: Optional[np.ndarray]) -> Tensor:
    """Text rows attend over audio rows; residual on the text stream."""
    q = linear(y_tok, params, "mixer.q")
    k = linear(x_tok, params, "mixer.k")
    v = linear(x_tok, params, "mixer.v")
    scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ops.add(scores, np.where(mask[..., None, :] > 0, 0.0, ops.NEG_INF))
    ctx = ops.matmul(ops.softmax(scores), v)
    return ops.add(y_tok, linear(ctx, params, "mixer.o"))


def baseline_fusions(x_tok, y_tok, mode: str, params: Optional[ParamSet] = None,
                     mask: Optional[np.ndarray] = None) -> Tensor:
    """Decoder input for the non-HFCDF fusion baselines.

    linguistic_only -> y;  acoustic_only -> x;  add -> x + y;
    concat -> [x || y];  transformer -> y + CrossAttn(y, x) (needs ``params``).
    """
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {BASELINE_MODES}")
    x_tok, y_tok = _truncate(mode, _as_t(x_tok), _as_t(y_tok))
    if x_tok.shape != y_tok.shape:
        raise ShapeError(mode, x_tok.shape, y_tok.shape)
    if mode == LINGUISTIC_ONLY:
        return y_tok
    if mode == ACOUSTIC_ONLY:
        return x_tok
    if mode == ADD:
        return ops.add(x_tok, y_tok)
    if mode == CONCAT:
        return ops.concat([x_tok, y_tok])
    if params is None:
        raise ValueError("transformer fusion needs mixer parameters")
    return _mixer(x_tok, y_tok, params, mask)


def fusion_slots(x_tok: Tensor, y_tok: Tensor, mode: str, cfg: FusionConfig, target,
                 mask: Optional[np.ndarray] = None, params: Optional[ParamSet] = None,
                 fixed_mu: Optional[float] = None) -> tuple[Tensor, Optional[Tensor]]:
    """Fused prefix in a fixed (.., C, 2D) layout [acoustic slot || text slot], plus mu.

    HFCDF fills both slots; baselines producing one D-wide stream put it in the
    slot of its modality (text slot for mixed streams).
    """
    if mode == HFCDF:
        x_c, y_c = compensate(x_tok, y_tok, cfg)
        if fixed_mu is not None:
            lead = x_c.shape[:-2]
            mu = Tensor(np.full(lead, fixed_mu))
        else:
            mu = dynamic_weight(x_c, y_c, target, mask)
        return fuse(x_c, y_c, mu).x_mmc, mu
    out = baseline_fusions(x_tok, y_tok, mode, params, mask)
    if mode == CONCAT:
        return out, None
    zeros = Tensor(np.zeros(out.shape))
    if mode == ACOUSTIC_ONLY:
        return ops.concat([out, zeros]), None
    return ops.concat([zeros, out]), None
