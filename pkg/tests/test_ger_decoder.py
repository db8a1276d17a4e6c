import itertools
import math
import os
from pathlib import Path

import numpy as np
import pytest

from denoising_ger import hfcdf
from denoising_ger.autodiff import Graph, Tensor, grad_check_leaves, no_grad, ops
from denoising_ger.ger_decoder import (
    FusionSettings,
    GerConfig,
    GerInput,
    GerModel,
    IncrementalDecoder,
    ger_forward,
    generate,
    llm_loss,
    score_hypothesis,
    sequence_log_probs,
)
from denoising_ger.hyp_text import BOS, EOS
from denoising_ger.nn import Adam

V = 9
CFG = GerConfig(vocab_size=V, d_audio=6, d_llm=8, d_model=16, n_heads=2, n_layers=2, d_ff=24)
NBEST = [[[4, 5, 6], [4, 6]], [[7, 5], [7, 5, 8]]]


def model(seed=0, mask="adapter"):
    return GerModel(CFG, seed=seed, trainable_mask=mask)


def inputs(seed=0):
    rng = np.random.default_rng(seed)
    return GerInput(Tensor(rng.normal(size=(2, 10, CFG.d_audio))), np.array([10, 7]), NBEST)


def prefix_of(m, inp=None, mode=hfcdf.HFCDF):
    return m.prefix(inp or inputs(), FusionSettings(mode))


def test_untrained_head_is_near_uniform():
    m = GerModel(GerConfig(vocab_size=24), seed=0)
    memory = Tensor(np.zeros((1, 3, m.cfg.d_model)))
    logits = m.decoder_logits(np.array([[BOS]]), memory, np.zeros((1, 3))).data[0, 0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    entropy = -(p * np.log(p)).sum()
    assert entropy == pytest.approx(math.log(24), rel=0.01)


def test_teacher_forced_total_equals_score():
    m = model()
    pre = prefix_of(m)
    outs, _ = ger_forward(m, pre, inputs(), teacher=[[4, 5], [8, 8, 7]])
    for row, seq in enumerate([[4, 5], [8, 8, 7]]):
        assert outs[row].total_log_prob == pytest.approx(score_hypothesis(m, pre, seq, row), abs=1e-12)
        assert outs[row].tokens[-1] == EOS


def test_score_is_sum_of_stepwise_log_probs():
    m = model()
    pre = prefix_of(m)
    total, steps = sequence_log_probs(m, pre, [[4, 6, 5]], np.array([0]))
    manual = 0.0
    seq = [4, 6, 5, EOS]
    for t in range(len(seq)):
        prev = np.array([[BOS] + seq[:t]])
        logits = m.decoder_logits(prev, pre.memory, pre.bias, np.array([0])).data[0, -1]
        manual += logits[seq[t]] - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
    assert total.data[0] == pytest.approx(manual, abs=1e-10)
    assert steps[0].sum() == pytest.approx(manual, abs=1e-10)


def test_decoder_is_causal():
    m = model()
    pre = prefix_of(m)
    a = m.decoder_logits(np.array([[BOS, 4, 5, 6]]), pre.memory, pre.bias, np.array([0])).data
    b = m.decoder_logits(np.array([[BOS, 4, 8, 8]]), pre.memory, pre.bias, np.array([0])).data
    np.testing.assert_allclose(a[0, :2], b[0, :2], atol=1e-12)


def test_loss_zero_for_a_perfect_model(monkeypatch):
    m = model()
    targets = [[4, 5], [6]]

    def confident(prev, memory, bias, rows=None):
        out = np.full(prev.shape + (V,), -1e4)
        for r, seq in enumerate(targets):
            for t, tok in enumerate(seq + [EOS]):
                out[r, t, tok] = 0.0
        return Tensor(out)

    monkeypatch.setattr(m, "decoder_logits", confident)
    assert llm_loss(m, prefix_of(m), targets).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_is_log_vocab_for_a_uniform_model():
    m = model()
    m.params["head.w"].data[:] = 0.0
    m.params["head.b"].data[:] = 0.0
    assert llm_loss(m, prefix_of(m), [[4, 5], [6, 7, 8]]).item() == pytest.approx(math.log(V), abs=1e-12)


def test_empty_targets_rejected():
    m = model()
    with pytest.raises(ValueError):
        llm_loss(m, prefix_of(m), [[4], []])
    with pytest.raises(ValueError):
        score_hypothesis(m, prefix_of(m), [])


def test_llm_loss_gradient():
    m = model(mask="full")
    rng = np.random.default_rng(1)
    # move every parameter off zero so no ReLU sits on its kink
    for _, p in m.params.items():
        p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    inp, targets = inputs(), [[4, 5, 6, 7], [7, 5]]
    fusion = FusionSettings(hfcdf.HFCDF, hfcdf.FusionConfig(paper_mode=False))
    err = grad_check_leaves(lambda: llm_loss(m, m.prefix(inp, fusion, targets), targets),
                            m.params.trainable_params(), max_coords=4)
    assert err < 1e-3


def test_ranking_matches_enumeration():
    """Two letters, length <= 2: score every sequence, then rank five of them."""
    m = model(seed=3)
    rng = np.random.default_rng(3)
    m.params["head.w"].data = rng.normal(size=m.params["head.w"].shape)
    pre = prefix_of(m)
    seqs = [list(s) for n in (1, 2) for s in itertools.product([4, 5], repeat=n)]

    def stepwise_prob(seq):
        p = 1.0
        full = seq + [EOS]
        for t in range(len(full)):
            z = m.decoder_logits(np.array([[BOS] + full[:t]]), pre.memory, pre.bias, np.array([0])).data[0, -1]
            e = np.exp(z - z.max())
            p *= e[full[t]] / e.sum()
        return p

    picked = seqs[:5]
    by_score = sorted(range(5), key=lambda i: -score_hypothesis(m, pre, picked[i]))
    by_prob = sorted(range(5), key=lambda i: -stepwise_prob(picked[i]))
    assert by_score == by_prob


def test_incremental_decoder_matches_teacher_forcing():
    m = model(seed=2)
    pre = prefix_of(m)
    seq = [4, 6, 5, 7]
    rows = np.array([1])
    dec = IncrementalDecoder(m, pre.memory.data, pre.bias, rows)
    state = dec.init_state(1)
    full = m.decoder_logits(np.array([[BOS] + seq]), pre.memory, pre.bias, rows)
    ref = ops.log_softmax(full).data[0]
    prev = BOS
    for t in range(len(seq) + 1):
        lp, state = dec.step(state, np.array([prev]), t)
        np.testing.assert_allclose(lp[0], ref[t], atol=1e-10)
        if t < len(seq):
            prev = seq[t]


def test_greedy_output_scores_consistently():
    m = model(seed=4)
    pre = prefix_of(m)
    outs, logits = ger_forward(m, pre, inputs())
    assert logits is None
    for row, o in enumerate(outs):
        assert sum(o.stepwise_log_probs) == pytest.approx(o.total_log_prob)
        if o.tokens[:-1] and not o.truncated:
            assert o.total_log_prob == pytest.approx(score_hypothesis(m, pre, o.tokens[:-1], row), abs=1e-9)


def test_beam_top_is_at_least_greedy():
    m = model(seed=5)
    inp = inputs()
    pre = prefix_of(m, inp)
    greedy = generate(m, pre, inp, beam=1)
    wide = generate(m, pre, inp, beam=4)
    for g, w in zip(greedy, wide):
        assert w.top1().log_score >= g.top1().log_score - 1e-9


def test_zero_audio_projection_hides_audio():
    m = model()
    a = prefix_of(m, inputs(0)).memory.data
    b = prefix_of(m, inputs(1)).memory.data
    np.testing.assert_array_equal(a, b)


def test_linguistic_only_ignores_audio_even_when_projected():
    m = model()
    m.params["proj.audio.w"].data[:] = 1.0
    a = prefix_of(m, inputs(0), hfcdf.LINGUISTIC_ONLY).memory.data
    b = prefix_of(m, inputs(1), hfcdf.LINGUISTIC_ONLY).memory.data
    np.testing.assert_array_equal(a, b)
    c = prefix_of(m, inputs(1)).memory.data
    assert np.abs(b - c).max() > 0


def test_masks_select_parameter_groups():
    full = model(mask="full").params.count(trainable_only=True)
    adapter = model(mask="adapter").params.count(trainable_only=True)
    projector = model(mask="projector").params.count(trainable_only=True)
    assert projector < adapter < full
    with pytest.raises(ValueError):
        model(mask="everything")


def test_adapter_step_leaves_body_untouched():
    m = model()
    m.params["proj.audio.w"].data[:] = 0.1
    before = m.params.state()
    inp, targets = inputs(), [[4, 5], [6]]
    with Graph() as g:
        loss = llm_loss(m, prefix_of(m, inp), targets)
    Adam(m.params.trainable_params(), lr=1e-2).step(g.backward(loss))
    after = m.params.state()
    for name in m.body_names():
        np.testing.assert_array_equal(after["ger." + name], before["ger." + name])
    assert not np.array_equal(after["ger.head.w"], before["ger.head.w"])


def test_mean_nbest_target_used_without_references():
    m = model()
    pre = m.prefix(inputs(), FusionSettings(hfcdf.HFCDF, hfcdf.FusionConfig(paper_mode=False)))
    assert pre.mu.shape == (2,)
    assert np.all((pre.mu.data > 0) & (pre.mu.data < 1))


# ------------------------------------------------------ desk-trained model

@pytest.mark.slow
def test_near_miss_corrections_with_clean_context():
    """One-character slip in the 1-best, the other hypotheses clean."""
    from denoising_ger import speech_sim as ss
    from denoising_ger.trainer import TrainConfig, make_models, pretrain_llm

    cache = os.environ.get("DENOISING_GER_CACHE")
    corpus = ss.generate_corpus(ss.CorpusConfig(), seed=1)
    _, ger, tok = make_models(corpus, 1)
    ger.params.load_state(pretrain_llm(corpus, TrainConfig(seed=1), Path(cache) if cache else None))

    rng = np.random.default_rng(0)
    letters = [c for c in tok.characters if c != " "]
    cases = []
    for u in corpus["test_in_domain"]:
        words = u.text.split()
        i = rng.integers(len(words))
        j = rng.integers(len(words[i]))
        c = rng.choice([x for x in letters if x != words[i][j]])
        words[i] = words[i][:j] + c + words[i][j + 1:]
        cases.append((" ".join(words), u.text))
    hyps = [[tok.encode(h) for h in (bad, ref, ref)] for bad, ref in cases]
    with no_grad():
        inp = GerInput(Tensor(np.zeros((len(hyps), 1, ger.cfg.d_audio))), np.ones(len(hyps), dtype=int), hyps)
        outs = generate(ger, ger.prefix(inp, FusionSettings(hfcdf.LINGUISTIC_ONLY)), inp)
    hits = sum(tok.decode(o.top1().tokens) == ref for o, (_, ref) in zip(outs, cases))
    assert hits / len(cases) >= 0.9
