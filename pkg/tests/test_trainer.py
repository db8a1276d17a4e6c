import json
import time
from dataclasses import replace

import numpy as np
import pytest

from denoising_ger import checkpoint, hfcdf
from denoising_ger import speech_sim as ss
from denoising_ger.autodiff import Tensor
from denoising_ger.trainer import (
    TrainConfig,
    TrainReport,
    initial_models,
    load_trained,
    total_loss,
    train,
)

# pretraining shrunk so each test runs in seconds
TINY = TrainConfig(beam=3, epochs=1, warmup_steps=5, asr_pretrain_utterances=40, asr_pretrain_epochs=1,
                   llm_pretrain_steps=20, llm_pretrain_batch=4)


@pytest.fixture(scope="module")
def corpus():
    return ss.generate_corpus(ss.CorpusConfig(n_train=8, n_test=4, max_words=3), seed=5)


def params_of(ckpt):
    return {k: v for k, v in checkpoint.load(ckpt).items() if k.startswith(("asr.", "ger."))}


# ------------------------------------------------------------ loss algebra

def test_zero_weights_leave_llm_loss():
    cfg = TrainConfig(alpha=0.0, beta=0.0)
    assert total_loss(Tensor(1.3), Tensor(9.0), Tensor(-4.0), cfg).item() == 1.3


def test_weighted_sum_hand_case():
    assert total_loss(1.0, 0.5, 0.1, TrainConfig(alpha=0.2, beta=0.2)).item() == pytest.approx(1.12, abs=1e-12)


def test_disabled_terms_contribute_nothing():
    assert total_loss(1.0, None, None, TrainConfig()).item() == 1.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        total_loss(1.0, 0.5, 0.1, replace(TrainConfig(), beta=-1.0))


@pytest.mark.parametrize("bad", [{"beam": 0}, {"epochs": 0}, {"batch_size": 0}, {"eval_every": -1},
                                 {"asr_mode": "partial"}, {"fusion_mode": "gated"}, {"rl_scores": "lm"},
                                 {"schedule": "alternating"}, {"lam": 2.0}, {"k": 1.5}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_round_trip():
    cfg = TrainConfig(alpha=0.3, hfcdf_on=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"gamma": 1.0})


def test_component_toggles_map_to_modes():
    assert TrainConfig(naae_on=False).effective_asr_mode == "frozen"
    assert TrainConfig().effective_asr_mode == "adapter_only"
    assert TrainConfig(asr_mode="full_ft").effective_asr_mode == "full_ft"
    assert TrainConfig(hfcdf_on=False).effective_fusion_mode == hfcdf.LINGUISTIC_ONLY
    assert TrainConfig(mu_inference="fixed").fusion(training=False).fixed_mu == 0.5
    assert TrainConfig(mu_inference="fixed").fusion(training=True).fixed_mu is None


# --------------------------------------------------------------- training

def test_zero_learning_rate_keeps_parameters(corpus, tmp_path):
    cfg = replace(TINY, lr=0.0)
    train(corpus, cfg, tmp_path)
    asr, ger, _ = initial_models(corpus, cfg)
    start = {**asr.params.state(), **ger.params.state()}
    end = params_of(tmp_path / "model.ckpt")
    assert start.keys() == end.keys()
    for k in start:
        np.testing.assert_array_equal(start[k], end[k])


def test_one_epoch_on_eight_utterances_is_fast(corpus):
    initial_models(corpus, TINY)  # pretraining happens outside the timed region
    t0 = time.perf_counter()
    report, _, _ = train(corpus, replace(TINY, eval_limit=1))
    assert time.perf_counter() - t0 < 60
    assert len(report.steps) == 1


def test_all_components_off_matches_plain_baseline(corpus, tmp_path):
    off = replace(TINY, naae_on=False, hfcdf_on=False, rl_on=False)
    plain = replace(TINY, asr_mode="frozen", fusion_mode=hfcdf.LINGUISTIC_ONLY, beta=0.0)
    r_off, _, _ = train(corpus, off, tmp_path / "off")
    r_plain, _, _ = train(corpus, plain, tmp_path / "plain")
    a, b = params_of(tmp_path / "off" / "model.ckpt"), params_of(tmp_path / "plain" / "model.ckpt")
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert r_off.epochs[-1].wer == r_plain.epochs[-1].wer


def test_naae_off_keeps_recogniser_constant(corpus, tmp_path):
    cfg = replace(TINY, naae_on=False)
    train(corpus, cfg, tmp_path)
    asr, ger, _ = initial_models(corpus, cfg)
    end = params_of(tmp_path / "model.ckpt")
    for k, v in asr.params.state().items():
        np.testing.assert_array_equal(v, end[k])
    for name in ger.body_names():
        np.testing.assert_array_equal(ger.params.state()["ger." + name], end["ger." + name])


def test_rl_off_gives_zero_rl_column(corpus):
    report, _, _ = train(corpus, replace(TINY, rl_on=False, eval_limit=1))
    assert all(s.rl == 0.0 for s in report.steps)
    assert report.epochs[-1].losses.rl == 0.0


def test_losses_recompose(corpus):
    report, _, _ = train(corpus, replace(TINY, eval_limit=1))
    for s in report.steps:
        assert s.total == pytest.approx(s.recomputed(), abs=1e-12)


def test_resume_matches_straight_run(corpus, tmp_path):
    cfg = replace(TINY, epochs=2)
    straight, _, _ = train(corpus, cfg, tmp_path / "a")
    train(corpus, cfg, tmp_path / "b", stop_after_epoch=1)
    resumed, _, _ = train(corpus, cfg, tmp_path / "b", resume=True)
    for split in straight.epochs[-1].wer:
        assert abs(straight.wer(split) - resumed.wer(split)) <= 0.005
    a, b = params_of(tmp_path / "a" / "model.ckpt"), params_of(tmp_path / "b" / "model.ckpt")
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_resume_without_checkpoint_fails(corpus, tmp_path):
    with pytest.raises(FileNotFoundError):
        train(corpus, TINY, tmp_path, resume=True)


def test_eval_every_skips_intermediate_epochs(corpus):
    report, _, _ = train(corpus, replace(TINY, epochs=3, eval_every=0, eval_limit=1))
    assert [e.wer is None for e in report.epochs] == [False, True, True, False]
    assert "(not evaluated)" in report.table()


def test_report_round_trip(corpus, tmp_path):
    report, _, _ = train(corpus, replace(TINY, eval_limit=2), tmp_path)
    back = TrainReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    assert back.to_dict() == report.to_dict()
    assert back.table() == report.table()


def test_checkpoint_reloads_to_same_models(corpus, tmp_path):
    cfg = replace(TINY, eval_limit=1)
    _, asr, ger = train(corpus, cfg, tmp_path)
    cfg2, asr2, ger2, _, _ = load_trained(tmp_path / "model.ckpt", corpus)
    assert cfg2 == cfg
    for a, b in ((asr, asr2), (ger, ger2)):
        for k, v in a.params.state().items():
            np.testing.assert_array_equal(v, b.params.state()[k])


def test_load_without_corpus_rebuilds_vocabulary(corpus, tmp_path):
    train(corpus, replace(TINY, eval_limit=1), tmp_path)
    _, _, _, tok, rebuilt = load_trained(tmp_path / "model.ckpt")
    assert rebuilt.vocab.words == corpus.vocab.words
    assert tok.characters == corpus.vocab.characters


def test_load_rejects_mismatched_corpus(corpus, tmp_path):
    train(corpus, replace(TINY, eval_limit=1), tmp_path)
    other = ss.generate_corpus(ss.CorpusConfig(n_train=8, n_test=4, vocab_size=12), seed=5)
    with pytest.raises(ValueError):
        load_trained(tmp_path / "model.ckpt", other)


def test_empty_training_split_rejected():
    empty = ss.Corpus(ss.CorpusConfig(), 1, ss.Vocabulary.build(ss.WORD_LIST[:20], 1))
    with pytest.raises(ValueError):
        train(empty, TINY)
