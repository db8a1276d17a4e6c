"""Command-line front end: gen, train, eval, ablate, correct, gradcheck.

Exit codes are 0 on success, 1 on runtime errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import diagnostics, hfcdf, speech_sim
from .autodiff import Tensor, no_grad
from .config import ConfigError, load_config
from .evaluate import EVAL_SPLITS, evaluate, recognise
from .ger_decoder import FusionSettings, GerInput, generate

log = logging.getLogger("denoising_ger")


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma separated integers, got {text!r}") from None


def _corpus(path) -> speech_sim.Corpus:
    return speech_sim.read_corpus(path)


def _cases_text(report, per_split: int) -> str:
    blocks = []
    for split in report.cases:
        blocks.append(f"== {split}")
        for c in report.worst_to_best(split)[:per_split or None]:
            blocks.append(f"{c.id}  {100 * c.wer_before:6.2f}% -> {100 * c.wer_after:6.2f}%\n"
                          f"  ref : {c.reference}\n  1best: {c.one_best}\n  ger : {c.corrected}")
    return "\n".join(blocks) + "\n"


# ------------------------------------------------------------ subcommands

def cmd_gen(args) -> int:
    cfg = speech_sim.CorpusConfig(vocab_size=args.vocab_size, n_train=args.n_train, n_test=args.n_test,
                                  min_words=args.min_words, max_words=args.max_words)
    corpus = speech_sim.generate_corpus(cfg, seed=args.seed)
    speech_sim.write_corpus(corpus, _out_dir(args))
    print(f"wrote corpus (seed {args.seed}) to {args.out}: "
          + ", ".join(f"{n} {len(s)}" for n, s in corpus.splits.items()))
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = load_config(args.config, args.set)
    corpus = _corpus(args.corpus)
    out = _out_dir(args)
    report, _, _ = train(corpus, cfg, out_dir=out, resume=args.resume,
                         cache_dir=Path(args.cache_dir) if args.cache_dir else None)
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_eval(args) -> int:
    from .trainer import load_trained

    corpus = _corpus(args.corpus)
    cfg, asr, ger, tok, corpus = load_trained(args.checkpoint, corpus)
    beam = args.beam or cfg.beam
    report = evaluate(asr, ger, cfg.fusion(training=False), tok, corpus, beam, EVAL_SPLITS, args.limit or None)
    out = _out_dir(args)
    _write_json(out / "eval.json", report.to_dict())
    table = report.table()
    (out / "eval.txt").write_text(table + "\n")
    (out / "cases.txt").write_text(_cases_text(report, args.cases))
    print(table)
    return 0


def cmd_ablate(args) -> int:
    from .trainer import ABLATION_ROWS, ablation_matrix, ablation_table, trainable_counts

    cfg = load_config(args.config, args.set)
    corpus = _corpus(args.corpus)
    out = _out_dir(args)
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    seeds = _seeds(args.seeds)
    if args.table == "fusion":
        return _ablate_fusion(args, cfg, corpus, out, runs, seeds)

    def on_run(row, seed, report):
        tag = "-".join("on" if x else "off" for x in row)
        _write_json(runs / f"naae-hfcdf-rl_{tag}_seed{seed}.json", report.to_dict())
        log.info("finished row %s seed %d", tag, seed)

    rows = ablation_matrix(corpus, cfg, seeds, ABLATION_ROWS,
                           cache_dir=Path(args.cache_dir) if args.cache_dir else None, on_run=on_run)
    by_key = {(r.naae, r.hfcdf, r.rl): r for r in rows}
    frozen, naae = by_key[(False, True, True)], by_key[(True, True, True)]
    comparison = {
        "in_domain_wer": {"frozen": frozen.wer["test_in_domain"], "adapter_only": naae.wer["test_in_domain"]},
        "asr_trainable_params": trainable_counts(corpus, seeds[0]),
        "step0_equal": all(frozen.initial[s] == naae.initial[s] for s in seeds),
    }
    _write_json(out / "ablation.json", {"seeds": seeds, "rows": [asdict(r) for r in rows],
                                        "finetune_comparison": comparison})
    table = ablation_table(rows)
    counts = comparison["asr_trainable_params"]
    table += ("\n\nencoder fine-tuning (in-domain WER): frozen "
              f"{100 * comparison['in_domain_wer']['frozen']:.2f}%, adapter_only "
              f"{100 * comparison['in_domain_wer']['adapter_only']:.2f}%\ntrainable recogniser parameters: "
              + ", ".join(f"{k} {v}" for k, v in counts.items()))
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def _ablate_fusion(args, cfg, corpus, out: Path, runs: Path, seeds) -> int:
    from .trainer import fusion_matrix, fusion_table

    def on_run(mode, seed, report):
        _write_json(runs / f"fusion_{mode}_seed{seed}.json", report.to_dict())
        log.info("finished fusion mode %s seed %d", mode, seed)

    results = fusion_matrix(corpus, cfg, seeds, cache_dir=Path(args.cache_dir) if args.cache_dir else None,
                            on_run=on_run)
    _write_json(out / "fusion.json", {"seeds": seeds, "modes": results})
    table = fusion_table(results)
    (out / "fusion.txt").write_text(table + "\n")
    print(table)
    return 0


def _read_nbest_lines(path) -> list[list[str]]:
    text = sys.stdin.read() if path in (None, "-") else Path(path).read_text()
    lists = [[h.strip() for h in line.split("|")] for line in text.splitlines() if line.strip()]
    if not lists:
        raise UsageError("no n-best lists given")
    return lists


def cmd_correct(args) -> int:
    """Correct one corpus utterance end to end, or text-only n-best lists ("a | b | c" per line)."""
    from .trainer import load_trained

    corpus = _corpus(args.corpus_dir) if args.corpus_dir else None
    cfg, asr, ger, tok, corpus = load_trained(args.checkpoint, corpus)
    records = []
    if args.utt:
        if not args.corpus_dir:
            raise UsageError("--utt needs --corpus-dir")
        found = {u.id: u for split in corpus.splits.values() for u in split}
        missing = [i for i in args.utt if i not in found]
        if missing:
            raise KeyError(f"unknown utterance ids: {missing}")
        utts = [found[i] for i in args.utt]
        x_audio, lengths, nbest = recognise(asr, [u.noisy_frames for u in utts], cfg.beam)
        with no_grad():
            inp = GerInput(x_audio, lengths, [[h.tokens for h in nb] for nb in nbest])
            outs = generate(ger, ger.prefix(inp, cfg.fusion(training=False)), inp, beam=1)
        for u, nb, o in zip(utts, nbest, outs):
            records.append({"id": u.id, "reference": u.text, "nbest": [tok.decode(h.tokens) for h in nb],
                            "corrected": tok.decode(o.top1().tokens)})
    else:
        lists = _read_nbest_lines(args.nbest)
        hyps = [[tok.encode(h) for h in hs] for hs in lists]
        with no_grad():
            inp = GerInput(Tensor(np.zeros((len(hyps), 1, ger.cfg.d_audio))), np.ones(len(hyps), dtype=int), hyps)
            outs = generate(ger, ger.prefix(inp, FusionSettings(hfcdf.LINGUISTIC_ONLY)), inp, beam=1)
        for i, (hs, o) in enumerate(zip(lists, outs)):
            records.append({"id": str(i), "nbest": hs, "corrected": tok.decode(o.top1().tokens)})
    out = _out_dir(args)
    with open(out / "corrections.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    for r in records:
        print(f"{r['id']}\t{r['corrected']}")
    return 0


def cmd_gradcheck(args) -> int:
    only = [c for part in args.only for c in part.split(",") if c] if args.only else None
    if only and set(only) - set(diagnostics.COMPONENTS):
        raise UsageError(f"--only expects components from {list(diagnostics.COMPONENTS)}")
    results = diagnostics.run_checks(only, corrupt=args.corrupt or (), seed=args.seed)
    lines = [r.line() for r in results]
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    text = "\n".join(lines)
    print(text)
    if args.out:
        (_out_dir(args) / "gradcheck.txt").write_text(text + "\n")
    return 1 if failed else 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denoising-ger", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=1)
    defaults = speech_sim.CorpusConfig()
    for name in ("vocab_size", "n_train", "n_test", "min_words", "max_words"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    g.set_defaults(func=cmd_gen)

    def run_flags(sp):
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--corpus", required=True, help="directory written by gen")
        sp.add_argument("--out", required=True)
        sp.add_argument("--cache-dir", help="where pretrained base models are cached")

    t = sub.add_parser("train", help="train one configuration")
    run_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="WER matrix and error cases for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--beam", type=int, default=0, help="0 uses the checkpoint's beam")
    e.add_argument("--limit", type=int, default=0, help="utterances per split, 0 for all")
    e.add_argument("--cases", type=int, default=20, help="error cases per split in cases.txt, 0 for all")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="component ablation matrix over seeds")
    run_flags(a)
    a.add_argument("--seeds", default="1,2,3")
    a.add_argument("--table", choices=("components", "fusion"), default="components",
                   help="component toggles (NAAE/HFCDF/RL) or fusion strategies with all components on")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("correct", help="correct utterances or text n-best lists")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--corpus-dir")
    c.add_argument("--utt", action="append", help="utterance id (needs --corpus-dir)")
    c.add_argument("--nbest", help="file of n-best lists, '|' between hypotheses; '-' or omitted reads stdin")
    c.set_defaults(func=cmd_correct)

    d = sub.add_parser("gradcheck", help="finite-difference gradient checks per component")
    d.add_argument("--only", action="append", help=f"subset of {','.join(diagnostics.COMPONENTS)}")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    d.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
