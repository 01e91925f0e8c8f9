"""``slu`` command line.

Exit codes: 0 success, 1 validation error, 2 missing dependency or input,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .corpus import CorpusSpec, generate_corpus, load_corpus, make_noisy, save_corpus, token_embeddings
from .layers import NumericalError, read_checkpoint
from .pipeline import (FAMILIES, FAMILY_IO, DependencyError, PipelineConfig, decode_all, default_grid,
                       experiment_spec, explain, read_targets, run_experiment, run_grid, write_targets)
from .targets import TargetSequence, Variant, epoch_targets, make_target

log = logging.getLogger("slu")

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 1, 2, 3


def _config(args) -> PipelineConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = PipelineConfig.from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _out(args, name: str) -> Path:
    path = Path(args.out) if getattr(args, "out", None) else Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _dump(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path:
        path.write_text(text)
    sys.stdout.write(text)


# --- commands ---------------------------------------------------------------------

def cmd_gen_corpus(args) -> None:
    data = json.loads(Path(args.config).read_text()).get("corpus", {}) if args.config else {}
    if args.spec:
        data.update(json.loads(Path(args.spec).read_text()))
    spec = CorpusSpec.from_dict(data)
    if args.n is not None:
        spec = replace(spec, n_utterances=args.n)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    corpus = generate_corpus(spec)
    if args.extra_noise:
        corpus = make_noisy(corpus, args.extra_noise, args.noise_seed)
    path = _out(args, "corpus.jsonl")
    save_corpus(corpus, path)
    log.info("wrote %d utterances to %s", len(corpus), path)


def cmd_make_targets(args) -> None:
    corpus = load_corpus(args.corpus)
    seed = args.seed or 0
    if args.variant == "random":
        targets = epoch_targets(corpus, "pretrain", args.epoch, seed)
    else:
        targets = [make_target(u, args.variant, corpus.vocab) for u in corpus.utterances]
    write_targets(_out(args, "targets.jsonl"), [u.id for u in corpus.utterances],
                  [t.symbols for t in targets], corpus.vocab)


def _train(args, family: str) -> None:
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    fit, save, load = FAMILY_IO[family]
    base = replace(cfg.family_config(family), seed=cfg.seed)
    init = load(args.init) if args.init else None
    if args.targets:
        by_id = read_targets(args.targets, corpus.vocab)
        missing = [u.id for u in corpus.utterances if u.id not in by_id]
        if missing:
            raise ValueError(f"{args.targets}: no target for {missing[0]}")
        fixed = [TargetSequence(by_id[u.id], "file") for u in corpus.utterances]
    else:
        fixed = [make_target(u, args.variant, corpus.vocab) for u in corpus.utterances]
    traces = {}
    if args.pretrain_epochs:
        init, traces["pretrain"] = fit(corpus, lambda e: epoch_targets(corpus, "pretrain", e, cfg.seed),
                                       replace(base, epochs=args.pretrain_epochs), init=init)
    epochs = base.epochs if args.finetune_epochs is None else args.finetune_epochs
    model, traces["finetune"] = fit(corpus, lambda e: fixed, replace(base, epochs=epochs), init=init)
    path = _out(args, f"{family}.json")
    save(model, path, {"trace": traces})
    _dump({"model": str(path), "trace": traces})


def _load_any(path):
    kind = read_checkpoint(path)["model_type"]
    return FAMILY_IO[kind][2](path)


def cmd_decode(args) -> None:
    model = _load_any(args.model)
    corpus = load_corpus(args.corpus)
    if model.vocab != corpus.vocab:
        raise ValueError("model and corpus vocabularies differ")
    preds = decode_all(model, corpus, args.max_len)
    write_targets(_out(args, "predictions.jsonl"), [u.id for u in corpus.utterances],
                  [preds[u.id] for u in corpus.utterances], corpus.vocab)


def cmd_align(args) -> None:
    from .align import (GaussianScorer, alignment_error, attention_align, estimated_order, hmm_phrase_times,
                        reorder_by_time, true_phrase_times)
    from .attn_model import AttnModel
    from .targets import parse_target
    corpus = load_corpus(args.corpus)
    vocab = corpus.vocab
    if args.method == "attn":
        if not args.model:
            raise ValueError("--method attn needs --model (an alphabetic-order attention model)")
        model = _load_any(args.model)
        if not isinstance(model, AttnModel):
            raise ValueError("attention alignment needs an attention checkpoint")
    else:
        scorer = GaussianScorer(token_embeddings(corpus.spec, vocab), args.keyword_sigma or corpus.spec.noise_sigma,
                                args.garbage_sigma, vocab.spoken_range)
    given = read_targets(args.targets, vocab) if args.targets else None
    out, est, true, extra = [], [], [], []
    for u in corpus.utterances:
        symbols = given[u.id] if given else make_target(u, "alphabetic", vocab).symbols
        parsed = parse_target(symbols, vocab)
        if args.method == "attn":
            times = attention_align(model.forced_attention_batch([u.frames], [symbols])[0], parsed)
        else:
            times = hmm_phrase_times(u.frames, parsed, scorer)
        out.append(reorder_by_time(parsed, times, vocab).symbols)
        est.append(estimated_order(times))
        true.append(estimated_order(true_phrase_times(u, parsed)))
        extra.append({"estimated_order": est[-1], "true_order": true[-1]})
    write_targets(_out(args, "aligned.jsonl"), [u.id for u in corpus.utterances], out, vocab, extra)
    _dump({"method": args.method, **alignment_error(est, true)}, Path(args.report) if args.report else None)


def cmd_evaluate(args) -> None:
    from .evaluation import score_predictions
    ref = load_corpus(args.ref)
    preds = read_targets(args.pred, ref.vocab)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = set(metrics) - {"f1", "intent", "wer"}
    if bad:
        raise ValueError(f"unknown metric {sorted(bad)[0]!r}")
    report = score_predictions(preds, ref, metrics).to_dict()
    report = {k: v for k, v in report.items()
              if not ((k == "wer" and "wer" not in metrics) or (k == "intent_accuracy" and "intent" not in metrics))}
    doc = {"metrics": report, "n_utterances": len(ref),
           "metadata": {"wer_reference": "full transcripts; entity-only outputs are penalized for omitted "
                                         "carrier words, so their WER is not an ASR quality measure"}}
    _dump(doc, _out(args, "report.json"))


def cmd_run_experiment(args) -> None:
    cfg = _config(args)
    spec = experiment_spec(args.row, args.family, cfg)
    if args.explain:
        print(explain([spec]))
        return
    rec = run_experiment(spec, cfg, args.out_dir, auto=not args.no_auto)
    _dump(rec.to_dict())


def cmd_run_grid(args) -> None:
    cfg = _config(args)
    if args.rows is not None:
        rows = [r.strip() for r in args.rows.split(",") if r.strip()]
        families = [f.strip() for f in args.families.split(",")]
        specs = [experiment_spec(r, f, cfg) for f in families for r in rows if not r.startswith("align-")]
        specs += [experiment_spec(r, "", cfg) for r in rows if r.startswith("align-")]
    else:
        specs = default_grid(cfg)
    if args.explain:
        print(explain(specs))
        return
    table, _ = run_grid(specs, cfg, args.out_dir, auto=not args.no_auto, jobs=args.jobs)
    sys.stdout.write(table)


def cmd_grad_check(args) -> None:
    from .attn_model import AttnConfig, grad_check_attn, new_attn
    from .rnnt_model import RnntConfig, grad_check_rnnt, new_rnnt
    seed = args.seed or 0
    corpus = generate_corpus(CorpusSpec(n_utterances=args.batch, seed=seed))
    if args.model:
        model = _load_any(args.model)
        if model.vocab != corpus.vocab:
            raise ValueError("checkpoint vocabulary differs from the default corpus vocabulary")
        family = read_checkpoint(args.model)["model_type"]
    else:
        family = args.family
        small = dict(encoder_units=8, seed=seed)
        model = (new_rnnt(RnntConfig(pred_units=8, pred_embed_dim=8, joint_dim=8, **small), corpus.vocab)
                 if family == "rnnt" else
                 new_attn(AttnConfig(embed_dim=8, decoder_units=8, attention_dim=8, location_channels=2, **small),
                          corpus.vocab))
    batch = ([u.frames for u in corpus.utterances], [make_target(u, "spoken", corpus.vocab).symbols
                                                     for u in corpus.utterances])
    check = grad_check_rnnt if family == "rnnt" else grad_check_attn
    res = check(model, batch, args.epsilon, args.coords, seed)
    ok = res.max_relative_error < args.tolerance
    _dump({"family": family, "max_relative_error": res.max_relative_error,
           "max_absolute_error": res.max_absolute_error, "n_coordinates": res.n_coordinates,
           "tolerance": args.tolerance, "passed": ok})
    if not ok:
        raise NumericalError(f"gradient check failed: {res.max_relative_error:.3g} >= {args.tolerance}")


# --- parser -------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, defaults: bool) -> None:
    # subcommands accept the global flags too; their copies default to SUPPRESS so
    # a flag given before the subcommand is not overwritten
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=d(None),
                        help="training and augmentation seed (the corpus seed for gen-corpus)")
    parser.add_argument("--config", default=d(None), help="JSON file with pipeline config overrides")
    parser.add_argument("--out-dir", default=d("slu-out"), help="artifact and output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)
    p = argparse.ArgumentParser(prog="slu", description="spoken language understanding toolkit")
    _global_flags(p, defaults=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-corpus", cmd_gen_corpus, "generate a synthetic corpus (JSON lines)")
    sp.add_argument("--spec", help="JSON corpus spec")
    sp.add_argument("--n", type=int, help="number of utterances")
    sp.add_argument("--extra-noise", type=float, default=0.0, help="extra frame noise std (noisy condition)")
    sp.add_argument("--noise-seed", type=int, default=7)
    sp.add_argument("--out")

    sp = add("make-targets", cmd_make_targets, "write target sequences for a corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--variant", required=True, choices=[v.value for v in Variant])
    sp.add_argument("--epoch", type=int, default=1, help="epoch index for the random variant")
    sp.add_argument("--out")

    for fam in FAMILIES:
        sp = add(f"train-{fam}", lambda a, fam=fam: _train(a, fam),
                 {"rnnt": "train an RNN-T model", "attn": "train an attention model"}[fam])
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--variant", default="spoken", choices=["full", "spoken", "alphabetic"])
        sp.add_argument("--targets", help="JSON-lines targets (e.g. from align), overriding --variant")
        sp.add_argument("--pretrain-epochs", type=int, default=0, help="random-order pretraining epochs")
        sp.add_argument("--finetune-epochs", type=int, default=None, help="epochs on the fixed targets")
        sp.add_argument("--init", help="checkpoint to start from")
        sp.add_argument("--out")

    sp = add("decode", cmd_decode, "greedy-decode a corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--max-len", type=int, default=60)
    sp.add_argument("--out")

    sp = add("align", cmd_align, "estimate spoken order and rewrite targets")
    sp.add_argument("--method", required=True, choices=["attn", "hmm"])
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", help="alphabetic-order attention checkpoint (attn method)")
    sp.add_argument("--targets", help="targets to reorder (default: alphabetic)")
    sp.add_argument("--keyword-sigma", type=float, help="HMM keyword std (default: corpus noise sigma)")
    sp.add_argument("--garbage-sigma", type=float, default=1.0)
    sp.add_argument("--report", help="write the alignment error report here")
    sp.add_argument("--out")

    sp = add("evaluate", cmd_evaluate, "score predictions against a reference corpus")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--metrics", default="f1,intent,wer")
    sp.add_argument("--out")

    sp = add("run-experiment", cmd_run_experiment, "run one grid row")
    sp.add_argument("--row", required=True)
    sp.add_argument("--family", default="rnnt", choices=FAMILIES)
    sp.add_argument("--no-auto", action="store_true", help="fail instead of building missing prerequisite rows")
    sp.add_argument("--explain", action="store_true")

    sp = add("run-grid", cmd_run_grid, "run the experiment grid")
    sp.add_argument("--rows", help="comma-separated row ids (default: the standard grid)")
    sp.add_argument("--families", default=",".join(FAMILIES))
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--no-auto", action="store_true")
    sp.add_argument("--explain", action="store_true")

    sp = add("grad-check", cmd_grad_check, "finite-difference gradient check")
    sp.add_argument("--family", default="rnnt", choices=FAMILIES)
    sp.add_argument("--model", help="checkpoint to check (default: a small random model)")
    sp.add_argument("--batch", type=int, default=3)
    sp.add_argument("--coords", type=int, default=200)
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.fn(args)
    except NumericalError as e:
        log.error("%s", e)
        return EXIT_NUMERICAL
    except (DependencyError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_DEPENDENCY
    except (ValueError, KeyError) as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
