"""Command line interface: ``dualsub <command> ...``.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import autodiff as ad
from .align import EditWeights, format_script
from .config import ConfigError, RunConfig, load_config
from .metrics import bleu_details, evaluate_consistency, train_aligners, wer
from .model import INIT_SCHEMES, Transformer, load_model, save_model
from .text import (
    Triplet,
    Vocab,
    concat_sample,
    generate_toy_corpus,
    join_group,
    learn_bpe,
    make_synthetic_triparallel,
    read_lines,
    read_triparallel,
    write_lines,
    write_triparallel,
)
from .workflows import (
    DECODE_STRATEGIES,
    add_char_noise,
    decode_corpus,
    detokenize,
    finetune_from,
    fit,
    greedy_translator,
    segment_stream,
    source_ids,
    triplet_examples,
)

log = logging.getLogger("dualsub")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FIELDS = ("transcript", "caption", "subtitle")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> RunConfig:
    config = load_config(args.config, args.set or ())
    if args.seed is not None:
        config.train.seed = args.seed
    ad.set_precision(config.train.precision)
    return config


def _rng(config: RunConfig) -> np.random.Generator:
    return np.random.default_rng(config.train.seed)


def _write_config(config: RunConfig, prefix) -> None:
    config.write(f"{prefix}.config.ini")


def _model_path(path) -> Path:
    p = Path(path)
    return p / "model.ckpt" if p.is_dir() else p


def _load(path, vocab: Vocab) -> Transformer:
    model, _ = load_model(_model_path(path), vocab.hash)
    return model


def _train_and_save(args, config: RunConfig, vocab: Vocab, make_result) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out / ".lock")):
        config.write(out / "config.ini")
        with open(out / "train.log", "w", encoding="utf-8") as log_file:
            model, checkpoints = make_result(log_file)
        checkpoints[-1].save(out / "last.ckpt", vocab.hash)
        save_model(out / "model.ckpt", model, vocab.hash,
                   {"steps": checkpoints[-1].step, "averaged": min(len(checkpoints), config.train.average_last_k)})
    print(f"saved\t{out / 'model.ckpt'}\tsteps={checkpoints[-1].step}\tdev_loss={checkpoints[-1].dev_loss:.6f}")


# ---------------------------------------------------------------------------
# commands


def cmd_make_toy_data(args, config: RunConfig) -> None:
    n = args.n or config.data.toy_size
    triplets = generate_toy_corpus(n, _rng(config))
    write_triparallel(args.out, triplets)
    _write_config(config, args.out)
    print(f"wrote\t{n}\ttriplets\t{args.out}")


def cmd_learn_vocab(args, config: RunConfig) -> None:
    corpus = []
    for prefix in args.data:
        for t in read_triparallel(prefix):
            corpus += [t.transcript, t.caption, t.subtitle]
    merges = args.merges if args.merges is not None else config.data.n_merges
    vocab = learn_bpe(corpus, merges, config.data.min_frequency)
    vocab.save(args.out)
    _write_config(config, args.out)
    print(f"vocab\t{len(vocab)}\ttokens\t{len(vocab.merges)}\tmerges\t{vocab.hash}")


def cmd_build_triparallel(args, config: RunConfig) -> None:
    triplets = read_triparallel(args.data)
    rng = _rng(config)
    groups = concat_sample(list(range(len(triplets))), rng, config.data.concat_mean, config.data.concat_sigma)
    if args.stream:
        stream = " ".join(read_lines(args.stream))
    else:
        stream = " ".join(t.transcript for t in triplets)
    if config.data.noise > 0:
        stream = add_char_noise(stream, config.data.noise, rng)
    caption_groups = [[triplets[i].caption for i in g] for g in groups]
    segments = segment_stream(stream, caption_groups, EditWeights())
    out = [Triplet(seg.transcript, join_group([triplets[i].caption for i in g]),
                   join_group([triplets[i].subtitle for i in g])) for seg, g in zip(segments, groups)]
    write_triparallel(args.out, out)
    _write_config(config, args.out)
    if args.dump:
        Path(args.dump).write_text("\n".join(format_script(s.script) for s in segments), encoding="utf-8")
    print(f"wrote\t{len(out)}\tgroups\tfrom\t{len(triplets)}\tsentences")


def _base_training(args, config: RunConfig, mode: str) -> None:
    vocab = Vocab.load(args.vocab)
    examples = triplet_examples(read_triparallel(args.data), vocab, args.source, [args.target])
    dev = triplet_examples(read_triparallel(args.dev), vocab, args.source, [args.target]) if args.dev else None
    model = Transformer(config.model.model_config(len(vocab), "base"), seed=config.train.seed)
    tc = config.train.train_config(mode)
    _train_and_save(args, config, vocab, lambda f: fit(model, examples, tc, "single", dev, f))


def cmd_train_base(args, config: RunConfig) -> None:
    _base_training(args, config, "pretrain")


def cmd_pretrain(args, config: RunConfig) -> None:
    _base_training(args, config, "pretrain")


def cmd_finetune_dual(args, config: RunConfig) -> None:
    vocab = Vocab.load(args.vocab)
    examples = triplet_examples(read_triparallel(args.data), vocab)
    dev = triplet_examples(read_triparallel(args.dev), vocab) if args.dev else None
    if args.init:
        pretrained = _load(args.init, vocab)
        tc = config.train.train_config("finetune")
        run = lambda f: finetune_from(pretrained, args.variant, args.init_scheme, examples, tc, dev, f,
                                      seed=config.train.seed)
    else:
        model = Transformer(config.model.model_config(len(vocab), args.variant), seed=config.train.seed)
        tc = config.train.train_config("pretrain")
        run = lambda f: fit(model, examples, tc, "joint", dev, f)
    _train_and_save(args, config, vocab, run)


def cmd_make_synthetic(args, config: RunConfig) -> None:
    vocab = Vocab.load(args.vocab)
    triplets = read_triparallel(args.data)
    cap = greedy_translator(_load(args.cap_model, vocab), vocab)
    sub = greedy_translator(_load(args.sub_model, vocab), vocab)
    out, skipped = make_synthetic_triparallel(triplets, cap, sub)
    if skipped:
        log.warning("skipped %d triplets that failed to decode", skipped)
    write_triparallel(args.out, out)
    _write_config(config, args.out)
    print(f"wrote\t{len(out)}\ttriplets\tskipped\t{skipped}")


def cmd_decode(args, config: RunConfig) -> None:
    strategy = args.strategy or config.decode.strategy
    prefix_mode = args.prefix_mode or config.decode.prefix_mode
    vocab = Vocab.load(args.vocab)
    inputs = read_lines(args.input)
    sources = [source_ids(vocab, line) for line in inputs]
    references = None
    if prefix_mode == "reference" and strategy == "two-round":
        if not args.refs:
            raise UsageError("--prefix-mode reference needs --refs")
        refs = read_triparallel(args.refs)
        if len(refs) != len(inputs):
            raise ValueError("reference and input line counts differ")
        references = [(vocab.encode(r.caption), vocab.encode(r.subtitle)) for r in refs]
    model = _load(args.model, vocab) if args.model else None
    model2 = _load(args.model2, vocab) if args.model2 else None
    if model is None and strategy != "copy":
        raise UsageError(f"--strategy {strategy} needs --model")
    results = decode_corpus(sources, strategy, model, model2, args.beam_size or config.decode.beam_size,
                            prefix_mode, references)
    write_lines(f"{args.out}.caption", [detokenize(vocab, r.tokens1) for r in results])
    write_lines(f"{args.out}.subtitle", [detokenize(vocab, r.tokens2) for r in results])
    write_lines(f"{args.out}.scores", [f"{i}\t{r.score:.6f}\t{int(r.truncated)}" for i, r in enumerate(results)])
    _write_config(config, args.out)
    print(f"decoded\t{len(results)}\tstrategy={strategy}\tprefix_mode={prefix_mode}")


def cmd_eval(args, config: RunConfig) -> None:
    metrics = [m.strip() for m in (args.metrics or config.metrics.metrics).split(",") if m.strip()]
    unknown = set(metrics) - {"bleu", "wer", "consistency"}
    if unknown:
        raise UsageError(f"unknown metrics: {','.join(sorted(unknown))}")
    hyp_cap = read_lines(f"{args.hyp}.caption")
    hyp_sub = read_lines(f"{args.hyp}.subtitle")
    refs = read_triparallel(args.ref)
    if not (len(hyp_cap) == len(hyp_sub) == len(refs)):
        raise ValueError("hypothesis and reference line counts differ")
    rows = []
    for stream, hyps, rr in (("caption", hyp_cap, [r.caption for r in refs]),
                             ("subtitle", hyp_sub, [r.subtitle for r in refs])):
        if "bleu" in metrics:
            b = bleu_details(hyps, rr)
            rows.append(("bleu", stream, f"{b.score:.2f}", b.signature))
        if "wer" in metrics:
            rows.append(("wer", stream, f"{wer(hyps, rr):.2f}", ""))
    if "consistency" in metrics:
        pairs = list(zip(hyp_cap, hyp_sub))
        aligners = train_aligners(pairs + [(r.caption, r.subtitle) for r in refs], config.metrics.ibm_iterations)
        report = evaluate_consistency(pairs, aligners)
        for key in ("structural_pct", "lex_c2s", "lex_s2c", "lex_pair"):
            rows.append(("consistency", key, f"{getattr(report, key):.2f}", ""))
    text = "".join("\t".join(r).rstrip("\t") + "\n" for r in rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _write_config(config, args.out)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config (default: $DUALSUB_CONFIG)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="seed for every random choice (overrides train.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualsub", description="Joint captioning and subtitling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", parents=[common], help="generate a synthetic tri-parallel corpus")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("learn-vocab", parents=[common], help="learn a shared BPE vocabulary")
    p.add_argument("--data", required=True, nargs="+", help="tri-parallel prefixes")
    p.add_argument("--out", required=True)
    p.add_argument("--merges", type=int)
    p.set_defaults(func=cmd_learn_vocab)

    p = sub.add_parser("build-triparallel", parents=[common],
                       help="group captions and cut the transcript stream to match")
    p.add_argument("--data", required=True, help="sentence-level tri-parallel prefix")
    p.add_argument("--stream", help="transcript stream file (default: the joined transcripts)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump", help="write alignment scripts here")
    p.set_defaults(func=cmd_build_triparallel)

    for name, func, src, tgt in (("train-base", cmd_train_base, "transcript", "caption"),
                                 ("pretrain", cmd_pretrain, "caption", "subtitle")):
        p = sub.add_parser(name, parents=[common], help=f"train a single-decoder model ({src} to {tgt} by default)")
        p.add_argument("--data", required=True)
        p.add_argument("--dev")
        p.add_argument("--vocab", required=True)
        p.add_argument("--out", required=True, help="model directory")
        p.add_argument("--source", choices=FIELDS, default=src)
        p.add_argument("--target", choices=FIELDS, default=tgt)
        p.set_defaults(func=func)

    p = sub.add_parser("finetune-dual", parents=[common], help="train a dual or shared model on the joint loss")
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("dual", "shared"), default="dual")
    p.add_argument("--init", help="pretrained base model to start from")
    p.add_argument("--init-scheme", choices=INIT_SCHEMES, default="both")
    p.set_defaults(func=cmd_finetune_dual)

    p = sub.add_parser("make-synthetic", parents=[common], help="forward-translated tri-parallel data")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--cap-model", required=True)
    p.add_argument("--sub-model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("decode", parents=[common], help="generate captions and subtitles")
    p.add_argument("--input", required=True, help="transcripts, one per line")
    p.add_argument("--vocab", required=True)
    p.add_argument("--model")
    p.add_argument("--model2", help="second model for independent or pipeline decoding")
    p.add_argument("--strategy", choices=DECODE_STRATEGIES)
    p.add_argument("--prefix-mode", choices=("hypothesis", "reference"))
    p.add_argument("--refs", help="tri-parallel prefix whose captions/subtitles serve as reference prefixes")
    p.add_argument("--beam-size", type=int)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="score decoded output")
    p.add_argument("--hyp", required=True, help="prefix of .caption/.subtitle hypotheses")
    p.add_argument("--ref", required=True, help="tri-parallel reference prefix")
    p.add_argument("--metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"dualsub: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = ad.get_precision()
    try:
        config = _resolve(args)
        args.func(args, config)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    finally:
        ad.set_precision(previous)
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
