"""Glue between text, models, training and decoding used by the CLI and demos."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .align import EditScript, EditWeights, align, project_boundaries
from .decoding import (
    DecodeResult,
    decode_independent,
    decode_pipeline,
    decode_single,
    decode_synchronous,
    decode_two_round,
)
from .model import ModelConfig, Transformer, init_from_pretrained
from .text import Triplet, Vocab, join_group, normalize_whitespace, strip_segment_tags
from .training import Checkpoint, Example, TrainConfig, average_checkpoints, train

log = logging.getLogger(__name__)

DECODE_STRATEGIES = ("independent", "pipeline", "sync-greedy", "sync-beam", "two-round", "copy")

# Small settings under which the toy task trains in about a minute on one CPU core.
TOY_MODEL = dict(d_model=64, d_ff=128, n_heads=4, n_enc_layers=2, n_dec_layers=2, max_len=96)
TOY_TRAIN = dict(max_lr=3e-3, warmup_steps=200, fine_tune_lr=1e-3, batch_tokens=1200,
                 checkpoint_interval_steps=100, patience_checkpoints=4, average_last_k=5, max_steps=3000)


def source_ids(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text) + [vocab.eos_id]


def triplet_examples(triplets: Sequence[Triplet], vocab: Vocab, source: str = "transcript",
                     targets: Sequence[str] = ("caption", "subtitle")) -> list[Example]:
    """Examples with one or two target streams taken from triplet fields."""
    out = []
    for t in triplets:
        tgts = [vocab.encode(getattr(t, name)) for name in targets]
        out.append(Example(source_ids(vocab, getattr(t, source)), *tgts))
    return out


def detokenize(vocab: Vocab, tokens: Sequence[int]) -> str:
    return vocab.decode(tokens)


def fit(model: Transformer, examples: Sequence[Example], config: TrainConfig, objective: str,
        dev: Sequence[Example] | None = None, log_file=None) -> tuple[Transformer, list[Checkpoint]]:
    """Train, then return a model holding the average of the last k checkpoints."""
    checkpoints = train(model, examples, config, objective, dev=dev, log_file=log_file)
    averaged = average_checkpoints(checkpoints[-config.average_last_k:])
    return Transformer(model.config, averaged), checkpoints


def finetune_from(pretrained: Transformer, variant: str, scheme: str, examples: Sequence[Example],
                  config: TrainConfig, dev=None, log_file=None, seed: int = 0):
    """Initialise a dual/shared model from a base model and train it on the joint loss."""
    target = Transformer(pretrained.config.replace(variant=variant), seed=seed)
    init_from_pretrained(target.params, pretrained.params, scheme)
    return fit(target, examples, config, "joint", dev, log_file)


def toy_model_config(vocab_size: int, variant: str = "base", **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, variant=variant, **{**TOY_MODEL, **overrides})


def toy_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TOY_TRAIN, **overrides})


# ---------------------------------------------------------------------------
# decoding


def decode_one(src: Sequence[int], strategy: str, model: Transformer | None, model2: Transformer | None = None,
               beam_size: int = 4, prefix_mode: str = "hypothesis", references=None) -> DecodeResult:
    if strategy == "copy":
        return decode_independent(src, model, strategy="copy")
    if strategy == "independent":
        if model2 is None and model.config.variant == "base":
            raise ValueError("independent decoding needs two base models or one dual model")
        return decode_independent(src, model, model2)
    if strategy == "pipeline":
        if model2 is None:
            raise ValueError("pipeline decoding needs a caption model and a caption-to-subtitle model")
        return decode_pipeline(src, model, model2)
    if strategy == "sync-greedy":
        return decode_synchronous(src, model, "greedy")
    if strategy == "sync-beam":
        return decode_synchronous(src, model, "beam", beam_size)
    if strategy == "two-round":
        return decode_two_round(src, model, prefix_mode, references)
    raise ValueError(f"unknown strategy {strategy!r}")


def decode_corpus(sources: Sequence[Sequence[int]], strategy: str, model: Transformer | None,
                  model2: Transformer | None = None, beam_size: int = 4, prefix_mode: str = "hypothesis",
                  references: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None) -> list[DecodeResult]:
    out = []
    for i, src in enumerate(sources):
        refs = references[i] if references is not None else None
        out.append(decode_one(src, strategy, model, model2, beam_size, prefix_mode, refs))
    return out


def greedy_translator(model: Transformer, vocab: Vocab):
    """text -> text with a base model, as used for forward-translated synthetic data."""
    def run(text: str) -> str:
        tokens, _, _ = decode_single(model, source_ids(vocab, text))
        return detokenize(vocab, tokens)
    return run


# ---------------------------------------------------------------------------
# subsegmentation of a transcript stream


@dataclass
class StreamSegment:
    transcript: str
    sentence_transcripts: list[str]
    start: int
    end: int
    script: EditScript


def segment_stream(stream: str, caption_groups: Sequence[Sequence[str]], weights: EditWeights | None = None,
                   slack: float = 0.5, min_slack: int = 20, snap: bool = True) -> list[StreamSegment]:
    """Cut a continuous transcript into one piece per caption group.

    Each group is aligned against a window of the stream starting at the
    current cursor; the position where the group's text is fully consumed
    becomes the next cursor. Characters left after the last group go to it.
    """
    stream = normalize_whitespace(stream)
    out: list[StreamSegment] = []
    cursor = 0
    for g, group in enumerate(caption_groups):
        plain = [normalize_whitespace(strip_segment_tags(c)) for c in group]
        if not plain:
            raise ValueError("empty alignment target")
        target = join_group(plain)
        last = g == len(caption_groups) - 1
        window_end = len(stream) if last else min(len(stream), cursor + len(target) + max(min_slack, int(slack * len(target))))
        window = stream[cursor:window_end]
        script = align(window, target, weights)
        starts, pos = [], 0
        for s in plain[:-1]:
            pos += len(s) + 1
            starts.append(pos)
        cuts = project_boundaries(script, starts + [len(target)], snap=snap, src=window)
        if last:
            cuts[-1] = len(window)
        edges = [0] + cuts
        pieces = [window[a:b].strip() for a, b in zip(edges[:-1], edges[1:])]
        end = cursor + cuts[-1]
        out.append(StreamSegment(stream[cursor:end].strip(), pieces, cursor, end, script))
        cursor = end
    return out


def add_char_noise(text: str, rate: float, rng: np.random.Generator, alphabet: str = "abcdefghijklmnopqrstuvwxyz") -> str:
    """Substitute a fraction ``rate`` of non-space characters with random letters."""
    chars = list(text)
    for i, c in enumerate(chars):
        if c != " " and rng.random() < rate:
            chars[i] = alphabet[int(rng.integers(len(alphabet)))]
    return "".join(chars)
