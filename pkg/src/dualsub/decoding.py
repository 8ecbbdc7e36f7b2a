"""Inference: independent, synchronous (greedy/beam), forced-prefix and 2-round decoding."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import _log_softmax
from .model import Transformer
from .training import decoder_prefix

STRATEGIES = ("greedy", "beam", "copy")


@dataclass
class DecodeResult:
    tokens1: list[int]
    tokens2: list[int]
    logprobs1: list[float]
    logprobs2: list[float]
    truncated: bool = False
    first_round: "DecodeResult | None" = None

    @property
    def score(self) -> float:
        return float(sum(self.logprobs1) + sum(self.logprobs2))


def _default_max_len(model: Transformer, src: Sequence[int], prefix_len: int) -> int:
    return min(model.config.max_len - prefix_len, 2 * len(src) + 10)


def _check_src(src) -> np.ndarray:
    src = np.asarray(src, dtype=np.int64)
    if src.ndim != 1 or src.size == 0:
        raise ValueError("empty input")
    return src


def _check_dual(model: Transformer) -> None:
    if model.config.variant not in ("dual", "shared"):
        raise ValueError("no dual path")


# ---------------------------------------------------------------------------
# single stream


def _single_greedy(model: Transformer, enc, decoder_id: int, max_len: int):
    eos = model.config.eos_id
    y = decoder_prefix(model.config, decoder_id)
    tokens, logprobs = [], []
    while len(tokens) < max_len:
        logits = model.single_forward(enc, y, decoder_id)
        lp = _log_softmax(logits.data[-1].astype(np.float64))
        tok = int(np.argmax(lp))
        tokens.append(tok)
        logprobs.append(float(lp[tok]))
        y.append(tok)
        if tok == eos:
            return tokens, logprobs, False
    return tokens, logprobs, True


def _single_beam(model: Transformer, enc, decoder_id: int, max_len: int, k: int):
    eos = model.config.eos_id
    prefix = decoder_prefix(model.config, decoder_id)
    beam = [([], [], False)]  # tokens, logprobs, finished
    for _ in range(max_len):
        alive = [b for b in beam if not b[2]]
        if not alive:
            break
        inputs = np.array([prefix + b[0] for b in alive])
        enc_b = _tile(enc, len(alive))
        logits = model.single_forward(enc_b, inputs, decoder_id)
        lp = _log_softmax(logits.data[:, -1].astype(np.float64))
        cands = [(sum(b[1]), b) for b in beam if b[2]]
        for row, b in enumerate(alive):
            for tok in np.argsort(-lp[row], kind="stable")[:k]:
                tok = int(tok)
                cands.append((sum(b[1]) + lp[row, tok], (b[0] + [tok], b[1] + [float(lp[row, tok])], tok == eos)))
        cands.sort(key=lambda c: -c[0])
        beam = [c[1] for c in cands[:k]]
    finished = [b for b in beam if b[2]]
    best = max(finished or beam, key=lambda b: sum(b[1]))
    return best[0], best[1], not best[2]


def _tile(enc, n: int):
    from . import autodiff as ad
    return ad.Tensor(np.broadcast_to(enc.data, (n,) + enc.shape).copy())


def decode_single(model: Transformer, src, decoder_id: int = 1, strategy: str = "greedy",
                  beam_size: int = 4, max_len: int | None = None):
    """Decode one stream with no partner; returns (tokens, logprobs, truncated)."""
    src = _check_src(src)
    prefix_len = len(decoder_prefix(model.config, decoder_id))
    max_len = max_len or _default_max_len(model, src, prefix_len)
    enc = model.encode(src)
    if strategy == "greedy":
        return _single_greedy(model, enc, decoder_id, max_len)
    if strategy == "beam":
        return _single_beam(model, enc, decoder_id, max_len, beam_size)
    raise ValueError(f"unknown strategy {strategy!r}")


def decode_independent(src, model_cap: Transformer, model_sub: Transformer | None = None,
                       strategy: str = "greedy", beam_size: int = 4, max_len: int | None = None) -> DecodeResult:
    """Each stream decoded with no knowledge of the other.

    With two base models each runs its only decoder. With a single dual/shared
    model, decoders 1 and 2 run without decoder-decoder attention.
    ``strategy="copy"`` returns the source for both streams.
    """
    src = _check_src(src)
    if strategy == "copy":
        toks = [int(t) for t in src]
        return DecodeResult(toks, list(toks), [0.0] * len(toks), [0.0] * len(toks))
    if model_sub is None:
        _check_dual(model_cap)
        runs = [(model_cap, 1), (model_cap, 2)]
    else:
        runs = [(model_cap, 1), (model_sub, 1)]
    (t1, l1, tr1), (t2, l2, tr2) = (
        decode_single(m, src, d, strategy, beam_size, max_len) for m, d in runs
    )
    return DecodeResult(t1, t2, l1, l2, tr1 or tr2)


def decode_pipeline(src, model_cap: Transformer, model_c2s: Transformer, strategy: str = "greedy",
                    beam_size: int = 4, max_len: int | None = None) -> DecodeResult:
    """Caption from the transcript, then subtitle translated from that caption."""
    src = _check_src(src)
    t1, l1, tr1 = decode_single(model_cap, src, 1, strategy, beam_size, max_len)
    eos = model_cap.config.eos_id
    caption_src = [t for t in t1 if t != eos] + [eos]
    t2, l2, tr2 = decode_single(model_c2s, caption_src, 1, strategy, beam_size, max_len)
    return DecodeResult(t1, t2, l1, l2, tr1 or tr2)


# ---------------------------------------------------------------------------
# synchronous dual decoding


@dataclass
class BeamItem:
    """A pair of prefixes, their per-token log-probs and alive flags."""

    y1: list[int]
    y2: list[int]
    lp1: list[float] = field(default_factory=list)
    lp2: list[float] = field(default_factory=list)
    alive1: bool = True
    alive2: bool = True

    @property
    def score(self) -> float:
        return float(sum(self.lp1) + sum(self.lp2))

    @property
    def finished(self) -> bool:
        return not (self.alive1 or self.alive2)


def _expand(item: BeamItem, lp1: np.ndarray, lp2: np.ndarray, k: int, pad: int, eos: int) -> list[BeamItem]:
    def options(alive, lp):
        if not alive:
            return [(pad, None)]
        return [(int(t), float(lp[t])) for t in np.argsort(-lp, kind="stable")[:k]]

    out = []
    for (a, la), (b, lb) in itertools.product(options(item.alive1, lp1), options(item.alive2, lp2)):
        out.append(BeamItem(
            item.y1 + [a], item.y2 + [b],
            item.lp1 + ([la] if la is not None else []),
            item.lp2 + ([lb] if lb is not None else []),
            item.alive1 and a != eos, item.alive2 and b != eos,
        ))
    return out


def _strip_prefix(item: BeamItem, p: int, pad: int) -> tuple[list[int], list[int]]:
    return ([t for t in item.y1[p:] if t != pad], [t for t in item.y2[p:] if t != pad])


def decode_synchronous(src, model: Transformer, strategy: str = "greedy", beam_size: int = 4,
                       max_len: int | None = None) -> DecodeResult:
    """Both streams advance one token per step, each attending to the other's prefix.

    Once a stream emits EOS it is frozen and fed PAD so its hidden states keep
    serving as keys for the partner. Greedy is beam search of width 1: each
    stream takes its own argmax. Beam search ranks pairs by joint score.
    """
    _check_dual(model)
    src = _check_src(src)
    if strategy == "greedy":
        beam_size = 1
    elif strategy != "beam":
        raise ValueError(f"unknown strategy {strategy!r}")
    cfg = model.config
    pad, eos = cfg.pad_id, cfg.eos_id
    p = len(decoder_prefix(cfg, 1))
    max_len = max_len or _default_max_len(model, src, p)
    enc = model.encode(src)
    beam = [BeamItem(decoder_prefix(cfg, 1), decoder_prefix(cfg, 2))]
    for _ in range(max_len):
        alive = [b for b in beam if not b.finished]
        if not alive:
            break
        y1 = np.array([b.y1 for b in alive])
        y2 = np.array([b.y2 for b in alive])
        enc_b = enc if len(alive) == 1 else _tile(enc, len(alive))
        if len(alive) == 1:
            l1, l2 = model.dual_forward(enc, y1[0], y2[0])
            lp1 = _log_softmax(l1.data[-1:].astype(np.float64))
            lp2 = _log_softmax(l2.data[-1:].astype(np.float64))
        else:
            l1, l2 = model.dual_forward(enc_b, y1, y2)
            lp1 = _log_softmax(l1.data[:, -1].astype(np.float64))
            lp2 = _log_softmax(l2.data[:, -1].astype(np.float64))
        cands = [b for b in beam if b.finished]
        for row, b in enumerate(alive):
            cands.extend(_expand(b, lp1[row], lp2[row], beam_size, pad, eos))
        # stable sort keeps expansion order among equal scores
        cands.sort(key=lambda c: -c.score)
        beam = cands[:beam_size]
    finished = [b for b in beam if b.finished]
    best = max(finished or beam, key=lambda b: b.score)
    t1, t2 = _strip_prefix(best, p, pad)
    return DecodeResult(t1, t2, best.lp1, best.lp2, truncated=not best.finished)


# ---------------------------------------------------------------------------
# forced prefix and 2-round decoding


def decode_forced_prefix(src, model: Transformer, direction: int, partner_prefix: Sequence[int],
                         prefix_mode: str = "hypothesis", max_len: int | None = None):
    """Generate stream ``direction`` while the other stream is read from a fixed prefix.

    When producing the token at output position ``t`` (0-based), the
    decoder-decoder attention sees the first ``min(t, len(partner_prefix))``
    prefix tokens. An EOS-terminated prefix is a finished stream and is
    continued with PAD, as in synchronous decoding; any other prefix is
    clamped, so later steps see all of it. ``prefix_mode`` ("hypothesis" or
    "reference") only labels where the prefix came from. Returns
    (tokens, logprobs, truncated).
    """
    _check_dual(model)
    if prefix_mode not in ("hypothesis", "reference"):
        raise ValueError(f"unknown prefix mode {prefix_mode!r}")
    if len(partner_prefix) == 0:
        raise ValueError("partner prefix must be nonempty")
    src = _check_src(src)
    cfg = model.config
    other = 3 - direction
    own = decoder_prefix(cfg, direction)
    partner = decoder_prefix(cfg, other) + [int(t) for t in partner_prefix]
    max_len = max_len or _default_max_len(model, src, len(own))
    if partner[-1] == cfg.eos_id:
        partner += [cfg.pad_id] * max(0, len(own) + max_len - len(partner))
    enc = model.encode(src)
    tokens, logprobs = [], []
    while len(tokens) < max_len:
        partner_in = partner[: len(own)]
        ys = (own, partner_in) if direction == 1 else (partner_in, own)
        l1, l2 = model.dual_forward(enc, *ys)
        logits = l1 if direction == 1 else l2
        lp = _log_softmax(logits.data[-1].astype(np.float64))
        tok = int(np.argmax(lp))
        tokens.append(tok)
        logprobs.append(float(lp[tok]))
        own = own + [tok]
        if tok == cfg.eos_id:
            return tokens, logprobs, False
    return tokens, logprobs, True


def decode_two_round(src, model: Transformer, prefix_mode: str = "hypothesis", references=None,
                     strategy: str = "greedy", beam_size: int = 4, max_len: int | None = None) -> DecodeResult:
    """Asynchronous 2-round decoding.

    Round 1 decodes both streams synchronously. Round 2 re-decodes each stream
    with the other stream's round-1 output (or, with ``prefix_mode="reference"``,
    the reference token ids given in ``references``) as a forced prefix.
    """
    first = decode_synchronous(src, model, strategy, beam_size, max_len)
    eos = model.config.eos_id
    if prefix_mode == "reference":
        if references is None:
            raise ValueError("reference prefix mode needs references")
        p1, p2 = ([int(t) for t in r if t != eos] + [eos] for r in references)
    else:
        p1, p2 = first.tokens1, first.tokens2
    t2, l2, tr2 = decode_forced_prefix(src, model, 2, p1, prefix_mode, max_len)
    t1, l1, tr1 = decode_forced_prefix(src, model, 1, p2, prefix_mode, max_len)
    return DecodeResult(t1, t2, l1, l2, tr1 or tr2, first_round=first)


def score_pair(src, model: Transformer, tokens1: Sequence[int], tokens2: Sequence[int]) -> float:
    """Teacher-forced joint log-probability of a decoded pair (PAD after EOS)."""
    _check_dual(model)
    cfg = model.config
    n = max(len(tokens1), len(tokens2))
    ys, refs = [], []
    for d, toks in ((1, tokens1), (2, tokens2)):
        padded = list(toks) + [cfg.pad_id] * (n - len(toks))
        ys.append(decoder_prefix(cfg, d) + padded[:-1])
        refs.append(toks)
    enc = model.encode(_check_src(src))
    l1, l2 = model.dual_forward(enc, ys[0], ys[1])
    p = len(decoder_prefix(cfg, 1)) - 1
    total = 0.0
    for logits, toks in ((l1, refs[0]), (l2, refs[1])):
        lp = _log_softmax(logits.data[p:].astype(np.float64))
        total += float(sum(lp[i, t] for i, t in enumerate(toks)))
    return total
