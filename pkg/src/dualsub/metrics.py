"""BLEU, WER, caption/subtitle consistency and an IBM Model 1 word aligner."""

from __future__ import annotations

import html
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .align import levenshtein_oracle
from .text import parse_blocks, pretokenize

# ---------------------------------------------------------------------------
# BLEU

_TAG_SPLIT = re.compile(r"(\[eol\]|\[eob\]|<2cap>|<2sub>)")
_13A_RULES = (
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
)
BLEU_SIGNATURE = "nrefs:1|case:mixed|eff:no|tok:13a+tags|smooth:exp|n:4"


def _tokenize_13a(text: str) -> list[str]:
    text = text.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in text:
        text = html.unescape(text)
    text = f" {text} "
    for pattern, repl in _13A_RULES:
        text = pattern.sub(repl, text)
    return text.split()


def bleu_tokenize(line: str) -> list[str]:
    """13a-style tokenization that keeps segmentation and target tags whole."""
    out: list[str] = []
    for piece in _TAG_SPLIT.split(line):
        if _TAG_SPLIT.fullmatch(piece):
            out.append(piece)
        elif piece.strip():
            out.extend(_tokenize_13a(piece))
    return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    sys_len: int
    ref_len: int
    signature: str = BLEU_SIGNATURE

    def __float__(self) -> float:
        return self.score

    def __str__(self) -> str:
        p = "/".join(f"{x:.1f}" for x in self.precisions)
        return (f"BLEU = {self.score:.2f} {p} (BP = {self.brevity_penalty:.3f} "
                f"hyp_len = {self.sys_len} ref_len = {self.ref_len}) {self.signature}")


def bleu_details(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> BleuResult:
    """Corpus BLEU with exponential smoothing of zero n-gram matches."""
    if len(refs) == 0:
        raise ValueError("empty reference corpus")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    correct = [0] * max_n
    total = [0] * max_n
    sys_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = bleu_tokenize(hyp), bleu_tokenize(ref)
        sys_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    precisions = [0.0] * max_n
    smooth = 1.0
    for n in range(max_n):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * total[n])
        else:
            precisions[n] = 100.0 * correct[n] / total[n]
    if sys_len == 0:
        bp = 0.0
    elif sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len)
    else:
        bp = 1.0
    if min(precisions) <= 0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, tuple(precisions), bp, sys_len, ref_len)


def bleu(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    return bleu_details(hyps, refs, max_n).score


# ---------------------------------------------------------------------------
# WER


def wer(hyps: Sequence[str] | str, refs: Sequence[str] | str) -> float:
    """Word edit distance over whitespace tokens, as a percentage of reference words."""
    if isinstance(hyps, str):
        hyps, refs = [hyps], [refs]
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    edits = words = 0
    for h, r in zip(hyps, refs):
        rw = r.split()
        edits += levenshtein_oracle(h.split(), rw)
        words += len(rw)
    if words == 0:
        raise ValueError("empty reference")
    return 100.0 * edits / words


# ---------------------------------------------------------------------------
# consistency


def structural_consistency(pairs: Iterable[tuple[str, str]]) -> float:
    """Percentage of (caption, subtitle) pairs with equal block counts."""
    flags = [parse_blocks(c).n_blocks == parse_blocks(s).n_blocks for c, s in pairs]
    if not flags:
        return 0.0
    return 100.0 * sum(flags) / len(flags)


def block_words(tagged: str, lowercase: bool = False) -> list[tuple[str, int]]:
    """Word tokens (tags removed, punctuation split off) with their block index."""
    out = []
    for word, b in parse_blocks(tagged).word_blocks():
        for tok in pretokenize(word):
            out.append((tok.lower() if lowercase else tok, b))
    return out


def words_of(tagged: str, lowercase: bool = False) -> list[str]:
    return [w for w, _ in block_words(tagged, lowercase)]


@dataclass(frozen=True)
class LexicalScore:
    lex_c2s: float
    lex_s2c: float

    @property
    def lex_pair(self) -> float:
        return (self.lex_c2s + self.lex_s2c) / 2


def lexical_consistency(caption: str, subtitle: str, links: Iterable[tuple[int, int]]) -> LexicalScore | None:
    """Share of words linked to some word in the same block of the other side.

    Returns None (segment skipped) when either side has no words.
    """
    cap = block_words(caption)
    sub = block_words(subtitle)
    if not cap or not sub:
        return None
    links = set(links)
    for i, j in links:
        if not (0 <= i < len(cap) and 0 <= j < len(sub)):
            raise ValueError(f"link {i}-{j} out of range")
    cap_ok = {i for i, j in links if cap[i][1] == sub[j][1]}
    sub_ok = {j for i, j in links if cap[i][1] == sub[j][1]}
    return LexicalScore(100.0 * len(cap_ok) / len(cap), 100.0 * len(sub_ok) / len(sub))


@dataclass
class ConsistencyReport:
    structural_pct: float
    lex_c2s: float
    lex_s2c: float
    lex_pair: float
    segments: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        return (f"structural\t{self.structural_pct:.1f}\nlex_c2s\t{self.lex_c2s:.1f}\n"
                f"lex_s2c\t{self.lex_s2c:.1f}\nlex_pair\t{self.lex_pair:.1f}\n")


def consistency_report(pairs: Sequence[tuple[str, str]], links: Sequence[Iterable[tuple[int, int]]]) -> ConsistencyReport:
    """Corpus consistency; lexical scores are macro-averaged over non-skipped segments."""
    if len(pairs) != len(links):
        raise ValueError("one link set per pair is required")
    records = []
    for (cap, sub), segment_links in zip(pairs, links):
        lex = lexical_consistency(cap, sub, segment_links)
        records.append({
            "blocks_caption": parse_blocks(cap).n_blocks,
            "blocks_subtitle": parse_blocks(sub).n_blocks,
            "lex_c2s": None if lex is None else lex.lex_c2s,
            "lex_s2c": None if lex is None else lex.lex_s2c,
            "lex_pair": None if lex is None else lex.lex_pair,
            "skipped": lex is None,
        })
    scored = [r for r in records if not r["skipped"]]

    def mean(key):
        return float(np.mean([r[key] for r in scored])) if scored else 0.0

    return ConsistencyReport(structural_consistency(pairs), mean("lex_c2s"), mean("lex_s2c"), mean("lex_pair"), records)


# ---------------------------------------------------------------------------
# IBM Model 1

NULL = "<null>"


@dataclass
class IBM1:
    """t(f | e) with a NULL source word at index 0 of ``src_vocab``."""

    src_vocab: dict[str, int]
    tgt_vocab: dict[str, int]
    table: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)

    def prob(self, f: str, e: str) -> float:
        if e not in self.src_vocab or f not in self.tgt_vocab:
            return 0.0
        return float(self.table[self.src_vocab[e], self.tgt_vocab[f]])

    def _ids(self, words, vocab):
        return np.array([vocab.get(w, -1) for w in words], dtype=np.int64)

    def best_sources(self, src: Sequence[str], tgt: Sequence[str]) -> list[int | None]:
        """For each target word the argmax source position; None when NULL is strictly better or the word is unknown."""
        s = self._ids(src, self.src_vocab)
        t = self._ids(tgt, self.tgt_vocab)
        out: list[int | None] = []
        for f in t:
            if f < 0:
                out.append(None)
                continue
            scores = np.where(s >= 0, self.table[np.maximum(s, 0), f], 0.0)
            best = int(np.argmax(scores)) if len(scores) else -1
            if best < 0 or scores[best] < self.table[0, f]:
                out.append(None)
            else:
                out.append(best)
        return out


def _corpus_ll(table: np.ndarray, data) -> float:
    ll = 0.0
    for s, t in data:
        probs = table[np.concatenate(([0], s))][:, t]
        ll += float(np.sum(np.log(probs.sum(axis=0) / (len(s) + 1))))
    return ll


def train_ibm1(bitext: Iterable[tuple[Sequence[str], Sequence[str]]], iterations: int = 5) -> IBM1:
    """EM for t(target word | source word); empty sentence pairs are skipped."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    pairs = [(list(s), list(t)) for s, t in bitext if len(s) and len(t)]
    if not pairs:
        raise ValueError("empty bitext")
    src_vocab = {NULL: 0}
    tgt_vocab: dict[str, int] = {}
    for s, t in pairs:
        for w in s:
            src_vocab.setdefault(w, len(src_vocab))
        for w in t:
            tgt_vocab.setdefault(w, len(tgt_vocab))
    data = [(np.array([src_vocab[w] for w in s]), np.array([tgt_vocab[w] for w in t])) for s, t in pairs]
    table = np.full((len(src_vocab), len(tgt_vocab)), 1.0 / len(tgt_vocab))
    history = []
    for _ in range(iterations):
        counts = np.zeros_like(table)
        ll = 0.0
        for s, t in data:
            rows = np.concatenate(([0], s))
            probs = table[rows][:, t]
            z = probs.sum(axis=0)
            ll += float(np.sum(np.log(z / len(rows))))
            np.add.at(counts, (rows[:, None], t[None, :]), probs / z)
        history.append(ll)
        totals = counts.sum(axis=1, keepdims=True)
        table = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    history.append(_corpus_ll(table, data))
    return IBM1(src_vocab, tgt_vocab, table, history)


def align_words(caption_words: Sequence[str], subtitle_words: Sequence[str],
                c2s: IBM1, s2c: IBM1) -> set[tuple[int, int]]:
    """Union of the argmax links of both directions, as (caption index, subtitle index)."""
    links = set()
    for j, i in enumerate(c2s.best_sources(caption_words, subtitle_words)):
        if i is not None:
            links.add((i, j))
    for i, j in enumerate(s2c.best_sources(subtitle_words, caption_words)):
        if j is not None:
            links.add((i, j))
    return links


def train_aligners(pairs: Sequence[tuple[str, str]], iterations: int = 5) -> tuple[IBM1, IBM1]:
    """Both directions of Model 1 on lowercased caption/subtitle words."""
    bitext = [(words_of(c, True), words_of(s, True)) for c, s in pairs]
    return train_ibm1(bitext, iterations), train_ibm1([(t, s) for s, t in bitext], iterations)


def evaluate_consistency(pairs: Sequence[tuple[str, str]], aligners: tuple[IBM1, IBM1]) -> ConsistencyReport:
    c2s, s2c = aligners
    links = [align_words(words_of(c, True), words_of(s, True), c2s, s2c) for c, s in pairs]
    return consistency_report(pairs, links)


# ---------------------------------------------------------------------------
# alignment files


def format_links(links: Iterable[tuple[int, int]]) -> str:
    return " ".join(f"{i}-{j}" for i, j in sorted(set(links)))


def parse_links(line: str) -> set[tuple[int, int]]:
    out = set()
    for item in line.split():
        i, _, j = item.partition("-")
        if not (i.isdigit() and j.isdigit()):
            raise ValueError(f"bad link {item!r}")
        out.add((int(i), int(j)))
    return out


def write_links(path, link_sets: Iterable[Iterable[tuple[int, int]]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for links in link_sets:
            f.write(format_links(links) + "\n")


def read_links(path) -> list[set[tuple[int, int]]]:
    with open(path, encoding="utf-8") as f:
        return [parse_links(line) for line in f.read().splitlines()]

