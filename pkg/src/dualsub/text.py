"""Vocabulary (BPE), segmentation tags, and corpus construction."""

from __future__ import annotations

import hashlib
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
EOL, EOB = "[eol]", "[eob]"
CAP_TAG, SUB_TAG = "<2cap>", "<2sub>"
SPECIALS = (PAD, BOS, EOS, UNK, EOL, EOB, CAP_TAG, SUB_TAG)
SEGMENT_TAGS = (EOL, EOB)
TARGET_TAGS = {"caption": CAP_TAG, "subtitle": SUB_TAG}
VOCAB_FORMAT = "dualsub-vocab v1"

_END = "</w>"
_CONT = "@@"
_SEGMENT_RE = re.compile(r"\w+|[^\w\s]")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def pretokenize(word: str) -> list[str]:
    """Split one whitespace word into letter/digit runs and single punctuation marks."""
    return _SEGMENT_RE.findall(word)


# ---------------------------------------------------------------------------
# byte-pair encoding


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out, i = [], 0
    a, b = pair
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _initial_symbols(segment: str) -> tuple[str, ...]:
    return tuple(segment[:-1]) + (segment[-1] + _END,)


def segment_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        for word in line.split():
            if word in SPECIALS:
                continue
            counts.update(pretokenize(word))
    return counts


def learn_merges(counts: dict[str, int], n_merges: int, min_frequency: int = 1) -> list[tuple[str, str]]:
    """Greedy most-frequent-pair merges; ties go to the lexicographically smallest pair."""
    if n_merges < 0:
        raise ValueError("n_merges must be non-negative")
    words = {_initial_symbols(seg): f for seg, f in counts.items() if seg}
    merges: list[tuple[str, str]] = []
    for _ in range(n_merges):
        pairs = _pair_counts(words)
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < min_frequency:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        words = {_merge_word(w, best) if best[0] in w else w: f for w, f in words.items()}
    return merges


def _apply_merges(segment: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    symbols = _initial_symbols(segment)
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:]) if p in ranks]
        if not candidates:
            break
        symbols = _merge_word(symbols, min(candidates)[1])
    return list(symbols)


@dataclass
class Vocab:
    """Shared source/target vocabulary: special tokens, BPE merges and token ids."""

    tokens: list[str]
    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ranks = {p: i for i, p in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def tag_id(self, task: str) -> int:
        return self.index[TARGET_TAGS[task]]

    @property
    def hash(self) -> str:
        text = "\n".join(self.tokens) + "\n#\n" + "\n".join(f"{a} {b}" for a, b in self.merges)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def segment(self, segment: str) -> list[str]:
        """BPE pieces of one pre-token, without continuation markers."""
        pieces = self._cache.get(segment)
        if pieces is None:
            pieces = [p[: -len(_END)] if p.endswith(_END) else p for p in _apply_merges(segment, self._ranks)]
            self._cache[segment] = pieces
        return pieces

    def tokenize(self, text: str) -> list[str]:
        """Subword strings; every piece not followed by a space carries ``@@``."""
        out: list[str] = []
        for word in text.split():
            if word in SPECIALS:
                out.append(word)
                continue
            segments = pretokenize(word)
            for si, seg in enumerate(segments):
                pieces = self.segment(seg)
                last_in_word = si == len(segments) - 1
                for pi, piece in enumerate(pieces):
                    glued = pi < len(pieces) - 1 or not last_in_word
                    out.append(piece + _CONT if glued else piece)
            if not segments:
                out.append(word)
        return out

    def _lookup(self, token: str) -> list[int]:
        if token in self.index:
            return [self.index[token]]
        # unseen merged piece: fall back to characters
        glued = token.endswith(_CONT)
        chars = token[: -len(_CONT)] if glued else token
        ids = []
        for i, ch in enumerate(chars):
            piece = ch + _CONT if (glued or i < len(chars) - 1) else ch
            ids.append(self.index.get(piece, self.unk_id))
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for tok in self.tokenize(text):
            ids.extend(self._lookup(tok))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id}
        words = [self.tokens[i] for i in ids if i not in skip]
        text = " ".join(words).replace(_CONT + " ", "")
        if text.endswith(_CONT):
            text = text[: -len(_CONT)]
        return text

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        lines = [f"#{VOCAB_FORMAT}", f"#merges {len(self.merges)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines.append(f"#tokens {len(self.tokens)}")
        lines += self.tokens
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != f"#{VOCAB_FORMAT}":
            raise ValueError(f"{path}: not a vocabulary file")
        n_merges = int(lines[1].split()[1])
        merges = [tuple(l.split(" ")) for l in lines[2 : 2 + n_merges]]
        header = lines[2 + n_merges]
        n_tokens = int(header.split()[1])
        tokens = lines[3 + n_merges : 3 + n_merges + n_tokens]
        return cls(tokens, merges)


def learn_bpe(corpus: Iterable[str], n_merges: int, min_frequency: int = 1) -> Vocab:
    """Learn merges on ``corpus`` and build the token inventory.

    The inventory holds the specials, every piece seen when segmenting the
    corpus, and every single character in both glued and free form.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be non-negative")
    lines = list(corpus)
    counts = segment_counts(lines)
    if not counts:
        raise ValueError("empty corpus")
    merges = learn_merges(counts, n_merges, min_frequency)
    vocab = Vocab(list(SPECIALS), merges)
    inventory: set[str] = set()
    for seg in counts:
        for ch in seg:
            inventory.update((ch, ch + _CONT))
    for line in lines:
        inventory.update(t for t in vocab.tokenize(line) if t not in SPECIALS)
    return Vocab(list(SPECIALS) + sorted(inventory), merges)


# ---------------------------------------------------------------------------
# tags


def add_target_tag(tokens: Sequence[str], task: str) -> list[str]:
    if task not in TARGET_TAGS:
        raise ValueError(f"unknown task {task!r}")
    if tokens and tokens[0] in TARGET_TAGS.values():
        raise ValueError("sentence already carries a target tag")
    return [TARGET_TAGS[task], *tokens]


def strip_target_tag(tokens: Sequence[str]) -> list[str]:
    if tokens and tokens[0] in TARGET_TAGS.values():
        return list(tokens[1:])
    return list(tokens)


def strip_segment_tags(text: str) -> str:
    return " ".join(w for w in text.split() if w not in SEGMENT_TAGS)


@dataclass
class BlockStructure:
    """Blocks of lines of text; ``well_formed`` is False for an unclosed tail or empty line."""

    blocks: list[list[str]]
    well_formed: bool = True

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def serialize(self) -> str:
        parts = []
        for i, block in enumerate(self.blocks):
            body = f" {EOL} ".join(block)
            closed = self.well_formed or i < len(self.blocks) - 1
            parts.append(f"{body} {EOB}" if closed else body)
        return " ".join(p.strip() for p in parts)

    def word_blocks(self) -> list[tuple[str, int]]:
        """(word, block index) for every whitespace word, tags removed."""
        return [(w, b) for b, block in enumerate(self.blocks) for line in block for w in line.split()]


def parse_blocks(tagged: str) -> BlockStructure:
    """``[eob]`` closes a block and ``[eol]`` closes a line inside it."""
    blocks: list[list[str]] = []
    lines: list[str] = []
    words: list[str] = []
    well_formed = True
    for tok in tagged.split():
        if tok == EOL:
            if not words:
                well_formed = False
            lines.append(" ".join(words))
            words = []
        elif tok == EOB:
            if not words:
                well_formed = False
            lines.append(" ".join(words))
            blocks.append(lines)
            lines, words = [], []
        else:
            words.append(tok)
    if words or lines:
        lines.append(" ".join(words))
        blocks.append(lines)
        well_formed = False
    return BlockStructure(blocks, well_formed)


# ---------------------------------------------------------------------------
# corpus construction


@dataclass(frozen=True)
class Triplet:
    transcript: str
    caption: str
    subtitle: str


def concat_sample(
    sentences: Sequence,
    rng: np.random.Generator,
    mean: float = 2.0,
    sigma: float = 0.75,
    min_size: int = 1,
    max_size: int = 5,
) -> list[list]:
    """Group consecutive sentences; sizes are ``round(Normal(mean, sigma))`` clamped."""
    if not sentences:
        raise ValueError("nothing to concatenate")
    groups, i = [], 0
    while i < len(sentences):
        size = int(np.clip(round(rng.normal(mean, sigma)) if sigma > 0 else round(mean), min_size, max_size))
        groups.append(list(sentences[i : i + size]))
        i += size
    return groups


def join_group(group: Sequence[str]) -> str:
    return " ".join(normalize_whitespace(s) for s in group)


def make_synthetic_triparallel(
    triplets: Sequence[Triplet],
    caption_model: Callable[[str], str],
    subtitle_model: Callable[[str], str],
) -> tuple[list[Triplet], int]:
    """Forward-translation data: each triplet yields one copy with a synthetic
    caption and one with a synthetic subtitle. Returns (data, skipped count)."""
    out: list[Triplet] = []
    skipped = 0
    for t in triplets:
        try:
            cap_hyp = caption_model(t.transcript)
            sub_hyp = subtitle_model(t.transcript)
        except (ValueError, FloatingPointError):
            skipped += 1
            continue
        out.append(Triplet(t.transcript, cap_hyp, t.subtitle))
        out.append(Triplet(t.transcript, t.caption, sub_hyp))
    return out, skipped


# -- toy task ----------------------------------------------------------------

TOY_WORDS = (
    "time write down your values objectives and key results do today take we "
    "see people world life new good small great house city water light night "
    "day friend story question answer music paper road tree river sun book "
    "school child hand work idea heart voice change place dream way song"
).split()

TOY_LEXICON = dict(zip(TOY_WORDS, (
    "temps ecrire bas vos valeurs objectifs et cle resultats faire aujourd prendre nous "
    "voir gens monde vie neuf bon petit grand maison ville eau lumiere nuit "
    "jour ami histoire question reponse musique papier route arbre fleuve soleil livre "
    "ecole enfant main travail idee coeur voix changement lieu reve chemin chanson"
).split()))

FILLERS = ("uh", "um")
LINE_WORDS = 6
BLOCK_LINES = 2

def segment_words(words: Sequence[str], line_words: int = LINE_WORDS, block_lines: int = BLOCK_LINES) -> str:
    """Insert ``[eol]``/``[eob]``: balanced lines of at most ``line_words`` words,
    blocks of at most ``block_lines`` lines."""
    n_lines = max(1, math.ceil(len(words) / line_words))
    base, extra = divmod(len(words), n_lines)
    lines, i = [], 0
    for k in range(n_lines):
        size = base + (1 if k < extra else 0)
        lines.append(" ".join(words[i : i + size]))
        i += size
    parts = []
    for b in range(0, n_lines, block_lines):
        parts.append(f" {EOL} ".join(lines[b : b + block_lines]) + f" {EOB}")
    return " ".join(parts)


def _finish(words: list[str]) -> list[str]:
    out = list(words)
    out[0] = out[0].capitalize()
    out[-1] = out[-1] + "."
    return out


def toy_triplet(words: Sequence[str], transcript_words: Sequence[str]) -> Triplet:
    caption = segment_words(_finish(list(words)))
    subtitle = segment_words(_finish([TOY_LEXICON[w] for w in words]))
    return Triplet(" ".join(transcript_words), caption, subtitle)


def remove_disfluencies(transcript: str) -> str:
    out: list[str] = []
    for w in transcript.split():
        if w in FILLERS or (out and out[-1] == w):
            continue
        out.append(w)
    return " ".join(out)


def generate_toy_corpus(
    n: int,
    rng: np.random.Generator,
    min_words: int = 3,
    max_words: int = 14,
    filler_rate: float = 0.12,
    repeat_rate: float = 0.08,
) -> list[Triplet]:
    """Synthetic tri-parallel data over a 50-word vocabulary.

    Transcripts are lowercase with inserted fillers and word repetitions;
    captions drop those, are sentence-cased, end with a period and carry
    length-based ``[eol]``/``[eob]`` tags; subtitles translate captions word by
    word through a fixed bijective lexicon with the same tag positions.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for _ in range(n):
        length = int(rng.integers(min_words, max_words + 1))
        words: list[str] = []
        while len(words) < length:
            w = TOY_WORDS[int(rng.integers(len(TOY_WORDS)))]
            if not words or words[-1] != w:
                words.append(w)
        spoken: list[str] = []
        for w in words:
            if rng.random() < filler_rate:
                spoken.append(FILLERS[int(rng.integers(len(FILLERS)))])
            spoken.append(w)
            if rng.random() < repeat_rate:
                spoken.append(w)
        out.append(toy_triplet(words, spoken))
    return out


# -- corpus files --------------------------------------------------------------

def read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_lines(path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{l}\n" for l in lines), encoding="utf-8")


def write_triparallel(prefix, triplets: Sequence[Triplet]) -> None:
    write_lines(f"{prefix}.transcript", (t.transcript for t in triplets))
    write_lines(f"{prefix}.caption", (t.caption for t in triplets))
    write_lines(f"{prefix}.subtitle", (t.subtitle for t in triplets))


def read_triparallel(prefix) -> list[Triplet]:
    cols = [read_lines(f"{prefix}.{ext}") for ext in ("transcript", "caption", "subtitle")]
    if len({len(c) for c in cols}) != 1:
        raise ValueError(f"{prefix}: tri-parallel files have different line counts")
    return [Triplet(*row) for row in zip(*cols)]
