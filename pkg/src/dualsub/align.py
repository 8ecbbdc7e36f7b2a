"""Character-level edit alignment over the (min, +) semiring, and boundary projection.

The lattice has one state per (source position, target position, previous
operation kind). Repeating the previous edit kind earns ``context_bonus``; the
replacement cost depends on the characters (case-only changes are cheaper).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

MATCH, REPLACE, DELETE, INSERT = 0, 1, 2, 3
START = 4
OP_NAMES = ("match", "replace", "delete", "insert")
_OP_CODES = {name: code for code, name in enumerate(OP_NAMES)}


@dataclass(frozen=True)
class EditWeights:
    """Operation costs. Defaults are placeholders: only their shape is principled."""

    match: float = 0.0
    insert: float = 1.0
    delete: float = 1.0
    replace: float = 1.0
    context_bonus: float = -0.25
    case_replace: float = 0.5

    def __post_init__(self):
        costs = (self.match, self.insert, self.delete, self.replace, self.case_replace, self.context_bonus)
        if not all(np.isfinite(c) for c in costs):
            raise ValueError("edit weights must be finite")
        if self.match < 0:
            raise ValueError("match cost must be non-negative")
        if any(self.match > c for c in (self.insert, self.delete, self.replace, self.case_replace)):
            raise ValueError("match must be the cheapest operation")
        # the bonus applies to repeated edits only, never to a repeated match
        if min(self.insert, self.delete, self.replace, self.case_replace) + self.context_bonus < 0:
            raise ValueError("context bonus makes an edit cost negative")

    @classmethod
    def unit(cls) -> "EditWeights":
        """Classical Levenshtein costs."""
        return cls(match=0.0, insert=1.0, delete=1.0, replace=1.0, context_bonus=0.0, case_replace=1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.match, self.replace, self.delete, self.insert, self.case_replace, self.context_bonus])


@dataclass(frozen=True)
class EditOp:
    kind: str
    src_char: str | None
    tgt_char: str | None
    cost: float


@dataclass
class EditScript:
    ops: list[EditOp] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return float(sum(op.cost for op in self.ops))

    def __len__(self) -> int:
        return len(self.ops)

    def kinds(self) -> list[str]:
        return [op.kind for op in self.ops]


def _fold(ch: str) -> str:
    low = ch.lower()
    return low if len(low) == 1 else ch


def _codes(s: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.array([ord(c) for c in s], dtype=np.int64)
    folded = np.array([ord(_fold(c)) for c in s], dtype=np.int64)
    return raw, folded


@numba.njit(cache=True)
def _lattice(src, src_f, tgt, tgt_f, w):
    """Fill cost[i, j, k]: best cost of reaching (i, j) with last op k; k=START only at (0, 0)."""
    n, m = src.shape[0], tgt.shape[0]
    inf = np.inf
    cost = np.full((n + 1, m + 1, 5), inf)
    back = np.full((n + 1, m + 1, 5), -1, dtype=np.int64)
    cost[0, 0, START] = 0.0
    w_match, w_rep, w_del, w_ins, w_case, bonus = w[0], w[1], w[2], w[3], w[4], w[5]
    for i in range(n + 1):
        for j in range(m + 1):
            for k in range(4):
                if k == MATCH or k == REPLACE:
                    if i == 0 or j == 0:
                        continue
                    pi, pj = i - 1, j - 1
                    if k == MATCH:
                        if src[pi] != tgt[pj]:
                            continue
                        step = w_match
                    else:
                        if src[pi] == tgt[pj]:
                            continue
                        step = w_case if src_f[pi] == tgt_f[pj] else w_rep
                elif k == DELETE:
                    if i == 0:
                        continue
                    pi, pj = i - 1, j
                    step = w_del
                else:
                    if j == 0:
                        continue
                    pi, pj = i, j - 1
                    step = w_ins
                best = inf
                arg = -1
                # scanning predecessors in preference order keeps the first on ties
                for p in (MATCH, REPLACE, DELETE, INSERT, START):
                    c = cost[pi, pj, p]
                    if c == inf:
                        continue
                    c = c + step
                    if p == k and k != MATCH:
                        c = c + bonus
                    if c < best:
                        best = c
                        arg = p
                cost[i, j, k] = best
                back[i, j, k] = arg
    return cost, back


def align(src: str, tgt: str, weights: EditWeights | None = None) -> EditScript:
    """Minimum-cost edit script turning ``src`` into ``tgt``.

    Ties prefer match, then replace, delete, insert.
    """
    weights = weights or EditWeights()
    s, s_f = _codes(src)
    t, t_f = _codes(tgt)
    cost, back = _lattice(s, s_f, t, t_f, weights.as_array())
    n, m = len(src), len(tgt)
    if n == 0 and m == 0:
        return EditScript([])
    final = cost[n, m, :4]
    k = int(np.argmin(final))
    w = weights.as_array()
    ops: list[EditOp] = []
    i, j = n, m
    while k != START:
        prev = int(back[i, j, k])
        if k == MATCH:
            op = EditOp("match", src[i - 1], tgt[j - 1], w[0])
            i, j = i - 1, j - 1
        elif k == REPLACE:
            case_only = _fold(src[i - 1]) == _fold(tgt[j - 1])
            op = EditOp("replace", src[i - 1], tgt[j - 1], w[4] if case_only else w[1])
            i, j = i - 1, j - 1
        elif k == DELETE:
            op = EditOp("delete", src[i - 1], None, w[2])
            i -= 1
        else:
            op = EditOp("insert", None, tgt[j - 1], w[3])
            j -= 1
        if prev == k and k != MATCH:
            op = EditOp(op.kind, op.src_char, op.tgt_char, op.cost + w[5])
        ops.append(op)
        k = prev
    ops.reverse()
    return EditScript(ops)


def alignment_cost(src: str, tgt: str, weights: EditWeights | None = None) -> float:
    """Shortest distance only, without backtrace."""
    weights = weights or EditWeights()
    s, s_f = _codes(src)
    t, t_f = _codes(tgt)
    cost, _ = _lattice(s, s_f, t, t_f, weights.as_array())
    if not src and not tgt:
        return 0.0
    return float(cost[len(src), len(tgt), :4].min())


def apply_script(script: EditScript, src: str) -> str:
    """Replay ``script`` on ``src``; raises if the script does not fit the source."""
    out = []
    i = 0
    for op in script.ops:
        if op.kind in ("match", "replace", "delete"):
            if i >= len(src) or src[i] != op.src_char:
                raise ValueError(f"script does not fit source at position {i}")
            i += 1
        if op.kind in ("match", "replace", "insert"):
            out.append(op.tgt_char)
    if i != len(src):
        raise ValueError("script leaves source characters unconsumed")
    return "".join(out)


def levenshtein_oracle(src: str, tgt: str) -> int:
    """Textbook two-row dynamic program with unit costs."""
    prev = list(range(len(tgt) + 1))
    for i, a in enumerate(src, 1):
        cur = [i]
        for j, b in enumerate(tgt, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b)))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# boundary projection


def _snap(src: str, b: int, radius: int = 2) -> int:
    if b <= 0 or b >= len(src) or src[b - 1] == " ":
        return b
    for d in range(1, radius + 1):
        for p in (b - d, b + d):
            if 0 < p <= len(src) and src[p - 1] == " ":
                return p
    return b


def project_boundaries(script: EditScript, tgt_boundaries: Sequence[int], snap: bool = False,
                       src: str | None = None) -> list[int]:
    """Map target character offsets to source offsets through an alignment.

    A target offset b maps to the source position reached when the script
    first has consumed b target characters. With ``snap`` the result moves to
    the nearest word start within two characters (``src`` is then required).
    """
    n_tgt = sum(op.kind != "delete" for op in script.ops)
    bounds = list(tgt_boundaries)
    if any(b < 0 or b > n_tgt for b in bounds):
        raise ValueError("boundary beyond target length")
    if bounds != sorted(bounds):
        raise ValueError("boundaries must be sorted")
    reached = {0: 0}
    i = j = 0
    for op in script.ops:
        if op.kind != "insert":
            i += 1
        if op.kind != "delete":
            j += 1
            reached.setdefault(j, i)
    out = [reached[b] for b in bounds]
    if snap:
        if src is None:
            raise ValueError("snapping needs the source string")
        out = [_snap(src, b) for b in out]
        for k in range(1, len(out)):
            out[k] = max(out[k], out[k - 1])
    return out


def _sentence_starts(sentences: Sequence[str]) -> list[int]:
    starts, pos = [], 0
    for s in sentences[:-1]:
        pos += len(s) + 1
        starts.append(pos)
    return starts


def subsegment(transcript: str, captions: Sequence[str], weights: EditWeights | None = None,
               snap: bool = True) -> list[str]:
    """Split one transcript line into one segment per caption sentence."""
    from .text import normalize_whitespace, strip_segment_tags

    if not captions:
        raise ValueError("empty alignment target")
    plain = [normalize_whitespace(strip_segment_tags(c)) for c in captions]
    target = " ".join(plain)
    script = align(transcript, target, weights)
    cuts = project_boundaries(script, _sentence_starts(plain), snap=snap, src=transcript)
    edges = [0] + cuts + [len(transcript)]
    return [transcript[a:b].strip() for a, b in zip(edges[:-1], edges[1:])]


def subsegment_corpus(transcripts: Iterable[str], caption_groups: Iterable[Sequence[str]],
                      weights: EditWeights | None = None, snap: bool = True) -> list[tuple[str, str]]:
    """(transcript segment, caption sentence) pairs for every group."""
    pairs = []
    for transcript, group in zip(transcripts, caption_groups, strict=True):
        segments = subsegment(transcript, group, weights, snap)
        pairs.extend(zip(segments, group))
    return pairs


# ---------------------------------------------------------------------------
# debug dump


def _show(ch: str | None) -> str:
    if ch is None:
        return "<eps>"
    return "<sp>" if ch == " " else ch


def _unshow(tok: str) -> str | None:
    return {"<eps>": None, "<sp>": " "}.get(tok, tok)


def format_script(script: EditScript) -> str:
    return "".join(f"{op.kind} {_show(op.src_char)} {_show(op.tgt_char)} {op.cost:g}\n" for op in script.ops)


def parse_script(text: str) -> EditScript:
    ops = []
    for line in text.splitlines():
        if not line.strip():
            continue
        kind, a, b, cost = line.split(" ")
        if kind not in _OP_CODES:
            raise ValueError(f"unknown edit op {kind!r}")
        ops.append(EditOp(kind, _unshow(a), _unshow(b), float(cost)))
    return EditScript(ops)
