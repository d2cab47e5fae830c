"""
MAM-FSD Metrics
Word error rate with insertion / deletion / substitution accounting
"""

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from .base import MamFsdError


class EmptyReferenceError(MamFsdError, ValueError):
    """WER is undefined for an empty reference or an empty corpus."""


@dataclass(frozen=True)
class WerBreakdown:
    ins: int
    dels: int
    subs: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.ins + self.dels + self.subs

    @property
    def wer(self) -> float:
        """100 * (ins + del + sub) / reference length."""
        return 100.0 * self.errors / self.ref_len


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """Plain unit-cost Levenshtein distance, two-row DP."""
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i]
        for j, h in enumerate(hyp, start=1):
            current.append(min(previous[j - 1] + (r != h), previous[j] + 1, current[j - 1] + 1))
        previous = current
    return previous[-1]


def _cost_table(ref: Sequence[int], hyp: Sequence[int]) -> List[List[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def align(ref: Sequence[int], hyp: Sequence[int]) -> List[Tuple[str, int, int]]:
    """
    Minimal-cost alignment as (op, ref_index, hyp_index) steps, op in
    {"ok", "sub", "del", "ins"}. Among tied alignments the backtrace prefers
    match/substitution, then deletion, then insertion.
    """
    d = _cost_table(ref, hyp)
    i, j = len(ref), len(hyp)
    steps = []
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            steps.append(("ok" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            steps.append(("del", i - 1, -1))
            i -= 1
        else:
            steps.append(("ins", -1, j - 1))
            j -= 1
    steps.reverse()
    return steps


def wer(ref: Sequence[int], hyp: Sequence[int]) -> WerBreakdown:
    if not ref:
        raise EmptyReferenceError("WER needs a non-empty reference")
    counts = {"ok": 0, "sub": 0, "del": 0, "ins": 0}
    for op, _, _ in align(ref, hyp):
        counts[op] += 1
    return WerBreakdown(ins=counts["ins"], dels=counts["del"], subs=counts["sub"], ref_len=len(ref))


def pool(breakdowns: Iterable[WerBreakdown]) -> WerBreakdown:
    """Sum counts and reference lengths."""
    ins = dels = subs = total = 0
    seen = False
    for b in breakdowns:
        seen = True
        ins, dels, subs, total = ins + b.ins, dels + b.dels, subs + b.subs, total + b.ref_len
    if not seen:
        raise EmptyReferenceError("corpus WER needs at least one pair")
    return WerBreakdown(ins=ins, dels=dels, subs=subs, ref_len=total)


def corpus_wer(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> WerBreakdown:
    """Pooled WER: 100 * sum(edits) / sum(reference lengths), not a mean of sentence WERs."""
    return pool(wer(ref, hyp) for ref, hyp in pairs)
