"""
MAM-FSD CTC
Log-space forward-backward loss, greedy decoding and prefix beam search

Class 0 is the blank; gloss ids are 1-based.
"""

from collections import OrderedDict
from typing import List, Sequence, Tuple, Union

import numpy as np

from .base import ConfigError, InfeasibleLabelError, ShapeError
from .tensor import ACCUM, Function, Tensor

BLANK = 0
NEG_INF = -np.inf

LogProbs = Union[Tensor, np.ndarray]


def _as_array(logprobs: LogProbs) -> np.ndarray:
    array = logprobs.data if isinstance(logprobs, Tensor) else np.asarray(logprobs)
    if array.ndim != 2 or array.shape[0] == 0 or array.shape[1] < 2:
        raise ShapeError(f"logprobs must be [T', V + 1] with T' >= 1 and V >= 1, got {list(array.shape)}")
    return array.astype(ACCUM)


# ============================================================================
# LABELS
# ============================================================================

def extend_label(label: Sequence[int]) -> List[int]:
    """Blank-interleaved label of length 2U + 1; even positions hold blanks."""
    extended = [BLANK]
    for gloss in label:
        extended.extend((gloss, BLANK))
    return extended


def min_steps(label: Sequence[int]) -> int:
    """Fewest steps that can emit ``label``: one per gloss plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def check_label(label: Sequence[int], steps: int, num_classes: int) -> None:
    for gloss in label:
        if not 1 <= gloss < num_classes:
            raise InfeasibleLabelError(f"gloss id {gloss} outside 1..{num_classes - 1}")
    needed = min_steps(label)
    if needed > steps:
        raise InfeasibleLabelError(f"label of length {len(label)} needs {needed} steps, only {steps} available")


# ============================================================================
# LOSS
# ============================================================================

def _skip_mask(extended: List[int]) -> np.ndarray:
    """True at s where the s-2 -> s transition is allowed (non-blank, not a repeat)."""
    skip = np.zeros(len(extended), dtype=bool)
    for s in range(2, len(extended)):
        skip[s] = extended[s] != BLANK and extended[s] != extended[s - 2]
    return skip


def forward_backward(lp: np.ndarray, label: Sequence[int]) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Log-space alpha/beta lattices.

    alpha[t, s] includes the emission at t; beta[t, s] covers steps t+1..T'-1
    only, so log P = logsumexp_s(alpha[t, s] + beta[t, s]) for every t.

    Returns (log P, alpha, beta).
    """
    steps = lp.shape[0]
    ext = extend_label(label)
    width = len(ext)
    skip = _skip_mask(ext)
    emit = lp[:, ext]

    alpha = np.full((steps, width), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if width > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, steps):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    beta = np.full((steps, width), NEG_INF)
    beta[-1, -1] = 0.0
    if width > 1:
        beta[-1, -2] = 0.0
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b

    log_p = alpha[-1, -1] if width == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return float(log_p), alpha, beta


class CTCLoss(Function):
    def forward(self, lp, label=()):
        log_p, alpha, beta = forward_backward(lp, label)
        self.saved = (log_p, alpha, beta, extend_label(label), lp.shape)
        return np.asarray(-log_p)

    def backward(self, g):
        log_p, alpha, beta, ext, shape = self.saved
        occupancy = np.exp(alpha + beta - log_p)
        grad = np.zeros(shape, dtype=ACCUM)
        np.add.at(grad, (slice(None), ext), occupancy)
        return (-g * grad,)


def ctc_loss(logprobs: Tensor, label: Sequence[int]) -> Tensor:
    """
    -log sum over all alignments of ``label`` to ``logprobs`` [T', V + 1].

    Raises:
        InfeasibleLabelError: label ids out of range or too long for T'
    """
    array = _as_array(logprobs)
    label = tuple(int(g) for g in label)
    check_label(label, array.shape[0], array.shape[1])
    return CTCLoss.apply(logprobs, label=label)


def ctc_nll(logprobs: LogProbs, label: Sequence[int]) -> float:
    """ctc_loss on plain arrays, no graph."""
    array = _as_array(logprobs)
    label = tuple(int(g) for g in label)
    check_label(label, array.shape[0], array.shape[1])
    return -forward_backward(array, label)[0]


def labeling_logprob(logprobs: LogProbs, label: Sequence[int]) -> float:
    """log P(label | logprobs); -inf when the label cannot fit."""
    try:
        return -ctc_nll(logprobs, label)
    except InfeasibleLabelError:
        return float(NEG_INF)


# ============================================================================
# DECODING
# ============================================================================

def collapse(path: Sequence[int]) -> List[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return out


def greedy_decode(logprobs: LogProbs) -> List[int]:
    """Per-step argmax (ties to the lowest id), collapsed."""
    return collapse(np.argmax(_as_array(logprobs), axis=1).tolist())


def _rank_key(item):
    prefix, (pb, pnb) = item
    return (-np.logaddexp(pb, pnb), prefix)


def beam_search(logprobs: LogProbs, width: int = 10) -> Tuple[List[int], float]:
    """
    CTC prefix beam search.

    Each prefix carries (log p_blank, log p_nonblank): the mass of all paths
    so far that collapse to the prefix and end in a blank / in its last gloss.
    After every step the ``width`` most probable prefixes survive, ties broken
    by lexicographic prefix order.

    Returns the best surviving labeling and its accumulated log-probability.
    """
    if width < 1:
        raise ConfigError(f"beam width must be at least 1, got {width}")
    lp = _as_array(logprobs)
    beams = OrderedDict({(): (0.0, NEG_INF)})
    for t in range(lp.shape[0]):
        row = lp[t]
        nxt = OrderedDict()

        def extend(prefix, blank_mass, nonblank_mass):
            pb, pnb = nxt.get(prefix, (NEG_INF, NEG_INF))
            nxt[prefix] = (np.logaddexp(pb, blank_mass), np.logaddexp(pnb, nonblank_mass))

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            extend(prefix, total + row[BLANK], NEG_INF)
            for k in range(1, lp.shape[1]):
                if prefix and prefix[-1] == k:
                    # repeat folds into the prefix unless a blank separates it
                    extend(prefix, NEG_INF, pnb + row[k])
                    extend(prefix + (k,), NEG_INF, pb + row[k])
                else:
                    extend(prefix + (k,), NEG_INF, total + row[k])
        beams = OrderedDict(sorted(nxt.items(), key=_rank_key)[:width])

    best, (pb, pnb) = min(beams.items(), key=_rank_key)
    return list(best), float(np.logaddexp(pb, pnb))


def beam_decode(logprobs: LogProbs, width: int = 10) -> List[int]:
    return beam_search(logprobs, width)[0]
