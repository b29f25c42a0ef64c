"""Progressive pseudo-labeling: global ranking and balanced per-class label banks.

Target samples are identified by their position ``0..n_t-1``; string ids
only enter as the tie-breaker of the confidence ranking.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics

UNKNOWN = "UNK"


@dataclass
class PseudoLabelState:
    alpha: float
    beta: float
    C: int
    m: int = 0
    known: dict = field(default_factory=dict)      # sample index -> pseudo class
    unknown: set = field(default_factory=set)
    gamma: np.ndarray = None
    weights: np.ndarray = None
    shortfall: np.ndarray = None
    freeze: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.C < 1:
            raise ValueError("need at least one known class")

    @property
    def M(self):
        return max(1, round(1.0 / self.alpha))

    def fraction(self, m):
        """Share of the target set labeled after ``m`` steps (exactly 1 at ``m == M``)."""
        return 1.0 if m >= self.M else self.alpha * m

    def labeled_count(self):
        return len(self.known) + len(self.unknown)

    def per_class_counts(self):
        return np.bincount(np.fromiter(self.known.values(), int, len(self.known)), minlength=self.C)


def rank_ascending(confidence, ids=None):
    """Indices sorted by confidence ascending, ties broken by id."""
    confidence = np.asarray(confidence, dtype=np.float64)
    n = confidence.shape[0]
    if ids is None:
        ids = [f"{i:012d}" for i in range(n)]
    tie = np.argsort(np.array(ids, dtype=object), kind="stable")
    tie_rank = np.empty(n, int)
    tie_rank[tie] = np.arange(n)
    return np.lexsort((tie_rank, confidence))


def quotas(state, m_next, n_t):
    """``(n_unknown, n_known)`` after ``m_next`` steps of global ranking."""
    f = state.fraction(m_next)
    n_lab = round(f * n_t)
    n_unk = round(state.beta * f * n_t)
    return n_unk, n_lab - n_unk


def _check_inputs(state, confidence, n_t):
    if state.m >= state.M:
        raise ValueError(f"already at final step m={state.m} (M={state.M})")
    if len(confidence) != n_t:
        raise ValueError(f"{len(confidence)} confidences for n_t={n_t}")


def global_rank_select(confidence, predicted, state, ids=None):
    """Advance ``state`` by one step using the global confidence ranking.

    The lowest-ranked samples become unknown and the highest-ranked become
    known with their argmax class. By default every step re-ranks the whole
    target set; with ``state.freeze`` earlier assignments are kept and only
    the quota increment is drawn from unassigned samples.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=int)
    n_t = len(confidence)
    _check_inputs(state, confidence, n_t)
    n_unk, n_known = quotas(state, state.m + 1, n_t)
    if n_unk + n_known > n_t:
        raise ValueError("pseudo-label quota exceeds the target set")
    order = rank_ascending(confidence, ids)

    if state.freeze:
        unknown, known = set(state.unknown), dict(state.known)
        free = [i for i in order if i not in unknown and i not in known]
        add_u = max(0, n_unk - len(unknown))
        add_k = max(0, n_known - len(known))
        unknown.update(int(i) for i in free[:add_u])
        rest = free[add_u:]
        for i in rest[len(rest) - add_k:] if add_k else []:
            known[int(i)] = int(predicted[i])
    else:
        unknown = {int(i) for i in order[:n_unk]}
        known = {int(i): int(predicted[i]) for i in order[n_t - n_known:]} if n_known else {}
    state.unknown, state.known = unknown, known
    state.m += 1
    return state


def bank_capacity(alpha, m, n_t, C, beta=0.0):
    """Per-class bank size ``floor((1-beta) * alpha * m * n_t / C)``."""
    if C < 1:
        raise ValueError("C must be >= 1")
    return int(math.floor((1.0 - beta) * alpha * m * n_t / C + 1e-9))


def balanced_select(confidence, predicted, state, ids=None, capacity=None):
    """Advance ``state`` by one step with per-class label banks.

    Each class bank takes its highest-confidence candidates up to the
    capacity; ``gamma[c]`` is the lowest admitted confidence (1 for an empty
    bank). Unknowns are the globally least confident non-bank samples.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=int)
    n_t, C = len(confidence), state.C
    _check_inputs(state, confidence, n_t)
    f = state.fraction(state.m + 1)
    cap = bank_capacity(f, 1, n_t, C, state.beta) if capacity is None else int(capacity)
    order = rank_ascending(confidence, ids)
    rank_pos = np.empty(n_t, int)
    rank_pos[order] = np.arange(n_t)

    known, gamma, shortfall = {}, np.ones(C), np.zeros(C, int)
    for c in range(C):
        cand = np.flatnonzero(predicted == c)
        cand = cand[np.argsort(-rank_pos[cand])]
        bank = cand[:cap]
        shortfall[c] = cap - len(bank)
        if len(bank):
            gamma[c] = confidence[bank].min()
        known.update((int(i), c) for i in bank)
    if shortfall.any():
        diagnostics.warn("bank_shortfall", None, int(shortfall.sum()))

    n_unk = round(state.beta * f * n_t)
    unknown = set()
    for i in order:
        if len(unknown) >= n_unk:
            break
        if int(i) not in known:
            unknown.add(int(i))
    state.known, state.unknown = known, unknown
    state.gamma, state.shortfall = gamma, shortfall
    state.weights = class_weights(gamma)
    state.m += 1
    return state


def class_weights(gamma):
    """``softmax(1 - gamma)``: classes admitted at lower confidence weigh more."""
    z = 1.0 - np.asarray(gamma, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def finalize_predictions(state, confidence, predicted, ids=None):
    """Open-set prediction per sample; unknown is encoded as ``state.C``.

    Assigned samples keep their pseudo-label. The unassigned residue is split
    by the same ascending ranking: its lowest ``beta`` share becomes unknown,
    the rest takes the argmax class.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    out = np.asarray(predicted, dtype=int).copy()
    for i, c in state.known.items():
        out[i] = c
    for i in state.unknown:
        out[i] = state.C
    residue = np.array([i for i in rank_ascending(confidence, ids)
                        if i not in state.known and i not in state.unknown], dtype=int)
    n_unk = round(state.beta * len(residue))
    out[residue[:n_unk]] = state.C
    return out


def snapshot_lines(state, confidence, ids):
    """``id<TAB>assignment<TAB>confidence`` for every assigned sample, in id order."""
    lines = []
    for i in sorted(set(state.known) | state.unknown, key=lambda k: ids[k]):
        label = UNKNOWN if i in state.unknown else str(state.known[i])
        lines.append(f"{ids[i]}\t{label}\t{float(confidence[i])!r}")
    return lines
