"""Episode construction for initial, mix-up and source-free training.

An episode holds one labeled item per class slot (from source data or from
the pseudo-labeled target set) and ``C`` unlabeled target records. A batch
of episodes becomes one fully connected graph (:func:`episodes_to_batch`).
"""
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics
from .gnn import GraphBatch


@dataclass
class Episode:
    source_part: list = field(default_factory=list)   # (record, label)
    pseudo_part: list = field(default_factory=list)   # (record, pseudo label)
    target_part: list = field(default_factory=list)   # records

    @property
    def labeled(self):
        return self.source_part + self.pseudo_part

    def ids(self):
        return [r.id for r, _ in self.labeled] + [r.id for r in self.target_part]


def _draw(pool, used, rng):
    """Random record from ``pool`` whose id is not in ``used``; None if exhausted."""
    if not pool:
        return None
    start = int(rng.integers(len(pool)))
    for k in range(len(pool)):
        rec = pool[(start + k) % len(pool)]
        if rec.id not in used:
            return rec
    return None


def _labeled_pools(source, C, labeled_target=None):
    pools = {c: [] for c in range(C)}
    for r in source:
        pools[r.label].append(r)
    for r in labeled_target or ():
        if 0 <= r.label < C:
            pools[r.label].append(r)
    for c, pool in pools.items():
        if not pool:
            raise ValueError(f"class {c} has no labeled source samples")
    return pools


def _target_part(target, C, used, rng):
    picked = []
    for j in rng.permutation(len(target)):
        rec = target[int(j)]
        if rec.id not in used:
            picked.append(rec)
            used.add(rec.id)
            if len(picked) == C:
                return picked
    raise ValueError(f"target set too small for {C} unlabeled slots")


def build_batch_initial(source, target, C, B, rng, labeled_target=None):
    """``B`` episodes with one labeled sample per class and ``C`` target samples.

    ``labeled_target`` (semi-supervised setting) adds labeled target records
    to the per-class pools.
    """
    if len(target) < C:
        raise ValueError("target set smaller than C")
    pools = _labeled_pools(source, C, labeled_target)
    episodes = []
    for _ in range(B):
        used, ep = set(), Episode()
        for c in range(C):
            rec = pools[c][int(rng.integers(len(pools[c])))]
            ep.source_part.append((rec, c))
            used.add(rec.id)
        ep.target_part = _target_part(target, C, used, rng)
        episodes.append(ep)
    return episodes


def build_batch_mixup(source, pseudo_known, target, C, B, m, alpha, rng, labeled_target=None):
    """Like :func:`build_batch_initial`, but each class slot is taken from the
    pseudo-labeled set with probability ``m * alpha``.

    ``pseudo_known`` maps class -> list of pseudo-labeled target records. An
    empty pseudo class falls back to source (counted as ``mixup_fallback``).
    """
    if len(target) < C:
        raise ValueError("target set smaller than C")
    pools = _labeled_pools(source, C, labeled_target)
    p_replace = min(1.0, max(0.0, m * alpha))
    episodes = []
    for _ in range(B):
        used, ep = set(), Episode()
        for c in range(C):
            rec = None
            if rng.random() < p_replace:
                rec = _draw(pseudo_known.get(c, []), used, rng)
                if rec is None:
                    diagnostics.warn("mixup_fallback")
                else:
                    ep.pseudo_part.append((rec, c))
            if rec is None:
                rec = _draw(pools[c], used, rng)
                ep.source_part.append((rec, c))
            used.add(rec.id)
        ep.target_part = _target_part(target, C, used, rng)
        episodes.append(ep)
    return episodes


def build_batch_sfpgl(pseudo_known, target, C, B, rng):
    """Episodes drawn from pseudo-labeled and unlabeled target data only.

    A class with no pseudo-labeled samples has its slot filled from another
    non-empty class (counted as ``sfpgl_slot_shortfall``).
    """
    nonempty = [c for c in range(C) if pseudo_known.get(c)]
    if not nonempty:
        raise ValueError("pseudo-labeled known set is empty")
    if len(target) < C:
        raise ValueError("target set smaller than C")
    episodes = []
    for _ in range(B):
        used, ep = set(), Episode()
        for c in range(C):
            rec, label = _draw(pseudo_known.get(c, []), used, rng), c
            if rec is None:
                diagnostics.warn("sfpgl_slot_shortfall")
                for k in rng.permutation(len(nonempty)):
                    label = nonempty[int(k)]
                    rec = _draw(pseudo_known[label], used, rng)
                    if rec is not None:
                        break
            if rec is None:
                raise ValueError("pseudo-labeled set too small to fill an episode")
            ep.pseudo_part.append((rec, label))
            used.add(rec.id)
        ep.target_part = _target_part(target, C, used, rng)
        episodes.append(ep)
    return episodes


def episodes_to_batch(episodes):
    """Stack episodes into one graph: per episode, labeled nodes then unlabeled."""
    X, labels, domain, ids = [], [], [], []
    for ep in episodes:
        for rec, y in ep.labeled:
            X.append(rec.features)
            labels.append(y)
            domain.append(0 if rec.domain == "source" else 1)
            ids.append(rec.id)
        for rec in ep.target_part:
            X.append(rec.features)
            labels.append(-1)
            domain.append(1)
            ids.append(rec.id)
    return GraphBatch(np.stack(X), np.array(labels, dtype=int), np.array(domain, dtype=int), ids)
