"""Training objectives over autodiff tensors.

Class probabilities come in as a list with one ``(n, C)`` tensor per GNN
layer; per-layer losses are summed. Node losses average over labeled nodes.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diagnostics

BCE_EPS = 1e-12


@dataclass
class LossWeights:
    mu: float = 0.3
    gamma_adv: float = 0.4
    rho: float = 2.0
    entropy_coeff: float = 0.0

    def __post_init__(self):
        if min(self.mu, self.gamma_adv, self.rho, self.entropy_coeff) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class EdgeTruth:
    Y_hat: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_labels(cls, labels, unknown_label=None, include_unknown_pairs=False):
        """Same-class indicator over pairs of distinct labeled nodes.

        Nodes with label < 0 are unlabeled. Pairs of two ``unknown_label``
        nodes are masked out unless ``include_unknown_pairs``.
        """
        labels = np.asarray(labels)
        lab = labels >= 0
        Y = (labels[:, None] == labels[None, :]).astype(np.float64)
        mask = lab[:, None] & lab[None, :]
        np.fill_diagonal(mask, False)
        if unknown_label is not None and not include_unknown_pairs:
            unk = labels == unknown_label
            mask &= ~(unk[:, None] & unk[None, :])
        return cls(Y * mask, mask.astype(np.float64))


def _as_list(x):
    return x if isinstance(x, (list, tuple)) else [x]


def _true_class_probs(probs, labels, idx):
    rows = ad.take(ad.as_tensor(probs), idx)
    onehot = np.zeros(rows.shape)
    onehot[np.arange(len(idx)), labels[idx]] = 1.0
    return (rows * onehot).sum(axis=1)


def _labeled_index(labels, mask):
    labels = np.asarray(labels, dtype=int)
    mask = np.ones(len(labels), bool) if mask is None else np.asarray(mask, bool)
    return labels, np.flatnonzero(mask)


def focal_node_loss(class_probs, labels, mask=None, rho=2.0):
    """Mean over labeled nodes of ``(1-p)^rho * -log p``, summed over layers."""
    labels, idx = _labeled_index(labels, mask)
    if idx.size == 0:
        diagnostics.warn("node_loss_empty")
        return ad.Tensor(0.0)
    total = 0.0
    for probs in _as_list(class_probs):
        p = _true_class_probs(probs, labels, idx)
        term = -ad.log(p)
        if rho != 0:
            term = ad.power(1.0 - p, rho) * term
        total = total + term.mean()
    return total


def weighted_node_loss(class_probs, labels, mask, w):
    """Cross-entropy with each labeled node scaled by ``w[true class]``."""
    labels, idx = _labeled_index(labels, mask)
    if idx.size == 0:
        diagnostics.warn("node_loss_empty")
        return ad.Tensor(0.0)
    scale = np.asarray(w, dtype=np.float64)[labels[idx]]
    total = 0.0
    for probs in _as_list(class_probs):
        p = _true_class_probs(probs, labels, idx)
        total = total + (-ad.log(p) * scale).mean()
    return total


def pretrain_ce_loss(class_probs, labels):
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty batch")
    p = _true_class_probs(class_probs, labels, np.arange(labels.size))
    return (-ad.log(p)).mean()


def edge_bce_loss(edge_matrices, truth):
    """Masked-pair binary cross-entropy of the edge matrices against ``Y_hat``."""
    idx = np.flatnonzero(truth.mask.reshape(-1))
    if idx.size == 0:
        diagnostics.warn("edge_loss_empty")
        return ad.Tensor(0.0)
    y = truth.Y_hat.reshape(-1)[idx]
    total = 0.0
    for E in _as_list(edge_matrices):
        E = ad.as_tensor(E)
        if E.shape != truth.mask.shape:
            raise ad.ShapeError("edge_bce_loss", E.shape, truth.mask.shape)
        e = ad.clip(ad.take(E.reshape(-1), idx), BCE_EPS, 1.0 - BCE_EPS)
        ll = ad.log(e) * y + ad.log(1.0 - e) * (1.0 - y)
        total = total - ll.mean()
    return total


def adversarial_loss(domain_probs, domain_tags):
    """``mean_s log D + mean_t log(1 - D)``; always <= 0.

    ``domain_tags`` is 0 for source and 1 for target nodes. A missing domain
    contributes 0.
    """
    tags = np.asarray(domain_tags)
    d = ad.clip(ad.as_tensor(domain_probs), BCE_EPS, 1.0 - BCE_EPS)
    total = 0.0
    src, tgt = np.flatnonzero(tags == 0), np.flatnonzero(tags == 1)
    if src.size:
        total = total + ad.log(ad.take(d, src)).mean()
    else:
        diagnostics.warn("adversarial_missing_source")
    if tgt.size:
        total = total + ad.log(1.0 - ad.take(d, tgt)).mean()
    else:
        diagnostics.warn("adversarial_missing_target")
    return ad.as_tensor(total)


def entropy_loss(class_probs):
    """Mean Shannon entropy of the probability rows."""
    p = ad.as_tensor(class_probs)
    if p.shape[0] == 0:
        return ad.Tensor(0.0)
    return -(p * ad.log(p)).sum(axis=-1).mean()


def total_objective(parts, weights, mode="pgl"):
    """Combine loss parts by name.

    ``pgl``: ``node + mu*edge + gamma*adv``; the backbone sees the adversarial
    term with flipped sign through the gradient-reversal layer.
    ``sfpgl``: ``node + mu*edge + entropy_coeff*entropy``.
    """
    total = ad.as_tensor(parts["node"]) + weights.mu * ad.as_tensor(parts.get("edge", 0.0))
    if mode == "pgl":
        if "adv" in parts:
            total = total + weights.gamma_adv * ad.as_tensor(parts["adv"])
    elif mode == "sfpgl":
        if weights.entropy_coeff and "entropy" in parts:
            total = total + weights.entropy_coeff * ad.as_tensor(parts["entropy"])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return total
