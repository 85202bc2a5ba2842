"""Training objectives: cross-entropy, angular-margin CE, imagined contrastive and prompt losses."""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor

EPS = 1e-12
CLAMP = 1e-7
NEGATIVE_RULES = ("pair", "strict", "batch")
_MASKED = -1e30


@dataclass
class LossWeights:
    lambda_m: float = 0.1
    lambda_im: float = 0.05
    margin: float = 0.4
    scale: float = 1.0

    def validate(self):
        for name in ("lambda_m", "lambda_im", "margin", "scale"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite non-negative float, got {v}")
        if self.margin >= math.pi / 2:
            raise ConfigError("margin must be below pi/2")
        return self


def _labels(probs, label):
    if probs.ndim == 1:
        return int(label)
    lab = np.asarray(label, dtype=np.intp)
    if lab.shape != (probs.shape[0],):
        raise ContractError("need one label per row")
    return lab


def ce_loss(probs, label):
    """``-log p[label]`` with a 1e-12 floor; rows are averaged for a batch."""
    probs = nx.as_tensor(probs)
    p = nx.pick(probs, _labels(probs, label))
    return nx.mean(nx.neg(nx.log(nx.clip(p, EPS, 1.0))))


def softmax_ce(logits, label):
    return ce_loss(nx.softmax(logits), label)


def margin_ce_loss(cosines, label, s=1.0, m=0.4):
    """Additive angular margin on the true class: ``cos(arccos(c_y) + m)`` replaces ``c_y``.

    Cosines are clamped into [-1 + 1e-7, 1 - 1e-7] before ``arccos``.
    """
    cosines = nx.as_tensor(cosines)
    lab = _labels(cosines, label)
    n = cosines.shape[-1]
    if cosines.ndim == 1:
        onehot = np.zeros(n)
        onehot[lab] = 1.0
    else:
        onehot = np.zeros(cosines.shape)
        onehot[np.arange(len(lab)), lab] = 1.0
    c = nx.clip(cosines, -1.0 + CLAMP, 1.0 - CLAMP)
    if m == 0.0:
        shifted = c
    else:
        target = nx.cos(nx.add(nx.arccos(c), m))
        shifted = nx.add(nx.mul(Tensor(onehot), target), nx.mul(Tensor(1.0 - onehot), c))
    return softmax_ce(nx.mul(s, shifted), lab)


def negative_mask(pairs, rule="pair"):
    """Boolean (B, B) matrix: entry (k, l) is True when text mixture l enters row k's denominator.

    ``pair``: every other ordered class pair; ``strict``: both classes differ;
    ``batch``: every row of the batch, duplicates of the positive included.
    """
    if rule not in NEGATIVE_RULES:
        raise ConfigError(f"unknown negative rule {rule!r}; expected one of {NEGATIVE_RULES}")
    P = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(P[:, 0] == P[:, 1]):
        raise ContractError("imagined pairs need two different classes")
    same_i = P[:, None, 0] == P[None, :, 0]
    same_j = P[:, None, 1] == P[None, :, 1]
    if rule == "batch":
        allowed = np.ones((len(P), len(P)), dtype=bool)
    elif rule == "pair":
        allowed = ~(same_i & same_j)
    else:
        allowed = ~same_i & ~same_j
    np.fill_diagonal(allowed, True)
    return allowed


def imagined_contrastive_loss(mixed_features, mixed_text, pairs, rule="pair", scale=1.0):
    """InfoNCE between CutMix features and concatenated-prompt text embeddings.

    ``mixed_features`` (B, D_V) and ``mixed_text`` (B, D_T) are row-aligned with ``pairs``.
    The positive of row k is text row k; negatives follow ``rule``.
    """
    mixed_features = nx.as_tensor(mixed_features)
    mixed_text = nx.as_tensor(mixed_text)
    B = len(pairs)
    if B < 1 or mixed_features.shape[0] != B or mixed_text.shape[0] != B:
        raise ContractError("imagined_contrastive_loss needs B >= 1 aligned rows")
    allowed = negative_mask(pairs, rule)
    sims = nx.mul(scale, nx.cosine_matrix(mixed_features, mixed_text))
    logits = nx.add(sims, Tensor(np.where(allowed, 0.0, _MASKED)))
    return ce_loss(nx.softmax(logits), np.arange(B))


def sample_pairs(labels, rng):
    """floor(B/2) disjoint (i, j) class pairs from a shuffled batch, i != j.

    Returns an index array of shape (n_pairs, 2) into ``labels``; pairs whose
    classes collide are repaired by resampling a partner with a different label.
    """
    labels = np.asarray(labels)
    order = rng.permutation(len(labels))
    half = len(labels) // 2
    left, right = order[:half], order[half:2 * half].copy()
    for k in range(half):
        if labels[left[k]] == labels[right[k]]:
            cand = np.flatnonzero(labels != labels[left[k]])
            if cand.size == 0:
                raise ContractError("imagined pairs need at least two classes in the batch")
            right[k] = cand[rng.integers(cand.size)]
    return np.stack([left, right], axis=1)


def context_prompt_loss(features, labels, text_protos, tau=1.0, scale=1.0):
    """Cross-entropy of ``softmax(scale * tau * cos(feature, T))`` over the seen classes.

    ``labels`` index rows of ``text_protos``; only tensors on the tape with
    ``requires_grad`` (the current-session prompts) receive gradients.
    """
    logits = nx.mul(float(scale) * float(np.asarray(getattr(tau, "data", tau))),
                    nx.cosine_matrix(features, text_protos))
    return softmax_ce(logits, labels)


def base_loss(ce, mce, im, weights: LossWeights):
    """``ce + lambda_m * mce + lambda_im * im``; accepts tensors or plain floats."""
    return nx.add(nx.add(ce, nx.mul(weights.lambda_m, mce)), nx.mul(weights.lambda_im, im))
