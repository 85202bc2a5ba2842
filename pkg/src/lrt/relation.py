"""Text-derived relation graph, graph transfer of visual prototypes, fused scoring."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DomainError
from .numerics import Tensor
from .numerics import _kernels as K

MODES = ("full", "visual-only", "zero-shot", "fusion-only", "graph-only", "static-tau", "proto-add")


def check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass
class RelationGraph:
    A: np.ndarray
    A_tilde: np.ndarray
    D_tilde: np.ndarray  # diagonal entries only
    norm: np.ndarray

    @property
    def n(self):
        return self.A.shape[0]


def text_adjacency(T) -> RelationGraph:
    """Cosine adjacency of the text prototypes and its symmetric normalisation."""
    T = np.ascontiguousarray(T.data if isinstance(T, Tensor) else T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] == 0:
        raise ContractError("text_adjacency expects a non-empty (|C|, D_T) matrix")
    zero = np.flatnonzero(~T.any(axis=1))
    if zero.size:
        raise DomainError(f"text prototype of class row {int(zero[0])} is the zero vector")
    A = K.pairwise_cosine(T, T)
    A = 0.5 * (A + A.T)  # exact symmetry
    np.fill_diagonal(A, 1.0)
    A_tilde = A + np.eye(len(A))
    d = A_tilde.sum(axis=1)
    bad = np.flatnonzero(d <= 0.0)
    if bad.size:
        raise DomainError(f"degree of class row {int(bad[0])} is not positive ({d[bad[0]]:.3g})")
    s = 1.0 / np.sqrt(d)
    norm = s[:, None] * A_tilde * s[None, :]
    return RelationGraph(A, A_tilde, d, 0.5 * (norm + norm.T))


@dataclass
class FusionHead:
    W_v: Tensor
    tau: Tensor

    @classmethod
    def init(cls, d_v, tau=1.0):
        return cls(nx.parameter(np.eye(d_v), "W_v"), nx.parameter(np.asarray(tau), "tau"))

    def set_trainable(self, flag, tau_flag=None):
        self.W_v.requires_grad = flag
        self.tau.requires_grad = flag if tau_flag is None else tau_flag

    def parameters(self):
        return {"W_v": self.W_v, "tau": self.tau}


def graph_transfer(V, g: RelationGraph, W_v):
    """``ReLU(norm @ V @ W_v)``."""
    V, W_v = nx.as_tensor(V), nx.as_tensor(W_v)
    if V.ndim != 2 or V.shape[0] != g.n or W_v.shape != (V.shape[1], V.shape[1]):
        raise ContractError(f"graph_transfer: V {V.shape}, graph over {g.n} classes, W_v {W_v.shape}")
    return nx.relu(nx.matmul(nx.matmul(Tensor(g.norm), V), W_v))


def _check_rows(name, M):
    data = M.data if isinstance(M, Tensor) else np.asarray(M)
    zero = np.flatnonzero(~data.reshape(len(data), -1).any(axis=1))
    if zero.size:
        raise DomainError(f"{name} row {int(zero[0])} has zero norm")


def fused_logits(feature, T, U, tau):
    """``tau * cos(feature, T_i) + cos(feature, U_i)`` for one feature or a batch."""
    _check_rows("text prototype", T)
    _check_rows("transferred prototype", U)
    return nx.add(nx.mul(tau, nx.cosine_matrix(feature, T)), nx.cosine_matrix(feature, U))


def fused_scores(feature, T, U, tau, scale=1.0):
    """Class probabilities from the fused text/graph logits."""
    return nx.softmax(nx.mul(scale, fused_logits(feature, T, U, tau)))


def zero_shot_scores(feature, T, scale=1.0):
    _check_rows("text prototype", T)
    return nx.softmax(nx.mul(scale, nx.cosine_matrix(feature, T)))


def mode_logits(mode, feature, V, T, graph, head: FusionHead):
    """Per-class similarity logits of an ablation mode, plus their cosine-range version.

    The second value feeds the margin loss: for the two-source modes it is the
    fused logit divided by ``1 + tau``, which lies in [-1, 1] for ``tau >= 0``.
    """
    check_mode(mode)
    if mode == "visual-only":
        c = nx.cosine_matrix(feature, V)
        return c, c
    if mode == "zero-shot":
        c = nx.cosine_matrix(feature, T)
        return c, c
    if mode == "proto-add":
        c = nx.cosine_matrix(feature, nx.add(nx.l2_normalize(V), T))
        return c, c
    U = V if mode == "fusion-only" else graph_transfer(V, graph, head.W_v)
    if mode == "graph-only":
        c = nx.cosine_matrix(feature, U)
        return c, c
    logits = fused_logits(feature, T, U, head.tau)
    return logits, nx.div(logits, nx.add(1.0, head.tau))
