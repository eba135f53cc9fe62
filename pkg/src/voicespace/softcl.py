"""Soft contrastive alignment losses.

``infonce_loss`` is the hard one-to-one inter-modal term. ``intra_loss`` uses
the reference speaker embeddings' own similarity structure as soft labels:
both the speaker-speaker and speaker-modality similarity rows are softmaxed,
their diagonals dropped and the remaining entries re-normalized through
``exp`` (negative disentanglement), and the two are compared with KL.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

TAU_INIT = 0.07
TAU_FLOOR = 0.01


def _as_tau(tau) -> Tensor:
    tau = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if float(np.min(tau.data)) <= 0:
        raise ContractError(f"temperature must be positive, got {tau.data}")
    return tau


def _normalize_rows(x: Tensor) -> Tensor:
    norms = T.tsum(T.square(x), axis=1)
    inv = T.exp(T.log(norms) * -0.5)
    # row scaling via the column-broadcast rule on the transpose
    return T.transpose(T.transpose(x) * inv)


def similarity(a: Tensor, b: Tensor, tau, metric: str = "dot") -> Tensor:
    """Pairwise logits sim(a_i, b_j) / tau as an N x M matrix."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"similarity needs N x d and M x d inputs, got {a.shape} and {b.shape}")
    if metric == "cosine":
        a, b = _normalize_rows(a), _normalize_rows(b)
    elif metric != "dot":
        raise ContractError(f"unknown similarity {metric!r}")
    return (a @ b.T) / _as_tau(tau)


def self_similarity(embs: Tensor, tau, metric: str = "dot") -> Tensor:
    if embs.shape[0] < 2:
        raise ContractError("self_similarity needs at least two embeddings (no negatives otherwise)")
    return T.softmax_rows(similarity(embs, embs, tau, metric))


def cross_similarity(a: Tensor, b: Tensor, tau, metric: str = "dot") -> Tensor:
    return T.softmax_rows(similarity(a, b, tau, metric))


def neg_disentangle(p: Tensor) -> Tensor:
    """Drop the diagonal of each row and re-normalize the negatives through exp."""
    if p.shape[0] < 2:
        raise ContractError("neg_disentangle needs N >= 2")
    return T.softmax_rows(T.offdiag(p))


def intra_loss(s_r: Tensor, v_m: Tensor, tau, metric: str = "dot") -> Tensor:
    if s_r.shape != v_m.shape:
        raise DimensionError(f"intra_loss shape mismatch: {s_r.shape} vs {v_m.shape}")
    if s_r.shape[0] < 2:
        raise ContractError("intra_loss needs N >= 2")
    teacher = s_r.detach()
    target = neg_disentangle(self_similarity(teacher, tau, metric))
    pred = neg_disentangle(cross_similarity(teacher, v_m, tau, metric))
    return T.kl_rows(target, pred)


def infonce_loss(v_m: Tensor, s_r: Tensor, tau, metric: str = "dot", symmetric: bool = True) -> Tensor:
    """Cross-entropy with diagonal targets, averaged over both directions."""
    if v_m.shape != s_r.shape:
        raise DimensionError(f"infonce_loss shape mismatch: {v_m.shape} vs {s_r.shape}")
    logits = similarity(v_m, s_r, tau, metric)
    rows = -T.mean(T.diag(T.log_softmax_rows(logits)))
    if not symmetric:
        return rows
    cols = -T.mean(T.diag(T.log_softmax_rows(T.transpose(logits))))
    return (rows + cols) * 0.5


def total_loss(l_cfm, l_intra, l_inter, lambda1: float, lambda2: float):
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError("loss weights must be nonnegative")
    return l_cfm + l_intra * lambda1 + l_inter * lambda2
