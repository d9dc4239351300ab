"""Multi-similarity losses with an optional neutral relation.

For each anchor ``i`` of a batch of ``BS`` unit embeddings the loss is::

    1/alpha * log(1 + sum_{k pos, k != i} exp(-alpha (S_ik - lam)))
  + 1/beta  * log(1 + sum_{k neg}         exp( beta (S_ik - lam)))

averaged over anchors. Neutral pairs (distinct but overlapping regions)
appear in neither sum. The negative term uses ``+beta``: high similarity
to a negative is what gets penalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..geodesy import Relation


@dataclass(frozen=True)
class LossParams:
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def similarity_matrix(E) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError(f"expected a (batch, dim) array, got shape {E.shape}")
    return E @ E.T


def _relation_codes(relations) -> np.ndarray:
    rel = np.asarray(relations)
    if rel.dtype == object:
        rel = np.vectorize(lambda r: int(Relation(r)), otypes=[np.int8])(rel)
    rel = rel.astype(np.int8)
    if not np.isin(rel, (-1, 0, 1)).all():
        raise ValueError("relation codes must be -1, 0 or 1")
    return rel


def _check(S, rel):
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {S.shape}")
    if rel.shape != S.shape:
        raise ValueError(f"relations {rel.shape} do not match similarities {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("similarity matrix has non-finite entries")


def na_ms_loss(S, relations, params: LossParams = LossParams()):
    """Neutral-aware multi-similarity loss and its gradient ``dL/dS``.

    ``relations`` holds :class:`Relation` codes (1 positive, 0 neutral,
    -1 negative). The gradient treats every ``S_ik`` as an independent
    variable; use :func:`chain_grad_to_embeddings` to push it back.
    """
    S = np.ascontiguousarray(S, dtype=np.float64)
    rel = np.ascontiguousarray(_relation_codes(relations))
    _check(S, rel)
    if S.shape[0] == 0:
        return 0.0, np.zeros_like(S)
    loss, grad = kernels.ms_loss_grad(S, rel, float(params.alpha), float(params.beta), float(params.lam))
    return float(loss), grad


def label_relations(labels) -> np.ndarray:
    """Positive for equal labels, negative otherwise (no neutral case)."""
    ids: dict = {}
    inv = np.array([ids.setdefault(lab, len(ids)) for lab in labels], dtype=np.int64)
    return np.where(inv[:, None] == inv[None, :], Relation.POSITIVE, Relation.NEGATIVE).astype(np.int8)


def ms_loss(S, labels, params: LossParams = LossParams()):
    """Plain multi-similarity loss: every other-label pair is a negative."""
    return na_ms_loss(S, label_relations(labels), params)


def chain_grad_to_embeddings(grad_S, E, pre_norm=None) -> np.ndarray:
    """Back-propagate ``dL/dS`` through ``S = E E^T``.

    When ``pre_norm`` (the vectors before L2 normalization) is given the
    result is the gradient with respect to those, i.e. projected through
    the normalization Jacobian ``(I - e e^T) / |z|``.
    """
    G = np.asarray(grad_S, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if G.shape != (E.shape[0], E.shape[0]):
        raise ValueError(f"gradient {G.shape} does not match {E.shape[0]} embeddings")
    dE = (G + G.T) @ E
    if pre_norm is None:
        return dE
    Z = np.asarray(pre_norm, dtype=np.float64)
    if Z.shape != E.shape:
        raise ValueError("pre_norm must have the embeddings' shape")
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    radial = np.sum(dE * E, axis=1, keepdims=True)
    return (dE - radial * E) / norms
