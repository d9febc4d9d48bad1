"""In-batch contrastive objective with exact analytic gradients.

Loss over a batch of B aligned (query, positive) embedding pairs:

    L = -(1/B) * sum_i log( exp(cos(q_i, c_i)/tau) / sum_j exp(cos(q_i, c_j)/tau) )

Gradients are taken with respect to the raw (pre-normalization) row
vectors, composing the softmax gradient with the normalization Jacobian
(I - u u^T)/||v||, so the result chains directly onto an encoder whose
last step is L2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidTemperature, ZeroVector


@dataclass
class ContrastiveBatch:
    """Row-aligned query/positive matrices plus temperature.

    Rows are typically unit-norm encoder outputs, but any nonzero rows
    are accepted; cosines are computed from explicitly normalized rows.
    """

    queries: np.ndarray  # (B, d)
    candidates: np.ndarray  # (B, d)
    tau: float = 0.07

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        if self.queries.ndim != 2 or self.candidates.ndim != 2:
            raise DimensionMismatch("queries and candidates must be 2-D")
        if self.queries.shape != self.candidates.shape:
            raise DimensionMismatch(
                f"shape mismatch: {self.queries.shape} vs {self.candidates.shape}"
            )
        if self.queries.shape[0] < 1:
            raise ValueError("batch must contain at least one pair")
        if not (0.0 < self.tau <= 10.0):
            raise InvalidTemperature(f"tau must be in (0, 10], got {self.tau}")


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVector("zero-norm row in contrastive batch")
    return m / norms, norms


def similarity_matrix(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """S[i][j] = cosine(q_i, c_j)."""
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {q.shape} and {c.shape}")
    uq, _ = _unit_rows(q)
    uc, _ = _unit_rows(c)
    return uq @ uc.T


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def info_nce(batch: ContrastiveBatch, symmetric: bool = False) -> float:
    """Mean negative log-likelihood of each positive under the row softmax.

    symmetric=True averages in the candidate->query direction as well;
    the default matches the single-direction objective.
    """
    s = similarity_matrix(batch.queries, batch.candidates)
    logits = s / batch.tau
    b = s.shape[0]
    loss = -np.trace(_log_softmax_rows(logits)) / b
    if symmetric:
        loss = 0.5 * (loss + -np.trace(_log_softmax_rows(logits.T)) / b)
    return float(loss)


def info_nce_grad(batch: ContrastiveBatch, symmetric: bool = False):
    """Analytic (dL/dQ, dL/dC) with respect to the raw input rows."""
    q, c = batch.queries, batch.candidates
    uq, qn = _unit_rows(q)
    uc, cn = _unit_rows(c)
    b = q.shape[0]
    logits = (uq @ uc.T) / batch.tau
    p = np.exp(_log_softmax_rows(logits))
    ds = (p - np.eye(b)) / (b * batch.tau)
    if symmetric:
        pt = np.exp(_log_softmax_rows(logits.T))
        ds = 0.5 * (ds + ((pt - np.eye(b)) / (b * batch.tau)).T)
    du = ds @ uc
    dv = ds.T @ uq
    # chain through row normalization: (I - u u^T)/||v|| applied row-wise
    dq = (du - uq * (du * uq).sum(axis=1, keepdims=True)) / qn
    dc = (dv - uc * (dv * uc).sum(axis=1, keepdims=True)) / cn
    return dq, dc
