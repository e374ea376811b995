"""Loss terms: stabilized softmax cross-entropy with its output delta, the
factor-alignment loss, the orthogonality regularizer, the Hoyer sparsity
measure on singular values, and the weighted composite.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class LossWeights(NamedTuple):
    alpha: float = 1.0
    beta: float = 1e-3
    gamma: float = 1e-4
    lambda_hoyer: float = 1e-3

    def validate(self):
        for name, val in self._asdict().items():
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {val}")
        return self


def ce_loss_and_delta(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and the per-sample output delta
    softmax(logits) - one_hot(label)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"expected a non-empty (batch, classes) array, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("labels out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    rows = np.arange(logits.shape[0])
    loss = float(-log_probs[rows, labels].mean())
    delta = exp / z
    delta[rows, labels] -= 1.0
    return loss, delta


def alignment_loss(fw, bu: np.ndarray, bs: np.ndarray, bvt: np.ndarray) -> float:
    """||U - B_U||_F^2 + ||s - b_s||^2 + ||Vt - B_Vt||_F^2."""
    if fw.u.shape != bu.shape or fw.s.shape != bs.shape or fw.vt.shape != bvt.shape:
        raise ValueError(
            f"target shapes {bu.shape}/{bs.shape}/{bvt.shape} do not match factors "
            f"{fw.u.shape}/{fw.s.shape}/{fw.vt.shape}")
    du = fw.u - bu
    ds = fw.s - bs
    dv = fw.vt - bvt
    return float(np.sum(du * du) + np.sum(ds * ds) + np.sum(dv * dv))


def ortho_loss(u: np.ndarray, vt: np.ndarray) -> float:
    """||U^T U - I||_F^2 + ||Vt Vt^T - I||_F^2 (Gram of vt's rows)."""
    gu = u.T @ u - np.eye(u.shape[1], dtype=u.dtype)
    gv = vt @ vt.T - np.eye(vt.shape[0], dtype=vt.dtype)
    return float(np.sum(gu * gu) + np.sum(gv * gv))


def hoyer(s: np.ndarray) -> float:
    """l1/l2 norm ratio of the singular-value vector; in [1, sqrt(len)]."""
    s = np.asarray(s)
    l2 = np.linalg.norm(s)
    if l2 == 0.0:
        raise ValueError("hoyer measure undefined for an all-zero vector")
    return float(np.sum(np.abs(s)) / l2)


def hoyer_grad(s: np.ndarray) -> np.ndarray:
    """d(||s||_1 / ||s||_2) / ds = sign(s)/||s||_2 - ||s||_1 s/||s||_2^3."""
    s = np.asarray(s)
    l2 = np.linalg.norm(s)
    if l2 == 0.0:
        raise ValueError("hoyer gradient undefined for an all-zero vector")
    l1 = np.sum(np.abs(s))
    return np.sign(s) / l2 - l1 * s / l2 ** 3


def composite_local_loss(weights: LossWeights, ce: float, align: float, ortho: float) -> float:
    return weights.alpha * ce + weights.beta * align + weights.gamma * ortho
