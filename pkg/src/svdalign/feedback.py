"""Fixed random feedback for direct error projection plus the SVD-shaped
alignment targets that the local loss pulls factors toward.

Everything is a pure function of (dims, sigma, seed) and is frozen after
construction: arrays are marked read-only so a training step cannot mutate
them by accident. Rank truncation slices from the front, preserving retained
entries bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .linalg import svd_truncated_randomized


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def build_feedback(d_i: int, d_n: int, sigma: float, seed) -> np.ndarray:
    """Gaussian d_i x d_n matrix with every column scaled to unit l2 norm."""
    if d_i <= 0 or d_n <= 0:
        raise ValueError(f"dimensions must be positive, got {d_i} x {d_n}")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((d_i, d_n)) * sigma
    norms = np.linalg.norm(b, axis=0)
    norms[norms == 0] = 1.0
    return _frozen(b / norms)


def build_alignment_targets(m: int, n: int, r: int, sigma: float, seed):
    """Targets (bu, bs, bvt) shaped like a layer's factors: truncated
    randomized SVD of an auxiliary column-normalized Gaussian m x n matrix."""
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range for {m} x {n}")
    rng = np.random.default_rng(seed)
    aux = rng.standard_normal((m, n)) * sigma
    norms = np.linalg.norm(aux, axis=0)
    norms[norms == 0] = 1.0
    aux = aux / norms
    sketch_seed = int(np.random.SeedSequence((_to_int_seed(seed), 0x5eed)).generate_state(1)[0])
    t = svd_truncated_randomized(aux, r, seed=sketch_seed)
    return _frozen(t.u.copy()), _frozen(t.s.copy()), _frozen(t.vt.copy())


def _to_int_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def project_error(b: np.ndarray, delta_n: np.ndarray) -> np.ndarray:
    """DFA error signal: rows of delta_n (batch x d_n) mapped through b."""
    if b.ndim != 2 or delta_n.ndim != 2 or delta_n.shape[1] != b.shape[1]:
        raise ValueError(f"shape mismatch: b {b.shape} vs delta {delta_n.shape}")
    return delta_n @ b.T


class LayerFeedback:
    """Feedback for one trainable layer: the error-projection matrix and, for
    factored layers, the alignment targets."""

    def __init__(self, b=None, bu=None, bs=None, bvt=None):
        self.b = b
        self.bu = bu
        self.bs = bs
        self.bvt = bvt

    def truncated(self, r_new: int) -> "LayerFeedback":
        if self.bs is None:
            return self
        if r_new > self.bs.shape[0]:
            raise ValueError(f"rank can only shrink: {r_new} > {self.bs.shape[0]}")
        return LayerFeedback(
            b=self.b,
            bu=_frozen(self.bu[:, :r_new].copy()),
            bs=_frozen(self.bs[:r_new].copy()),
            bvt=_frozen(self.bvt[:r_new, :].copy()),
        )


def build_bundle(net, sigma_b: float | None, sigma_t: float | None, seed: int,
                 init_ranks: dict | None = None):
    """Per-layer feedback aligned with net.layers (None for untrainable slots).

    The final trainable layer sees the true output error, so it gets no
    projection matrix. sigma values of None pick 1/sqrt(d_n) for projections
    and 1/sqrt(n) per layer for targets.

    init_ranks maps layer index to the rank the targets were originally built
    at; targets are drawn at that rank and then truncated to the layer's
    current rank, so a restored run sees bit-identical feedback.
    """
    d_n = net.n_classes
    trainable = net.trainable_indices()
    last = trainable[-1]
    bundle = []
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            bundle.append(None)
            continue
        fb = LayerFeedback()
        if i != last:
            sb = sigma_b if sigma_b else 1.0 / np.sqrt(d_n)
            fb.b = build_feedback(layer.out_dim, d_n, sb, (seed, 21, i))
        if layer.factored:
            m, n = layer.fw.shape
            st = sigma_t if sigma_t else 1.0 / np.sqrt(n)
            r0 = init_ranks.get(i, layer.fw.rank) if init_ranks else layer.fw.rank
            fb.bu, fb.bs, fb.bvt = build_alignment_targets(m, n, r0, st, (seed, 22, i))
            if layer.fw.rank < r0:
                fb = fb.truncated(layer.fw.rank)
        bundle.append(fb)
    return bundle
