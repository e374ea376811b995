"""Loss-term tests: frozen closed-form cases plus finite-difference and naive
summation oracles."""

import numpy as np
import pytest

from svdalign.losses import (
    LossWeights,
    alignment_loss,
    ce_loss_and_delta,
    composite_local_loss,
    hoyer,
    hoyer_grad,
    ortho_loss,
)
from svdalign.model import decompose_dense


def test_ce_uniform_two_class():
    loss, delta = ce_loss_and_delta(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)
    assert np.allclose(delta, [[-0.5, 0.5]], atol=1e-12)


def test_ce_confident_prediction_has_tiny_delta():
    _, delta = ce_loss_and_delta(np.array([[20.0, 0.0]]), np.array([0]))
    assert np.max(np.abs(delta)) < 1e-8


def test_ce_delta_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    _, delta = ce_loss_and_delta(logits, labels)
    eps = 1e-6
    for b, k in [(0, 0), (1, 3), (3, 4), (2, 2)]:
        lp = logits.copy(); lp[b, k] += eps
        lm = logits.copy(); lm[b, k] -= eps
        fd = (ce_loss_and_delta(lp, labels)[0] - ce_loss_and_delta(lm, labels)[0]) / (2 * eps)
        # mean loss, per-sample delta: the factor of batch size links them
        assert abs(delta[b, k] / 4 - fd) < 1e-6


def test_ce_delta_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((6, 3)) * 5
    _, delta = ce_loss_and_delta(logits, rng.integers(0, 3, size=6))
    assert np.max(np.abs(delta.sum(axis=1))) < 1e-10


def test_ce_is_stable_for_huge_logits():
    loss, delta = ce_loss_and_delta(np.array([[1e4, 0.0]]), np.array([0]))
    assert np.isfinite(loss) and np.all(np.isfinite(delta))


def test_ce_validation():
    with pytest.raises(ValueError):
        ce_loss_and_delta(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        ce_loss_and_delta(np.zeros((2, 3)), np.array([0, 3]))


def test_alignment_loss_cases():
    rng = np.random.default_rng(2)
    fw = decompose_dense(rng.standard_normal((6, 5)), 3)
    assert alignment_loss(fw, fw.u, fw.s, fw.vt) == pytest.approx(0.0, abs=1e-12)
    # perturb u by a matrix of Frobenius norm 2 -> loss 4
    bump = np.zeros_like(fw.u); bump[0, 0] = 2.0
    assert alignment_loss(fw, fw.u - bump, fw.s, fw.vt) == pytest.approx(4.0, abs=1e-10)
    bu = rng.standard_normal(fw.u.shape)
    bs = rng.standard_normal(fw.s.shape)
    bvt = rng.standard_normal(fw.vt.shape)
    want = (np.sum((fw.u - bu) ** 2) + np.sum((fw.s - bs) ** 2) + np.sum((fw.vt - bvt) ** 2))
    assert alignment_loss(fw, bu, bs, bvt) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        alignment_loss(fw, bu[:, :2], bs, bvt)


def test_ortho_loss_cases():
    rng = np.random.default_rng(3)
    fw = decompose_dense(rng.standard_normal((7, 6)), 4)
    assert ortho_loss(fw.u, fw.vt) == pytest.approx(0.0, abs=1e-12)
    m = 4
    u = 2.0 * np.eye(m)
    vt = np.eye(m)
    assert ortho_loss(u, vt) == pytest.approx(9.0 * m, abs=1e-10)
    u = rng.standard_normal((6, 3))
    vt = rng.standard_normal((3, 5))
    want = (np.linalg.norm(u.T @ u - np.eye(3)) ** 2
            + np.linalg.norm(vt @ vt.T - np.eye(3)) ** 2)
    assert ortho_loss(u, vt) == pytest.approx(want, rel=1e-10)


def test_hoyer_cases():
    assert hoyer(np.array([3.0, 4.0])) == pytest.approx(1.4, abs=1e-15)
    assert hoyer(np.array([0.0, 5.0, 0.0])) == pytest.approx(1.0, abs=1e-15)
    k = 7
    assert hoyer(np.ones(k)) == pytest.approx(np.sqrt(k), abs=1e-12)
    with pytest.raises(ValueError):
        hoyer(np.zeros(3))


def test_hoyer_range_property():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = np.abs(rng.standard_normal(rng.integers(1, 9)))
        if np.linalg.norm(s) == 0:
            continue
        h = hoyer(s)
        assert 1.0 - 1e-12 <= h <= np.sqrt(len(s)) + 1e-12


def test_hoyer_grad_matches_finite_differences():
    rng = np.random.default_rng(5)
    s = np.abs(rng.standard_normal(6)) + 0.1
    g = hoyer_grad(s)
    eps = 1e-7
    for i in range(len(s)):
        sp = s.copy(); sp[i] += eps
        sm = s.copy(); sm[i] -= eps
        fd = (hoyer(sp) - hoyer(sm)) / (2 * eps)
        assert abs(g[i] - fd) < 1e-6


def test_composite_local_loss():
    w = LossWeights(alpha=1.0, beta=0.5, gamma=0.1)
    assert composite_local_loss(w, 2.0, 4.0, 10.0) == pytest.approx(5.0, abs=1e-15)
    assert composite_local_loss(LossWeights(1, 0, 0, 0), 3.3, 9, 9) == pytest.approx(3.3)
    assert composite_local_loss(LossWeights(0, 0, 0, 0), 3, 4, 5) == 0.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0).validate()
    with pytest.raises(ValueError):
        LossWeights(beta=np.inf).validate()
    LossWeights().validate()
