"""Feedback construction: normalization, determinism, target shapes, and the
error-projection contract."""

import numpy as np
import pytest

from svdalign.feedback import (
    build_alignment_targets,
    build_bundle,
    build_feedback,
    project_error,
)
from svdalign.model import make_mlp3


def test_feedback_columns_are_unit_norm():
    b = build_feedback(4, 2, sigma=0.7, seed=0)
    assert b.shape == (4, 2)
    assert np.allclose(np.linalg.norm(b, axis=0), 1.0, atol=1e-12)


def test_feedback_deterministic_and_frozen():
    b1 = build_feedback(16, 10, sigma=0.3, seed=42)
    b2 = build_feedback(16, 10, sigma=0.3, seed=42)
    assert np.array_equal(b1, b2)
    assert not np.array_equal(b1, build_feedback(16, 10, sigma=0.3, seed=43))
    with pytest.raises(ValueError):
        b1[0, 0] = 1.0


def test_feedback_validates_dims():
    with pytest.raises(ValueError):
        build_feedback(0, 3, sigma=1.0, seed=0)


def test_alignment_targets_shapes_and_orthonormality():
    bu, bs, bvt = build_alignment_targets(12, 9, 4, sigma=1.0 / 3.0, seed=7)
    assert bu.shape == (12, 4) and bs.shape == (4,) and bvt.shape == (4, 9)
    assert np.all(np.diff(bs) <= 1e-12) and np.all(bs >= 0)
    assert np.linalg.norm(bu.T @ bu - np.eye(4)) < 1e-6
    assert np.linalg.norm(bvt @ bvt.T - np.eye(4)) < 1e-6


def test_alignment_targets_deterministic_and_rank_checked():
    a = build_alignment_targets(8, 6, 3, sigma=0.5, seed=1)
    b = build_alignment_targets(8, 6, 3, sigma=0.5, seed=1)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    with pytest.raises(ValueError):
        build_alignment_targets(8, 6, 7, sigma=0.5, seed=1)


def test_project_error_contracts():
    rng = np.random.default_rng(3)
    delta = rng.standard_normal((5, 3))
    assert np.allclose(project_error(np.eye(3), delta), delta)
    assert np.allclose(project_error(np.eye(3), np.zeros((5, 3))), 0.0)
    b = rng.standard_normal((7, 3))
    got = project_error(b, delta)
    want = np.stack([b @ d for d in delta])
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(ValueError):
        project_error(b, rng.standard_normal((5, 4)))


def test_bundle_layout_matches_network():
    net = make_mlp3(20, 5, factored=True, rank_fraction=1.0, seed=0, image_input=False,
                    dtype=np.float64)
    bundle = build_bundle(net, sigma_b=None, sigma_t=None, seed=0)
    assert len(bundle) == len(net.layers)
    trainable = net.trainable_indices()
    for i, (layer, fb) in enumerate(zip(net.layers, bundle)):
        if not layer.trainable:
            assert fb is None
            continue
        if i == trainable[-1]:
            assert fb.b is None  # output layer sees the true error
        else:
            assert fb.b.shape == (layer.out_dim, 5)
        if layer.factored:
            assert fb.bu.shape == layer.fw.u.shape
            assert fb.bs.shape == layer.fw.s.shape
            assert fb.bvt.shape == layer.fw.vt.shape


def test_bundle_truncation_preserves_leading_entries():
    net = make_mlp3(20, 5, factored=True, rank_fraction=1.0, seed=0, image_input=False,
                    dtype=np.float64)
    bundle = build_bundle(net, sigma_b=None, sigma_t=None, seed=0)
    idx = [i for i, l in enumerate(net.layers) if l.factored][0]
    fb = bundle[idx]
    cut = fb.truncated(3)
    assert np.array_equal(cut.bu, fb.bu[:, :3])
    assert np.array_equal(cut.bs, fb.bs[:3])
    assert np.array_equal(cut.bvt, fb.bvt[:3, :])
    with pytest.raises(ValueError):
        cut.truncated(10)
