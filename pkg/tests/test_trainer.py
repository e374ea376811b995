import dataclasses
import math

import numpy as np
import pytest

from svdalign.config import RunConfig, validate_config
from svdalign.data import write_synthetic_cifar
from svdalign.diagnostics import parse_metrics_csv, records_to_rows
from svdalign.errors import ConfigError
from svdalign.feedback import project_error
from svdalign.losses import LossWeights, ce_loss_and_delta, hoyer_grad
from svdalign.trainer import (
    apply_grads,
    compute_batch_grads,
    config_fingerprint,
    config_from_fingerprint,
    epoch_batches,
    evaluate,
    init_state,
    load_dataset,
    restore_state,
    run_training,
    save_state,
    select_probe,
)
from svdalign.updates import bp_backward, layer_ce_grad


def spiral_cfg(**kw):
    base = dict(method="ssa", dataset="synthetic-spiral", architecture="mlp3",
                epochs=4, batch_size=64, lr=3e-4, seed=0, n_samples=300,
                diag_probe=False)
    base.update(kw)
    cfg = RunConfig(**base)
    validate_config(cfg)
    return cfg


def net_params(net):
    return {(i, name): arr.copy()
            for i in net.trainable_indices()
            for name, arr in net.layers[i].params().items()}


def assert_params_equal(a, b):
    assert sorted(a) == sorted(b)
    for key in a:
        assert np.array_equal(a[key], b[key]), key


def test_epoch_batches_partition_and_reshuffle():
    batches = epoch_batches(103, 16, seed=3, epoch=0)
    assert [len(b) for b in batches] == [16] * 6 + [7]
    seen = np.sort(np.concatenate(batches))
    assert np.array_equal(seen, np.arange(103))
    again = epoch_batches(103, 16, seed=3, epoch=0)
    assert all(np.array_equal(x, y) for x, y in zip(batches, again))
    other = epoch_batches(103, 16, seed=3, epoch=1)
    assert not np.array_equal(batches[0], other[0])


def test_select_probe_deterministic_and_sized():
    cfg = spiral_cfg(probe_batch_size=50)
    ds = load_dataset(cfg)
    x1, y1 = select_probe(ds, cfg)
    x2, y2 = select_probe(ds, cfg)
    assert x1.shape[0] == 50
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    big = spiral_cfg(probe_batch_size=10_000)
    xb, _ = select_probe(ds, big)
    assert xb.shape[0] == ds.x_train.shape[0]


def test_evaluate_batch_size_invariant():
    cfg = spiral_cfg(method="bp")
    ds = load_dataset(cfg)
    net = init_state(cfg, ds).net
    a = evaluate(net, ds.x_test, ds.y_test, batch=500)
    b = evaluate(net, ds.x_test, ds.y_test, batch=7)
    assert a == b
    assert 0.0 <= a <= 1.0


def test_load_dataset_cifar_roundtrip(tmp_path, monkeypatch):
    write_synthetic_cifar(str(tmp_path), n_train=60, n_test=20, seed=1)
    monkeypatch.delenv("SVDALIGN_DATA", raising=False)
    cfg = RunConfig(dataset="cifar10", data_dir=str(tmp_path),
                    subset_size=40, test_subset_size=10)
    ds = load_dataset(cfg)
    assert ds.x_train.shape == (40, 3, 32, 32)
    assert ds.x_test.shape == (10, 3, 32, 32)


def test_bp_learns_blobs():
    cfg = spiral_cfg(method="bp", dataset="synthetic-blobs", epochs=6,
                     batch_size=32, lr=3e-3, n_samples=600)
    result = run_training(cfg)
    assert result.records[-1].train_accuracy >= 0.99


def test_zero_lr_leaves_params_bitwise():
    cfg = spiral_cfg(lr=0.0, epochs=2)
    ds = load_dataset(cfg)
    before = net_params(init_state(cfg, ds).net)
    result = run_training(cfg, dataset=ds)
    assert_params_equal(before, net_params(result.state.net))


def test_same_config_runs_are_identical():
    cfg = spiral_cfg(diag_probe=True, diag_per_step=True, epochs=2)
    ds = load_dataset(cfg)
    r1 = run_training(cfg, dataset=ds)
    r2 = run_training(cfg, dataset=ds)
    assert r1.records == r2.records
    assert r1.step_cosines == r2.step_cosines
    assert_params_equal(net_params(r1.state.net), net_params(r2.state.net))


def test_step_cosine_count_and_range():
    cfg = spiral_cfg(diag_per_step=True, epochs=3, batch_size=64)
    ds = load_dataset(cfg)
    result = run_training(cfg, dataset=ds)
    n_train = ds.x_train.shape[0]
    expected = cfg.epochs * math.ceil(n_train / cfg.batch_size)
    assert len(result.step_cosines) == expected
    assert all(-1.0 <= c <= 1.0 for c in result.step_cosines)


def batch_and_delta(state, ds, cfg):
    idx = epoch_batches(ds.x_train.shape[0], cfg.batch_size, cfg.seed, 0)[0]
    logits, tapes = state.net.forward(ds.x_train[idx])
    _, delta = ce_loss_and_delta(logits, ds.y_train[idx])
    return tapes, delta


def test_compute_batch_grads_matches_bp_backward():
    cfg = spiral_cfg(method="bp")
    ds = load_dataset(cfg)
    state = init_state(cfg, ds)
    tapes, delta = batch_and_delta(state, ds, cfg)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    grads = compute_batch_grads(state, cfg, tapes, delta, 0, 0, weights)
    raw = bp_backward(state.net, tapes, delta)
    for i in state.net.trainable_indices():
        assert np.array_equal(grads[(i, "w")], raw[i]["weight"])
        if "bias" in raw[i]:
            assert np.array_equal(grads[(i, "b")], raw[i]["bias"])


def test_compute_batch_grads_dfa_uses_projected_error():
    cfg = spiral_cfg(method="dfa")
    ds = load_dataset(cfg)
    state = init_state(cfg, ds)
    tapes, delta = batch_and_delta(state, ds, cfg)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    grads = compute_batch_grads(state, cfg, tapes, delta, 0, 0, weights)
    trainable = state.net.trainable_indices()
    for i in trainable:
        layer = state.net.layers[i]
        if i == trainable[-1]:
            e = delta
        else:
            e = project_error(state.bundle[i].b, delta)
        assert np.array_equal(grads[(i, "w")], layer_ce_grad(layer, tapes[i], e))


def test_apply_grads_order_independent():
    cfg = spiral_cfg()
    ds = load_dataset(cfg)
    s1 = init_state(cfg, ds)
    s2 = init_state(cfg, ds)
    tapes, delta = batch_and_delta(s1, ds, cfg)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    grads = compute_batch_grads(s1, cfg, tapes, delta, 0, 0, weights)
    apply_grads(s1, grads)
    apply_grads(s2, dict(reversed(list(grads.items()))))
    assert_params_equal(net_params(s1.net), net_params(s2.net))


def test_hoyer_term_gated_by_schedule_epoch():
    cfg_on = spiral_cfg(rank_schedule=True, epochs=20, rank_init=0.5)
    cfg_off = dataclasses.replace(cfg_on, lambda_hoyer=0.0)
    ds = load_dataset(cfg_on)
    state_on = init_state(cfg_on, ds)
    state_off = init_state(cfg_off, ds)
    tapes, delta = batch_and_delta(state_on, ds, cfg_on)
    w_on = LossWeights(cfg_on.alpha, cfg_on.beta, cfg_on.gamma, cfg_on.lambda_hoyer)
    w_off = LossWeights(cfg_off.alpha, cfg_off.beta, cfg_off.gamma, 0.0)
    factored = [i for i in state_on.net.trainable_indices()
                if state_on.net.layers[i].factored]
    # epoch 0 falls on the hoyer period: s gradients differ by the penalty
    g0 = compute_batch_grads(state_on, cfg_on, tapes, delta, 0, 0, w_on)
    h0 = compute_batch_grads(state_off, cfg_off, tapes, delta, 0, 0, w_off)
    for i in factored:
        expected = h0[(i, "s")] + cfg_on.lambda_hoyer * hoyer_grad(
            state_on.net.layers[i].fw.s)
        assert np.allclose(g0[(i, "s")], expected, atol=0, rtol=1e-12)
        assert not np.array_equal(g0[(i, "s")], h0[(i, "s")])
    # epoch 1 is off-period: identical gradients
    g1 = compute_batch_grads(state_on, cfg_on, tapes, delta, 1, 0, w_on)
    h1 = compute_batch_grads(state_off, cfg_off, tapes, delta, 1, 0, w_off)
    for i in factored:
        assert np.array_equal(g1[(i, "s")], h1[(i, "s")])


def test_ssa_alpha_zero_removes_error_terms():
    cfg = spiral_cfg(alpha=0.0)
    ds = load_dataset(cfg)
    state = init_state(cfg, ds)
    tapes, delta = batch_and_delta(state, ds, cfg)
    weights = LossWeights(0.0, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    grads = compute_batch_grads(state, cfg, tapes, delta, 0, 0, weights)
    trainable = state.net.trainable_indices()
    # classifier and other unfactored layers stop moving entirely
    for i in trainable:
        layer = state.net.layers[i]
        if not layer.factored:
            assert np.all(grads[(i, "w")] == 0.0)
        else:
            fb = state.bundle[i]
            assert np.allclose(grads[(i, "s")],
                               2.0 * cfg.beta * (layer.fw.s - fb.bs), atol=1e-12)


def test_rank_schedule_shrinks_and_keeps_state_aligned():
    cfg = spiral_cfg(rank_schedule=True, epochs=6, rank_init=1.0,
                     diag_probe=True)
    ds = load_dataset(cfg)
    result = run_training(cfg, dataset=ds)
    state = result.state
    factored = [i for i in state.net.trainable_indices()
                if state.net.layers[i].factored]
    assert factored
    for i in factored:
        sch = state.schedules[i]
        ranks = []
        for rec in result.records:
            lm = next(l for l in rec.layers if l.index == i)
            ranks.append(lm.rank)
        # snapshot happens before the boundary, so epoch 0 shows r0
        assert ranks[0] == sch.r0
        assert ranks[1] == sch.target()
        assert all(a >= b for a, b in zip(ranks, ranks[1:]))
        r = state.net.layers[i].fw.rank
        assert r <= sch.cap
        assert state.adam.state[(i, "u")]["m"].shape[1] == r
        assert state.adam.state[(i, "s")]["m"].shape[0] == r
        assert state.adam.state[(i, "vt")]["m"].shape[0] == r
        assert state.bundle[i].bs.shape[0] == r


def test_fingerprint_skips_paths_and_round_trips():
    cfg = spiral_cfg()
    moved = dataclasses.replace(cfg, data_dir="/elsewhere", out_dir="/tmp/x")
    assert config_fingerprint(cfg) == config_fingerprint(moved)
    back = config_from_fingerprint(config_fingerprint(cfg))
    for f in dataclasses.fields(cfg):
        if f.name in ("data_dir", "out_dir"):
            continue
        assert getattr(back, f.name) == getattr(cfg, f.name), f.name
    changed = dataclasses.replace(cfg, lr=1e-3)
    assert config_fingerprint(cfg) != config_fingerprint(changed)


def test_save_restore_round_trip(tmp_path):
    cfg = spiral_cfg()
    ds = load_dataset(cfg)
    state = init_state(cfg, ds)
    tapes, delta = batch_and_delta(state, ds, cfg)
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    apply_grads(state, compute_batch_grads(state, cfg, tapes, delta, 0, 0, weights))
    path = str(tmp_path / "state.ckpt")
    save_state(cfg, state, path)
    restored = restore_state(cfg, ds, path)
    assert_params_equal(net_params(state.net), net_params(restored.net))
    assert restored.epochs_done == state.epochs_done
    assert restored.adam.state_keys() == state.adam.state_keys()
    for key in state.adam.state_keys():
        a, b = state.adam.state[key], restored.adam.state[key]
        assert np.array_equal(a["m"], b["m"])
        assert np.array_equal(a["v"], b["v"])
        assert a["t"] == b["t"]


def test_restore_rejects_other_config(tmp_path):
    cfg = spiral_cfg(epochs=2)
    ds = load_dataset(cfg)
    result = run_training(cfg, dataset=ds, write_outputs=True,
                          run_name="mismatch")
    other = dataclasses.replace(cfg, lr=cfg.lr * 2)
    with pytest.raises(ConfigError, match="refusing to resume"):
        restore_state(other, ds, result.checkpoint_path)


@pytest.mark.parametrize("method", ["ssa", "dfa"])
def test_resume_matches_uninterrupted_run(tmp_path, method):
    cfg = spiral_cfg(method=method, epochs=6, rank_schedule=(method == "ssa"),
                     diag_probe=True, out_dir=str(tmp_path))
    ds = load_dataset(cfg)
    full = run_training(cfg, dataset=ds, write_outputs=True, run_name="full")
    part = run_training(cfg, dataset=ds, write_outputs=True, run_name="part",
                        stop_after=3)
    assert part.state.epochs_done == 3
    resumed = run_training(cfg, dataset=ds, write_outputs=True, run_name="part",
                           resume_path=part.checkpoint_path)
    assert [r.epoch for r in resumed.records] == [3, 4, 5]
    assert records_to_rows(resumed.records) == records_to_rows(full.records[3:])
    assert_params_equal(net_params(full.state.net),
                        net_params(resumed.state.net))
    with open(full.checkpoint_path, "rb") as fh:
        full_bytes = fh.read()
    with open(resumed.checkpoint_path, "rb") as fh:
        resumed_bytes = fh.read()
    assert full_bytes == resumed_bytes


def test_run_training_writes_outputs(tmp_path):
    cfg = spiral_cfg(epochs=2, out_dir=str(tmp_path), diag_probe=True)
    result = run_training(cfg, write_outputs=True)
    assert result.csv_path and result.checkpoint_path
    parsed = parse_metrics_csv(result.csv_path)
    assert parsed == result.records
