"""Training orchestration: batch scheduling, method dispatch, rank-schedule
boundaries, probe diagnostics, and checkpoint round-trips.

Every random draw is made from an rng derived as default_rng((seed, tag, ...))
with a fixed tag per purpose, so there is no mutable RNG state: a run can be
resumed from any epoch boundary and reproduce the uninterrupted run bit for
bit.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, resolved_data_dir
from .data import Dataset, augment_batch, load_cifar10, synthetic_dataset
from .diagnostics import MetricsRecord, probe_bp_grads, snapshot, write_metrics_csv
from .errors import ConfigError
from .feedback import build_bundle, project_error
from .losses import LossWeights, ce_loss_and_delta, hoyer_grad
from .model import (
    SIGMA_FLOOR,
    FactoredWeight,
    Network,
    act_deriv,
    cast_network,
    conv_matricize,
    make_mlp3,
    make_smallconv,
    rank_cap,
)
from .optim import Adam, RankSchedule, scheduled_rank, spectral_energy_rank
from .updates import (
    bias_grad,
    bp_backward,
    layer_ce_grad,
    ssa_effective_update,
    ssa_factor_grads,
    ssa_factor_grads_fused,
    svd_bp_factor_grads,
    variant_replacements,
)

# rng derivation tags; every consumer derives its own stream
TAG_SHUFFLE = 1
TAG_AUGMENT = 2
TAG_BRSF = 3
TAG_PROBE = 4
TAG_PROBE_BRSF = 5


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "cifar10":
        return load_cifar10(resolved_data_dir(cfg),
                            subset_size=cfg.subset_size or None,
                            test_subset_size=cfg.test_subset_size or None)
    kind = cfg.dataset.split("-", 1)[1]
    return synthetic_dataset(kind, cfg.n_samples, cfg.seed)


def build_network(cfg: RunConfig, dataset: Dataset) -> Network:
    factored = cfg.wants_factored()
    if cfg.architecture == "smallconv":
        return make_smallconv(10, factored, cfg.rank_init, cfg.seed)
    if cfg.dataset == "cifar10":
        return make_mlp3(3 * 32 * 32, 10, factored, cfg.rank_init, cfg.seed,
                         image_input=True)
    input_dim = dataset.x_train.shape[1]
    n_classes = int(dataset.y_train.max()) + 1
    return make_mlp3(input_dim, n_classes, factored, cfg.rank_init, cfg.seed,
                     image_input=False)


@dataclasses.dataclass
class TrainState:
    net: Network
    bundle: list
    adam: Adam
    schedules: dict          # layer index -> RankSchedule (factored layers)
    init_ranks: dict         # layer index -> rank at initialization
    sigma_b: float
    sigma_t: float
    epochs_done: int = 0


def _resolved_sigmas(cfg: RunConfig, net: Network):
    sigma_b = cfg.sigma_feedback or 1.0 / np.sqrt(net.n_classes)
    sigma_t = cfg.sigma_targets  # per-layer auto handled inside build_bundle
    return float(sigma_b), float(sigma_t)


def init_state(cfg: RunConfig, dataset: Dataset) -> TrainState:
    net = build_network(cfg, dataset)
    sigma_b, sigma_t = _resolved_sigmas(cfg, net)
    bundle = build_bundle(net, sigma_b, sigma_t or None, cfg.seed)
    adam = Adam(lr=cfg.lr)
    schedules = {}
    init_ranks = {}
    for i in net.trainable_indices():
        layer = net.layers[i]
        if layer.factored:
            m, n = layer.fw.shape
            init_ranks[i] = layer.fw.rank
            schedules[i] = RankSchedule(
                r0=layer.fw.rank, cap=rank_cap(m, n), total_epochs=cfg.epochs,
                phase1_fraction=cfg.phase1_fraction,
                phase1_target_fraction=cfg.phase1_target_fraction,
                energy_threshold=cfg.energy_threshold,
                hoyer_period=cfg.hoyer_period)
    return TrainState(net=net, bundle=bundle, adam=adam, schedules=schedules,
                      init_ranks=init_ranks, sigma_b=sigma_b, sigma_t=sigma_t)


def _method_error(layer, fb, delta, is_last):
    """Output-space error for one layer under direct projection: the true
    delta for the final layer, the fixed projection otherwise."""
    if is_last:
        return delta
    e = project_error(fb.b, delta)
    if layer.kind in ("conv", "conv_factored"):
        b = e.shape[0]
        n = layer.dims[0] if layer.kind == "conv_factored" else layer.kernel.shape[0]
        h, w = layer.spatial
        return e.reshape(b, n, h, w)
    return e


def _hoyer_active(state: TrainState, cfg: RunConfig, epoch: int) -> bool:
    if not cfg.rank_schedule or not state.schedules:
        return False
    sch = next(iter(state.schedules.values()))
    return sch.hoyer_active(epoch)


def compute_batch_grads(state: TrainState, cfg: RunConfig, tapes, delta,
                        epoch: int, step: int, weights: LossWeights):
    """Per-parameter gradients for one batch under the configured method.
    Returns {(layer_index, name): grad}."""
    net = state.net
    grads = {}
    method = cfg.method
    hoyer_on = method in ("ssa", "svd_bp") and _hoyer_active(state, cfg, epoch)

    if method in ("bp", "usf", "brsf"):
        replace = None
        if method in ("usf", "brsf"):
            rng = np.random.default_rng((cfg.seed, TAG_BRSF, epoch, step)) \
                if method == "brsf" else None
            replace = variant_replacements(net, method, rng)
        raw = bp_backward(net, tapes, delta, replace=replace)
        for i in net.trainable_indices():
            grads[(i, "w")] = raw[i]["weight"]
            if "bias" in raw[i]:
                grads[(i, "b")] = raw[i]["bias"]
        return grads

    if method == "svd_bp":
        raw = svd_bp_factor_grads(net, tapes, delta)
        for i in net.trainable_indices():
            for name, g in raw[i].items():
                if name == "s" and hoyer_on:
                    g = g + cfg.lambda_hoyer * hoyer_grad(net.layers[i].fw.s)
                grads[(i, name)] = g
        return grads

    trainable = net.trainable_indices()
    last = trainable[-1]
    for i in trainable:
        layer = net.layers[i]
        fb = state.bundle[i]
        e = _method_error(layer, fb, delta, i == last)
        if method == "dfa" or not layer.factored:
            g = layer_ce_grad(layer, tapes[i], e)
            gb = bias_grad(layer, tapes[i], e) \
                if getattr(layer, "bias", None) is not None else None
            if method == "ssa":
                # unfactored layers have only the error term in their local
                # loss, but it still carries the error-term weight
                g = weights.alpha * g
                gb = None if gb is None else weights.alpha * gb
            grads[(i, "w")] = g
            if gb is not None:
                grads[(i, "b")] = gb
            continue
        # ssa on a factored layer
        if layer.kind == "dense_factored":
            d = e * act_deriv(layer.activation, tapes[i].pre_activation)
            gu, gs, gvt = ssa_factor_grads_fused(layer.fw, d, tapes[i].input,
                                                 fb.bu, fb.bs, fb.bvt, weights)
        else:
            g = conv_matricize(layer_ce_grad(layer, tapes[i], e))
            gu, gs, gvt = ssa_factor_grads(layer.fw, g, fb.bu, fb.bs, fb.bvt,
                                           weights)
        if hoyer_on:
            gs = gs + cfg.lambda_hoyer * hoyer_grad(layer.fw.s)
        grads[(i, "u")] = gu
        grads[(i, "s")] = gs
        grads[(i, "vt")] = gvt
    return grads


def effective_space_grads(net: Network, bundle, method: str, tapes, delta,
                          weights: LossWeights, brsf_rng=None):
    """Method gradients mapped to effective-weight space per trainable layer
    (matricized for factored convs), for alignment diagnostics."""
    out = [None] * len(net.layers)
    if method in ("bp", "usf", "brsf"):
        replace = None
        if method in ("usf", "brsf"):
            replace = variant_replacements(net, method, brsf_rng)
        raw = bp_backward(net, tapes, delta, replace=replace)
        for i in net.trainable_indices():
            g = raw[i]["weight"]
            out[i] = conv_matricize(g) if g.ndim == 4 and net.layers[i].factored else g
        return out
    if method == "svd_bp":
        raw = svd_bp_factor_grads(net, tapes, delta)
        for i in net.trainable_indices():
            layer = net.layers[i]
            if layer.factored:
                out[i] = ssa_effective_update(layer.fw, raw[i]["u"], raw[i]["s"],
                                              raw[i]["vt"])
            else:
                out[i] = raw[i]["w"]
        return out
    trainable = net.trainable_indices()
    last = trainable[-1]
    for i in trainable:
        layer = net.layers[i]
        e = _method_error(layer, bundle[i], delta, i == last)
        g = layer_ce_grad(layer, tapes[i], e)
        if method == "ssa" and layer.factored:
            gm = conv_matricize(g) if g.ndim == 4 else g
            fb = bundle[i]
            gu, gs, gvt = ssa_factor_grads(layer.fw, gm, fb.bu, fb.bs, fb.bvt,
                                           weights)
            out[i] = ssa_effective_update(layer.fw, gu, gs, gvt)
        else:
            gm = conv_matricize(g) if g.ndim == 4 and layer.factored else g
            out[i] = weights.alpha * gm if method == "ssa" else gm
    return out


def apply_grads(state: TrainState, grads: dict, project_steps: bool = False) -> None:
    """Adam-update every slot. With project_steps, the applied step on the
    orthonormal factors is re-projected onto the tangent space at the
    pre-step point: the factor gradients are tangent, but Adam's
    per-coordinate rescaling is not tangency-preserving, and without this the
    accumulated normal drift scales with sqrt(factor size) per epoch."""
    net = state.net
    for (i, name), g in sorted(grads.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        layer = net.layers[i]
        param = layer.params()[name]
        new = state.adam.update((i, name), param, g)
        if project_steps and name in ("u", "vt"):
            step = new - param
            if name == "u":
                step -= param @ (param.T @ step)
            else:
                step -= (step @ param.T) @ param
            new = param + step
        if name == "s":
            np.maximum(new, np.asarray(SIGMA_FLOOR, dtype=new.dtype), out=new)
        layer.set_param(name, new)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng((seed, TAG_SHUFFLE, epoch))
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def select_probe(dataset: Dataset, cfg: RunConfig):
    n = dataset.x_train.shape[0]
    size = min(cfg.probe_batch_size, n)
    rng = np.random.default_rng((cfg.seed, TAG_PROBE))
    idx = rng.choice(n, size=size, replace=False)
    return dataset.x_train[idx], dataset.y_train[idx]


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch: int = 500) -> float:
    correct = 0
    for k in range(0, x.shape[0], batch):
        logits, _ = net.forward(x[k:k + batch])
        correct += int(np.sum(np.argmax(logits, axis=1) == y[k:k + batch]))
    return correct / x.shape[0]


def _flatten_concat(grads_list, indices):
    parts = [np.asarray(grads_list[i], dtype=np.float64).ravel() for i in indices]
    return np.concatenate(parts)


def probe_method_grads(state: TrainState, cfg: RunConfig, probe, epoch: int,
                       weights: LossWeights):
    """Effective-space method gradients on the probe batch, float64, chunked
    like probe_bp_grads."""
    net64 = cast_network(state.net, np.float64)
    x, y = probe
    total = x.shape[0]
    acc = None
    brsf_rng = np.random.default_rng((cfg.seed, TAG_PROBE_BRSF, epoch)) \
        if cfg.method == "brsf" else None
    for start in range(0, total, 64):
        xs = x[start:start + 64].astype(np.float64)
        ys = y[start:start + 64]
        logits, tapes = net64.forward(xs)
        _, delta = ce_loss_and_delta(logits, ys)
        grads = effective_space_grads(net64, state.bundle, cfg.method, tapes,
                                      delta, weights, brsf_rng=brsf_rng)
        w = xs.shape[0] / total
        if acc is None:
            acc = [None if g is None else g * w for g in grads]
        else:
            for i, g in enumerate(grads):
                if g is not None:
                    acc[i] += g * w
    return acc


def _probe_bp_effective(state: TrainState, probe):
    """Probe BP gradients with factored-conv entries matricized so shapes
    match the method-gradient list."""
    raw = probe_bp_grads(state.net, probe[0], probe[1])
    out = [None] * len(state.net.layers)
    for i in state.net.trainable_indices():
        g = raw[i]["weight"]
        if g.ndim == 4 and state.net.layers[i].factored:
            g = conv_matricize(g)
        out[i] = g
    return out


def _apply_rank_boundary(state: TrainState, cfg: RunConfig, epoch: int) -> None:
    """At the end of epoch, truncate factored layers to the rank scheduled
    for epoch + 1 (linear early, spectral-energy late)."""
    if not cfg.rank_schedule or cfg.method not in ("ssa", "svd_bp"):
        return
    nxt = epoch + 1
    if nxt >= cfg.epochs:
        return
    for i, sch in state.schedules.items():
        layer = state.net.layers[i]
        r_cur = layer.fw.rank
        if sch.in_phase1(nxt):
            r_new = scheduled_rank(nxt, sch)
        else:
            r_new = max(1, spectral_energy_rank(layer.fw.s, sch.energy_threshold))
        r_new = min(r_new, r_cur)
        if r_new == r_cur:
            continue
        fw = layer.fw
        layer.fw = FactoredWeight(fw.u[:, :r_new].copy(), fw.s[:r_new].copy(),
                                  fw.vt[:r_new, :].copy())
        if state.bundle[i] is not None:
            state.bundle[i] = state.bundle[i].truncated(r_new)
        state.adam.truncate((i, "u"), r_new, axis=1)
        state.adam.truncate((i, "s"), r_new, axis=0)
        state.adam.truncate((i, "vt"), r_new, axis=0)


def train_epoch(state: TrainState, cfg: RunConfig, dataset: Dataset, epoch: int,
                probe=None, step_cosines=None):
    """One pass over the training split. Returns (mean_loss, accuracy)."""
    net = state.net
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)
    n = dataset.x_train.shape[0]
    rng_aug = np.random.default_rng((cfg.seed, TAG_AUGMENT, epoch))
    loss_sum = 0.0
    correct = 0
    # probe reference is fixed for the whole epoch
    bp_ref = None
    if step_cosines is not None and probe is not None:
        bp_eff = _probe_bp_effective(state, probe)
        bp_ref = _flatten_concat(bp_eff, net.trainable_indices())
    for step, idx in enumerate(epoch_batches(n, cfg.batch_size, cfg.seed, epoch)):
        x = dataset.x_train[idx]
        y = dataset.y_train[idx]
        if cfg.augment:
            x = augment_batch(x, rng_aug)
        logits, tapes = net.forward(x)
        loss, delta = ce_loss_and_delta(logits, y)
        loss_sum += loss * idx.size
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        grads = compute_batch_grads(state, cfg, tapes, delta, epoch, step, weights)
        if bp_ref is not None:
            upd = _effective_update_from_grads(net, grads)
            a = _flatten_concat(upd, net.trainable_indices())
            na, nb = np.linalg.norm(a), np.linalg.norm(bp_ref)
            if na > 0 and nb > 0:
                step_cosines.append(float(np.dot(a, bp_ref) / (na * nb)))
        apply_grads(state, grads, project_steps=cfg.method == "ssa")
    return loss_sum / n, correct / n


def _effective_update_from_grads(net: Network, grads: dict):
    """Map a batch's parameter gradients to effective-weight space (the
    direction actually compared against BP)."""
    out = [None] * len(net.layers)
    for i in net.trainable_indices():
        layer = net.layers[i]
        if layer.factored:
            out[i] = ssa_effective_update(layer.fw, grads[(i, "u")],
                                          grads[(i, "s")], grads[(i, "vt")])
        else:
            g = grads[(i, "w")]
            out[i] = g
    return out


@dataclasses.dataclass
class RunResult:
    records: list
    state: TrainState
    step_cosines: list
    csv_path: str | None = None
    checkpoint_path: str | None = None


FINGERPRINT_SKIP = ("data_dir", "out_dir")


def config_fingerprint(cfg: RunConfig) -> str:
    """The run-defining part of the config, serialized in config-file syntax
    so a checkpoint alone is enough to rebuild the network."""
    lines = []
    for f in dataclasses.fields(cfg):
        if f.name in FINGERPRINT_SKIP:
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)


def config_from_fingerprint(text: str) -> RunConfig:
    from .config import parse_config_text
    return parse_config_text(text)


def run_training(cfg: RunConfig, dataset: Dataset | None = None,
                 resume_path: str | None = None, write_outputs: bool = False,
                 run_name: str | None = None, stop_after: int | None = None,
                 log=None) -> RunResult:
    """Train per cfg, optionally resuming from a checkpoint or stopping at an
    earlier epoch barrier (stop_after simulates interruption; the checkpoint
    still carries the full-run fingerprint)."""
    if dataset is None:
        dataset = load_dataset(cfg)
    if resume_path is not None:
        state = restore_state(cfg, dataset, resume_path)
    else:
        state = init_state(cfg, dataset)
    probe_needed = cfg.diag_probe or cfg.diag_per_step
    probe = select_probe(dataset, cfg) if probe_needed else None
    weights = LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda_hoyer)

    name = run_name or f"{cfg.method}_{cfg.architecture}_{cfg.dataset}_seed{cfg.seed}"
    csv_path = os.path.join(cfg.out_dir, name + ".csv") if write_outputs else None
    ckpt_path = os.path.join(cfg.out_dir, name + ".ckpt") if write_outputs else None
    if write_outputs:
        os.makedirs(cfg.out_dir, exist_ok=True)

    records = []
    step_cosines = [] if cfg.diag_per_step else None
    until = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epochs_done, until):
        train_loss, train_acc = train_epoch(state, cfg, dataset, epoch,
                                            probe=probe, step_cosines=step_cosines)
        test_acc = evaluate(state.net, dataset.x_test, dataset.y_test)
        if cfg.diag_probe:
            g_bp = _probe_bp_effective(state, probe)
            g_m = probe_method_grads(state, cfg, probe, epoch, weights)
            rec = snapshot(state.net, state.bundle, g_m, g_bp, epoch,
                           train_loss=train_loss, train_accuracy=train_acc,
                           test_accuracy=test_acc)
        else:
            rec = snapshot(state.net, state.bundle, None, None, epoch,
                           train_loss=train_loss, train_accuracy=train_acc,
                           test_accuracy=test_acc)
        records.append(rec)
        _apply_rank_boundary(state, cfg, epoch)
        state.epochs_done = epoch + 1
        if write_outputs:
            write_metrics_csv(records, csv_path)
            save_state(cfg, state, ckpt_path)
        if log is not None:
            log(f"epoch {epoch}: loss {train_loss:.4f} "
                f"train_acc {train_acc:.4f} test_acc {test_acc:.4f}")

    return RunResult(records=records, state=state,
                     step_cosines=step_cosines or [],
                     csv_path=csv_path, checkpoint_path=ckpt_path)


# --- checkpoint mapping -----------------------------------------------------


def save_state(cfg: RunConfig, state: TrainState, path: str) -> None:
    net = state.net
    layers = []
    for i in net.trainable_indices():
        layer = net.layers[i]
        entry = {"index": i, "kind": layer.kind,
                 "init_rank": state.init_ranks.get(i, 0), "dims": ()}
        if layer.kind == "conv_factored":
            entry["dims"] = layer.dims
        tensors = {}
        for name, arr in layer.params().items():
            tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)
        entry["tensors"] = tensors
        layers.append(entry)
    entries = []
    for key in state.adam.state_keys():
        st = state.adam.state[key]
        entries.append((key[0], key[1], st["m"], st["v"], st["t"]))
    ckpt.save_checkpoint(path, {
        "fingerprint": config_fingerprint(cfg),
        "seed": cfg.seed,
        "epochs_done": state.epochs_done,
        "sigma_b": state.sigma_b,
        "sigma_t": state.sigma_t,
        "layers": layers,
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps,
                 "entries": entries},
    })


def restore_state(cfg: RunConfig, dataset: Dataset, path: str) -> TrainState:
    raw = ckpt.load_checkpoint(path)
    if raw["fingerprint"] != config_fingerprint(cfg):
        raise ConfigError(
            "checkpoint was produced by a different configuration; "
            "refusing to resume (field-by-field fingerprint mismatch)")
    state = init_state(cfg, dataset)
    net = state.net
    for entry in raw["layers"]:
        i = entry["index"]
        layer = net.layers[i]
        if layer.kind != entry["kind"]:
            raise ConfigError(
                f"layer {i} kind mismatch: checkpoint {entry['kind']}, "
                f"network {layer.kind}")
        t = entry["tensors"]
        if layer.factored:
            layer.fw = FactoredWeight(t["u"], t["s"], t["vt"])
        elif layer.kind == "dense":
            layer.w = t["w"]
            if "b" in t:
                layer.bias = t["b"]
        else:
            layer.kernel = t["w"]
    # feedback targets must match pre-truncation draws
    state.bundle = build_bundle(net, state.sigma_b, state.sigma_t or None,
                                cfg.seed, init_ranks=state.init_ranks)
    adam = Adam(lr=raw["adam"]["lr"], beta1=raw["adam"]["beta1"],
                beta2=raw["adam"]["beta2"], eps=raw["adam"]["eps"])
    for layer_index, name, m, v, t in raw["adam"]["entries"]:
        adam.state[(layer_index, name)] = {"m": m, "v": v, "t": t}
    state.adam = adam
    state.epochs_done = raw["epochs_done"]
    return state
