"""Alignment measurement and metrics plumbing.

Gradient alignment is the angle whose cosine is the Frobenius inner-product
cosine between a method's update and the true BP gradient. Matrix alignment
is the largest principal angle between col(W_next^T) and col(B). Both are
recorded as missing (empty CSV field) rather than failing when undefined.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from .errors import NumericalFailure, UndefinedCosineError
from .linalg import frobenius_cosine, principal_angles
from .losses import ce_loss_and_delta
from .model import cast_network, conv_matricize
from .updates import bp_backward


def grad_alignment_deg(g_method: np.ndarray, g_bp: np.ndarray) -> float | None:
    """arccos of the Frobenius cosine, in degrees; None when either gradient
    vanishes."""
    a = np.asarray(g_method, dtype=np.float64).reshape(1, -1)
    b = np.asarray(g_bp, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {g_method.shape} vs {g_bp.shape}")
    try:
        c = frobenius_cosine(a, b)
    except UndefinedCosineError:
        return None
    return float(np.degrees(np.arccos(c)))


def matrix_alignment_angles(w_effective: np.ndarray, b: np.ndarray):
    """All principal angles between col(W^T) and col(B) in degrees, or None
    when the comparison is undefined (ambient mismatch, rank deficiency)."""
    wt = np.asarray(w_effective, dtype=np.float64).T
    bb = np.asarray(b, dtype=np.float64)
    if wt.shape[0] != bb.shape[0]:
        return None
    try:
        return principal_angles(wt, bb)
    except (ValueError, NumericalFailure):
        return None


def matrix_alignment_deg(w_effective: np.ndarray, b: np.ndarray) -> float | None:
    angles = matrix_alignment_angles(w_effective, b)
    if angles is None:
        return None
    return float(angles[-1])


def ortho_drift(fw) -> float:
    """max Frobenius distance of U^T U and V^T-gram from identity."""
    r = fw.rank
    eye = np.eye(r)
    du = np.linalg.norm(fw.u.astype(np.float64).T @ fw.u.astype(np.float64) - eye)
    dv = np.linalg.norm(fw.vt.astype(np.float64) @ fw.vt.astype(np.float64).T - eye)
    return float(max(du, dv))


@dataclasses.dataclass
class LayerMetrics:
    index: int
    kind: str
    rank: int | None = None
    grad_alignment_deg: float | None = None
    matrix_alignment_deg: float | None = None
    ortho_drift: float | None = None
    principal_angles_deg: list | None = None
    params: int = 0
    macs: int = 0


@dataclasses.dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    params_total: int
    inference_flops: int
    layers: list


def probe_bp_grads(net, x: np.ndarray, y: np.ndarray, chunk: int = 64):
    """True chain-rule gradients on a probe batch, computed in float64 on a
    transient cast of the network. Training state is untouched. The batch is
    processed in chunks to bound im2col scratch memory; chunk means are
    recombined by sample-count weight, which is exact up to fp64 rounding."""
    net64 = cast_network(net, np.float64)
    total = x.shape[0]
    acc = None
    for start in range(0, total, chunk):
        xs = x[start:start + chunk].astype(np.float64)
        ys = y[start:start + chunk]
        logits, tapes = net64.forward(xs)
        _, delta = ce_loss_and_delta(logits, ys)
        grads = bp_backward(net64, tapes, delta)
        w = xs.shape[0] / total
        if acc is None:
            acc = [None if g is None else {k: v * w for k, v in g.items()}
                   for g in grads]
        else:
            for g, a in zip(grads, acc):
                if g is not None:
                    for k in g:
                        a[k] += g[k] * w
    return acc


def _next_trainable_weight(net, i):
    for j in range(i + 1, len(net.layers)):
        layer = net.layers[j]
        if layer.trainable:
            w = layer.effective_weight()
            if w.ndim == 4:
                w = conv_matricize(w)
            return w
    return None


def snapshot(net, bundle, grads_method, grads_bp, epoch: int,
             train_loss: float = float("nan"), train_accuracy: float = float("nan"),
             test_accuracy: float = float("nan")) -> MetricsRecord:
    """One per-epoch diagnostic record. grads_method / grads_bp are lists
    aligned with net.layers holding effective-weight-space gradients (or
    None); either may be None as a whole to skip angle computation."""
    cost = net.count_cost()
    layers = []
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            continue
        row = cost["rows"][i]
        lm = LayerMetrics(index=i, kind=layer.kind, params=row["params"],
                          macs=row["macs"])
        if layer.factored:
            lm.rank = layer.fw.rank
            lm.ortho_drift = ortho_drift(layer.fw)
        if grads_method is not None and grads_bp is not None \
                and grads_method[i] is not None and grads_bp[i] is not None:
            lm.grad_alignment_deg = grad_alignment_deg(grads_method[i], grads_bp[i])
        fb = bundle[i] if bundle is not None else None
        if fb is not None and fb.b is not None:
            w_next = _next_trainable_weight(net, i)
            if w_next is not None:
                angles = matrix_alignment_angles(w_next, fb.b)
                if angles is not None:
                    lm.principal_angles_deg = [float(a) for a in angles]
                    lm.matrix_alignment_deg = float(angles[-1])
        layers.append(lm)
    return MetricsRecord(epoch=epoch, train_loss=train_loss,
                         train_accuracy=train_accuracy, test_accuracy=test_accuracy,
                         params_total=cost["params"],
                         inference_flops=cost["inference_flops"], layers=layers)


CSV_HEADER = ["epoch", "layer", "kind", "rank", "grad_alignment_deg",
              "matrix_alignment_deg", "ortho_drift", "principal_angles_deg",
              "train_loss", "train_accuracy", "test_accuracy", "params",
              "inference_flops"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if np.isnan(v):
            return ""
        return repr(v)
    return str(v)


def records_to_rows(records) -> list:
    rows = []
    for rec in records:
        for lm in rec.layers:
            angles = "" if lm.principal_angles_deg is None \
                else ";".join(repr(a) for a in lm.principal_angles_deg)
            rows.append([str(rec.epoch), str(lm.index), lm.kind, _fmt(lm.rank),
                         _fmt(lm.grad_alignment_deg), _fmt(lm.matrix_alignment_deg),
                         _fmt(lm.ortho_drift), angles, "", "", "",
                         str(lm.params), str(lm.macs)])
        ga = [l.grad_alignment_deg for l in rec.layers if l.grad_alignment_deg is not None]
        ma = [l.matrix_alignment_deg for l in rec.layers if l.matrix_alignment_deg is not None]
        od = [l.ortho_drift for l in rec.layers if l.ortho_drift is not None]
        rows.append([str(rec.epoch), "all", "", "",
                     _fmt(float(np.mean(ga)) if ga else None),
                     _fmt(float(np.mean(ma)) if ma else None),
                     _fmt(float(max(od)) if od else None), "",
                     _fmt(rec.train_loss), _fmt(rec.train_accuracy),
                     _fmt(rec.test_accuracy), str(rec.params_total),
                     str(rec.inference_flops)])
    return rows


def write_metrics_csv(records, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(records_to_rows(records))


def parse_metrics_csv(path: str):
    """Inverse of write_metrics_csv, for round-trip checks and downstream
    consumers."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = list(reader)
    records = []
    current = None
    opt = lambda cell: None if cell == "" else float(cell)
    for row in rows:
        if row[1] == "all":
            current.epoch = int(row[0])
            current.train_loss = float(row[8]) if row[8] else float("nan")
            current.train_accuracy = float(row[9]) if row[9] else float("nan")
            current.test_accuracy = float(row[10]) if row[10] else float("nan")
            current.params_total = int(row[11])
            current.inference_flops = int(row[12])
            records.append(current)
            current = None
            continue
        if current is None:
            current = MetricsRecord(epoch=int(row[0]), train_loss=float("nan"),
                                    train_accuracy=float("nan"),
                                    test_accuracy=float("nan"), params_total=0,
                                    inference_flops=0, layers=[])
        angles = None if row[7] == "" else [float(a) for a in row[7].split(";")]
        current.layers.append(LayerMetrics(
            index=int(row[1]), kind=row[2],
            rank=None if row[3] == "" else int(row[3]),
            grad_alignment_deg=opt(row[4]), matrix_alignment_deg=opt(row[5]),
            ortho_drift=opt(row[6]), principal_angles_deg=angles,
            params=int(row[11]), macs=int(row[12])))
    return records
