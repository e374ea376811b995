"""Update rules: exact backprop, direct error projection, sign-concordant
variants, and the factor gradients with Stiefel tangent projection.

All gradient producers average per-sample contributions over the batch; the
deltas they exchange are per-sample. Sign convention throughout: returned
values are +gradients and the optimizer subtracts.
"""

from __future__ import annotations

import warnings

import numpy as np

from .model import (
    SIGMA_FLOOR,
    act_deriv,
    conv2d_grad_input,
    conv2d_grad_kernel,
    conv_matricize,
)


def pseudo_grad_w(e: np.ndarray, tape, activation: str) -> np.ndarray:
    """Mean over the batch of [(e o f'(a)) h_prev^T] for a dense layer."""
    if e.shape != tape.pre_activation.shape:
        raise ValueError(f"error shape {e.shape} does not match layer output "
                         f"{tape.pre_activation.shape}")
    d = e * act_deriv(activation, tape.pre_activation)
    return d.T @ tape.input / e.shape[0]


def layer_ce_grad(layer, tape, e: np.ndarray):
    """Pseudo-gradient of the output loss w.r.t. the layer's effective weight
    given an output-space error e (batch-first, shaped like the layer output).
    Dense layers get a matrix back, conv layers a 4-D kernel."""
    d = e * act_deriv(layer.activation, tape.pre_activation)
    batch = e.shape[0]
    if layer.kind in ("dense", "dense_factored"):
        return d.T @ tape.input / batch
    if layer.kind in ("conv", "conv_factored"):
        if layer.kind == "conv":
            _, _, kh, kw = layer.kernel.shape
        else:
            _, _, kh, kw = layer.dims
        return conv2d_grad_kernel(tape.input, d, kh, kw) / batch
    raise ValueError(f"layer kind {layer.kind} has no weights")


def bias_grad(layer, tape, e: np.ndarray):
    d = e * act_deriv(layer.activation, tape.pre_activation)
    return d.mean(axis=0)


def ssa_factor_grads(fw, grad_w: np.ndarray, bu, bs, bvt, weights):
    """Factor gradients (gU, gS, gVt) of the composite local loss.

    gS keeps only the diagonal of U^T G V plus the alignment pull. gU and gVt
    combine the S^{-1}-scaled error term, alignment, and orthogonality
    penalty, then are projected onto the tangent space of the orthonormal
    factors (column space for U, row space for Vt).
    """
    u, s, vt = fw.u, fw.s, fw.vt
    if grad_w.shape != fw.shape:
        raise ValueError(f"grad shape {grad_w.shape} does not match factors {fw.shape}")
    if np.any(s < SIGMA_FLOOR):
        warnings.warn("singular values below the floor were clamped for inversion")
    s_safe = np.maximum(s, SIGMA_FLOOR)
    r = fw.rank
    eye = np.eye(r, dtype=u.dtype)

    gv = grad_w @ vt.T            # G V   (m x r)
    ug = u.T @ grad_w             # U^T G (r x n)
    core = u.T @ gv               # U^T G V

    gs = weights.alpha * np.diag(core) + 2.0 * weights.beta * (s - bs)

    gu = weights.alpha * (gv / s_safe[None, :]) + 2.0 * weights.beta * (u - bu) \
        + 4.0 * weights.gamma * (u @ (u.T @ u - eye))
    gu -= u @ (u.T @ gu)

    gvt = weights.alpha * (ug / s_safe[:, None]) + 2.0 * weights.beta * (vt - bvt) \
        + 4.0 * weights.gamma * ((vt @ vt.T - eye) @ vt)
    gvt -= (gvt @ vt.T) @ vt
    return gu, gs, gvt


def ssa_factor_grads_fused(fw, d: np.ndarray, h: np.ndarray, bu, bs, bvt, weights):
    """Same result as ssa_factor_grads with G = d^T h / batch, but without
    materializing the m x n gradient. d is the activation-masked error."""
    u, s, vt = fw.u, fw.s, fw.vt
    batch = d.shape[0]
    if np.any(s < SIGMA_FLOOR):
        warnings.warn("singular values below the floor were clamped for inversion")
    s_safe = np.maximum(s, SIGMA_FLOOR)
    r = fw.rank
    eye = np.eye(r, dtype=u.dtype)

    du = d @ u                    # (batch, r)
    hv = h @ vt.T                 # (batch, r)
    gv = d.T @ hv / batch         # G V
    gs = weights.alpha * (np.einsum("br,br->r", du, hv) / batch) \
        + 2.0 * weights.beta * (s - bs)

    gu = weights.alpha * (gv / s_safe[None, :]) + 2.0 * weights.beta * (u - bu) \
        + 4.0 * weights.gamma * (u @ (u.T @ u - eye))
    gu -= u @ (u.T @ gu)

    ug = du.T @ h / batch         # U^T G
    gvt = weights.alpha * (ug / s_safe[:, None]) + 2.0 * weights.beta * (vt - bvt) \
        + 4.0 * weights.gamma * ((vt @ vt.T - eye) @ vt)
    gvt -= (gvt @ vt.T) @ vt
    return gu, gs, gvt


def ssa_effective_update(fw, gu: np.ndarray, gs: np.ndarray, gvt: np.ndarray) -> np.ndarray:
    """Pushforward of factor gradients into effective-weight space at the
    current factors: d(U S V^T) = gU S V^T + U diag(gS) V^T + U S gVt."""
    return (gu * fw.s) @ fw.vt + (fw.u * gs) @ fw.vt + (fw.u * fw.s) @ gvt


def backprop_deltas(net, tapes, delta_n: np.ndarray, replace: dict | None = None):
    """Per-sample pre-activation deltas for every trainable layer, walking the
    chain rule backward. replace maps layer index to a substitute for that
    layer's weight during propagation (sign-concordant variants); weight
    gradients themselves always use the taped activations."""
    deltas = [None] * len(net.layers)
    d_post = delta_n
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        tape = tapes[i]
        if not layer.trainable:
            d_post = layer.backward_input(d_post, tape)
            continue
        d_pre = d_post * act_deriv(layer.activation, tape.pre_activation)
        deltas[i] = d_pre
        if i == 0:
            break
        rep = replace.get(i) if replace else None
        if layer.kind == "dense":
            d_post = d_pre @ (layer.w if rep is None else rep)
        elif layer.kind == "dense_factored":
            if rep is None:
                fw = layer.fw
                d_post = ((d_pre @ fw.u) * fw.s) @ fw.vt
            else:
                d_post = d_pre @ rep
        elif layer.kind == "conv":
            d_post = conv2d_grad_input(d_pre, layer.kernel if rep is None else rep)
        elif layer.kind == "conv_factored":
            if rep is None:
                k1, k2 = layer._stage_kernels()
                dz = conv2d_grad_input(d_pre, k2)
                dz *= layer.fw.s[None, :, None, None]
                d_post = conv2d_grad_input(dz, k1)
            else:
                d_post = conv2d_grad_input(d_pre, rep)
        else:
            raise ValueError(f"cannot propagate through layer kind {layer.kind}")
    return deltas


def bp_backward(net, tapes, delta_n: np.ndarray, replace: dict | None = None):
    """Chain-rule gradients per layer w.r.t. each effective weight (the
    reconstructed matrix/kernel for factored layers), plus bias gradients.
    Returns a list aligned with net.layers of dicts or None."""
    deltas = backprop_deltas(net, tapes, delta_n, replace=replace)
    batch = delta_n.shape[0]
    grads = [None] * len(net.layers)
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            continue
        d = deltas[i]
        out = {}
        if layer.kind in ("dense", "dense_factored"):
            out["weight"] = d.T @ tapes[i].input / batch
        else:
            _, _, kh, kw = layer.kernel.shape if layer.kind == "conv" else layer.dims
            out["weight"] = conv2d_grad_kernel(tapes[i].input, d, kh, kw) / batch
        if getattr(layer, "bias", None) is not None:
            out["bias"] = d.mean(axis=0)
        grads[i] = out
    return grads


def svd_bp_factor_grads(net, tapes, delta_n: np.ndarray):
    """Exact chain rule pushed onto the SVD factors, with no projections and
    no feedback terms: dU = G V S, dS = diag(U^T G V), dVt = S U^T G."""
    deltas = backprop_deltas(net, tapes, delta_n)
    batch = delta_n.shape[0]
    grads = [None] * len(net.layers)
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            continue
        d = deltas[i]
        if layer.kind == "dense":
            out = {"w": d.T @ tapes[i].input / batch}
            if layer.bias is not None:
                out["b"] = d.mean(axis=0)
        elif layer.kind == "dense_factored":
            fw = layer.fw
            du = d @ fw.u
            hv = tapes[i].input @ fw.vt.T
            gv = d.T @ hv / batch
            out = {
                "u": gv * fw.s[None, :],
                "s": np.einsum("br,br->r", du, hv) / batch,
                "vt": fw.s[:, None] * (du.T @ tapes[i].input / batch),
            }
        elif layer.kind == "conv":
            _, _, kh, kw = layer.kernel.shape
            out = {"w": conv2d_grad_kernel(tapes[i].input, d, kh, kw) / batch}
        else:
            _, _, kh, kw = layer.dims
            g = conv_matricize(conv2d_grad_kernel(tapes[i].input, d, kh, kw) / batch)
            fw = layer.fw
            gv = g @ fw.vt.T
            ug = fw.u.T @ g
            out = {
                "u": gv * fw.s[None, :],
                "s": np.diag(fw.u.T @ gv).copy(),
                "vt": fw.s[:, None] * ug,
            }
        grads[i] = out
    return grads


def variant_feedback(w_effective: np.ndarray, kind: str, rng=None) -> np.ndarray:
    """Replacement for W^T in the backward recursion: usf is sign(W^T) with
    sign(0) = 0; brsf multiplies in |N(0, 1)| magnitudes resampled per batch."""
    if kind == "usf":
        return np.sign(w_effective.T)
    if kind == "brsf":
        if rng is None:
            raise ValueError("brsf needs an rng for magnitude resampling")
        mag = np.abs(rng.standard_normal(w_effective.T.shape))
        return mag * np.sign(w_effective.T)
    raise ValueError(f"unknown variant kind {kind!r}")


def variant_replacements(net, kind: str, rng=None) -> dict:
    """Propagation substitutes for every trainable layer, oriented the way
    backprop_deltas consumes them (weight-shaped for dense, kernel-shaped for
    conv). Conv kernels get the elementwise analogue of the W^T rule."""
    replace = {}
    for i, layer in enumerate(net.layers):
        if not layer.trainable:
            continue
        if layer.kind in ("dense", "dense_factored"):
            w = layer.effective_weight()
            replace[i] = variant_feedback(w, kind, rng).T
        else:
            k = layer.kernel if layer.kind == "conv" else layer.effective_weight()
            if kind == "usf":
                replace[i] = np.sign(k)
            else:
                if rng is None:
                    raise ValueError("brsf needs an rng for magnitude resampling")
                replace[i] = np.abs(rng.standard_normal(k.shape)) * np.sign(k)
    return replace
