"""Network definition and forward pass with layers parameterized in SVD space.

Dense layers can hold either a full weight matrix or the economy factors
(u, s, vt); factored layers never materialize the full matrix on the forward
path. Convolutions follow the spatial factorization: a kernel (N, C, H, W) is
matricized to (N*W, C*H), decomposed, and applied as a vertical Hx1 pass, a
per-channel singular-value scale, then a horizontal 1xW pass. All convs are
stride 1 with same zero padding; 2x2 max pooling is its own layer kind.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalFailure
from .linalg import SvdTriple, svd_exact, svd_truncated_randomized

SIGMA_FLOOR = 1e-6

# decompose falls back to the exact solver when the randomized sketch would
# cover (nearly) the whole spectrum anyway
_EXACT_DIM_CUTOFF = 96
_EXACT_RANK_FRACTION = 0.9


def act_forward(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "identity":
        return a
    raise ValueError(f"unknown activation {kind!r}")


def act_deriv(kind: str, a: np.ndarray) -> np.ndarray:
    """Derivative evaluated at the pre-activation; relu'(0) is defined as 0."""
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if kind == "identity":
        return np.ones_like(a)
    raise ValueError(f"unknown activation {kind!r}")


class FactoredWeight:
    """Economy SVD factors of an m x n matrix at rank r: u (m x r), s (r,),
    vt (r x n). s entries stay at or above SIGMA_FLOOR."""

    def __init__(self, u: np.ndarray, s: np.ndarray, vt: np.ndarray):
        self.u = u
        self.s = s
        self.vt = vt
        if u.shape[1] != s.shape[0] or vt.shape[0] != s.shape[0]:
            raise ValueError(f"inconsistent factor shapes {u.shape} {s.shape} {vt.shape}")

    @property
    def rank(self) -> int:
        return int(self.s.shape[0])

    @property
    def shape(self):
        return (self.u.shape[0], self.vt.shape[1])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt

    def astype(self, dtype) -> "FactoredWeight":
        return FactoredWeight(self.u.astype(dtype), self.s.astype(dtype), self.vt.astype(dtype))


class ConvPair:
    """Export form of a factored conv: k1 (r, C, H, 1) carrying sqrt(s) * vt and
    k2 (N, r, 1, W) carrying u * sqrt(s)."""

    def __init__(self, k1: np.ndarray, k2: np.ndarray):
        self.k1 = k1
        self.k2 = k2

    @property
    def rank(self) -> int:
        return int(self.k1.shape[0])


class LayerTape:
    """Forward-pass cache for one layer: the input it saw, the pre-activation,
    and the post-activation it produced."""

    __slots__ = ("input", "pre_activation", "post_activation", "extra")

    def __init__(self, input, pre_activation, post_activation, extra=None):
        self.input = input
        self.pre_activation = pre_activation
        self.post_activation = post_activation
        self.extra = extra


def _decompose(w: np.ndarray, r: int, seed: int) -> SvdTriple:
    m, n = w.shape
    k = min(m, n)
    if not 1 <= r <= k:
        raise ValueError(f"rank {r} out of range for shape {w.shape}")
    if k <= _EXACT_DIM_CUTOFF or r >= _EXACT_RANK_FRACTION * k:
        t = svd_exact(np.asarray(w, dtype=np.float64))
        return SvdTriple(t.u[:, :r], t.s[:r], t.vt[:r, :])
    return svd_truncated_randomized(w, r, seed=seed)


def decompose_dense(w, r: int, seed: int = 0) -> FactoredWeight:
    """Top-r SVD factors of w with singular values clamped to SIGMA_FLOOR."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={w.ndim}")
    t = _decompose(w, r, seed)
    return FactoredWeight(t.u.copy(), np.maximum(t.s, SIGMA_FLOOR), t.vt.copy())


def conv_matricize(kernel: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*W, C*H) with the W index fastest on rows and the H
    index fastest on columns."""
    n, c, h, w = kernel.shape
    return kernel.transpose(0, 3, 1, 2).reshape(n * w, c * h)


def conv_dematricize(mat: np.ndarray, dims) -> np.ndarray:
    n, c, h, w = dims
    return mat.reshape(n, w, c, h).transpose(0, 2, 3, 1)


def conv_pair_from_factors(fw: FactoredWeight, dims) -> ConvPair:
    n, c, h, w = dims
    r = fw.rank
    root = np.sqrt(fw.s)
    k1 = (root[:, None] * fw.vt).reshape(r, c, h, 1)
    k2 = (fw.u * root).reshape(n, w, r).transpose(0, 2, 1)[:, :, None, :]
    return ConvPair(k1, np.ascontiguousarray(k2))


def decompose_conv(kernel, r: int, seed: int = 0) -> ConvPair:
    """Factor a (N, C, H, W) kernel through its (N*W, C*H) matricization into
    the vertical/horizontal pair; composing the two convolutions reproduces
    the original one exactly at full rank."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ValueError(f"expected a 4-D kernel, got ndim={kernel.ndim}")
    mat = conv_matricize(kernel)
    t = _decompose(mat, r, seed)
    fw = FactoredWeight(t.u.copy(), np.maximum(t.s, SIGMA_FLOOR), t.vt.copy())
    return conv_pair_from_factors(fw, kernel.shape)


# convolution primitives (stride 1, same zero padding, odd kernel sides)

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*kh*kw) patches under same padding."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = np.empty((b, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * h * w, c * kh * kw)


def conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"kernel expects {ck} input channels, got {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("same padding needs odd kernel sides")
    cols = _im2col(x, kh, kw)
    y = cols @ kernel.reshape(o, -1).T
    return np.ascontiguousarray(y.reshape(b, h, w, o).transpose(0, 3, 1, 2))


def conv2d_grad_kernel(x: np.ndarray, gy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gradient of sum(conv2d_same(x, k) * gy) w.r.t. the kernel."""
    b, c, h, w = x.shape
    o = gy.shape[1]
    cols = _im2col(x, kh, kw)
    g = gy.transpose(0, 2, 3, 1).reshape(b * h * w, o)
    return (g.T @ cols).reshape(o, c, kh, kw)


def conv2d_grad_input(gy: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Gradient of sum(conv2d_same(x, k) * gy) w.r.t. x."""
    b, o, h, w = gy.shape
    _, c, kh, kw = kernel.shape
    g = gy.transpose(0, 2, 3, 1).reshape(b * h * w, o)
    dcols = (g @ kernel.reshape(o, -1)).reshape(b, h, w, c, kh, kw)
    dxp = np.zeros((b, c, h + 2 * (kh // 2), w + 2 * (kw // 2)), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    ph, pw = kh // 2, kw // 2
    return dxp[:, :, ph:ph + h, pw:pw + w]


class DenseLayer:
    """Full-matrix dense layer, optionally with a bias (classifier only)."""

    kind = "dense"
    trainable = True
    factored = False

    def __init__(self, w: np.ndarray, activation: str, bias: np.ndarray | None = None):
        self.w = w
        self.bias = bias
        self.activation = activation

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ValueError(f"dense layer expects (batch, {self.w.shape[1]}), got {x.shape}")
        a = x @ self.w.T
        if self.bias is not None:
            a = a + self.bias
        h = act_forward(self.activation, a)
        return h, LayerTape(x, a, h)

    def params(self):
        out = {"w": self.w}
        if self.bias is not None:
            out["b"] = self.bias
        return out

    def set_param(self, name, value):
        if name == "w":
            self.w = value
        elif name == "b":
            self.bias = value
        else:
            raise KeyError(name)

    def effective_weight(self):
        return self.w

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def cost(self):
        params = self.w.size + (self.bias.size if self.bias is not None else 0)
        macs = self.w.size + (self.bias.size if self.bias is not None else 0)
        return params, macs


class FactoredDense:
    """Dense layer stored as SVD factors; forward is u @ (s * (vt @ x))."""

    kind = "dense_factored"
    trainable = True
    factored = True

    def __init__(self, fw: FactoredWeight, activation: str):
        self.fw = fw
        self.activation = activation

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.fw.vt.shape[1]:
            raise ValueError(f"factored dense expects (batch, {self.fw.vt.shape[1]}), got {x.shape}")
        a = ((x @ self.fw.vt.T) * self.fw.s) @ self.fw.u.T
        h = act_forward(self.activation, a)
        return h, LayerTape(x, a, h)

    def params(self):
        return {"u": self.fw.u, "s": self.fw.s, "vt": self.fw.vt}

    def set_param(self, name, value):
        setattr(self.fw, name, value)

    def effective_weight(self):
        return self.fw.reconstruct()

    @property
    def out_dim(self) -> int:
        return self.fw.u.shape[0]

    def cost(self):
        m, n = self.fw.shape
        r = self.fw.rank
        params = m * r + r + r * n
        macs = r * n + r + m * r
        return params, macs


class ConvLayer:
    """Full-kernel convolution, stride 1, same padding."""

    kind = "conv"
    trainable = True
    factored = False

    def __init__(self, kernel: np.ndarray, activation: str, spatial):
        self.kernel = kernel
        self.activation = activation
        self.spatial = spatial  # (H, W) of the feature map this layer runs at

    def forward(self, x):
        a = conv2d_same(x, self.kernel)
        h = act_forward(self.activation, a)
        return h, LayerTape(x, a, h)

    def params(self):
        return {"w": self.kernel}

    def set_param(self, name, value):
        if name != "w":
            raise KeyError(name)
        self.kernel = value

    def effective_weight(self):
        return self.kernel

    @property
    def out_dim(self) -> int:
        return self.kernel.shape[0] * self.spatial[0] * self.spatial[1]

    def cost(self):
        positions = self.spatial[0] * self.spatial[1]
        return self.kernel.size, positions * self.kernel.size


class FactoredConv:
    """Spatially factorized convolution holding factors of the (N*W, C*H)
    matricization; forward runs the Hx1 pass, scales by s, then the 1xW pass."""

    kind = "conv_factored"
    trainable = True
    factored = True

    def __init__(self, fw: FactoredWeight, dims, activation: str, spatial):
        self.fw = fw
        self.dims = tuple(dims)  # (N, C, H, W) of the source kernel
        self.activation = activation
        self.spatial = spatial

    @classmethod
    def from_kernel(cls, kernel: np.ndarray, r: int, activation: str, spatial, seed: int = 0):
        mat = conv_matricize(np.asarray(kernel, dtype=np.float64))
        t = _decompose(mat, r, seed)
        fw = FactoredWeight(t.u.copy(), np.maximum(t.s, SIGMA_FLOOR), t.vt.copy())
        return cls(fw, kernel.shape, activation, spatial)

    def _stage_kernels(self):
        n, c, h, w = self.dims
        r = self.fw.rank
        k1 = self.fw.vt.reshape(r, c, h, 1)
        k2 = np.ascontiguousarray(self.fw.u.reshape(n, w, r).transpose(0, 2, 1)[:, :, None, :])
        return k1, k2

    def forward(self, x):
        k1, k2 = self._stage_kernels()
        z = conv2d_same(x, k1)
        z *= self.fw.s[None, :, None, None]
        a = conv2d_same(z, k2)
        h = act_forward(self.activation, a)
        return h, LayerTape(x, a, h)

    def params(self):
        return {"u": self.fw.u, "s": self.fw.s, "vt": self.fw.vt}

    def set_param(self, name, value):
        setattr(self.fw, name, value)

    def effective_weight(self):
        """The full-kernel equivalent (N, C, H, W) of the current factors."""
        return conv_dematricize(self.fw.reconstruct(), self.dims)

    @property
    def out_dim(self) -> int:
        return self.dims[0] * self.spatial[0] * self.spatial[1]

    def cost(self):
        n, c, h, w = self.dims
        m, nn = n * w, c * h
        r = self.fw.rank
        positions = self.spatial[0] * self.spatial[1]
        params = m * r + r + r * nn
        macs = positions * (r * nn + r + r * m)
        return params, macs


class MaxPool2x2:
    kind = "pool"
    trainable = False
    factored = False
    activation = "identity"

    def forward(self, x):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"2x2 pooling needs even spatial dims, got {x.shape}")
        windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(b, c, h // 2, w // 2, 4)
        idx = windows.argmax(axis=4)
        out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
        return out, LayerTape(x, out, out, extra=idx)

    def backward_input(self, gy, tape):
        b, c, h, w = tape.input.shape
        dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=gy.dtype)
        np.put_along_axis(dwin, tape.extra[..., None], gy[..., None], axis=4)
        dwin = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dwin.reshape(b, c, h, w))

    def params(self):
        return {}

    def cost(self):
        return 0, 0


class Flatten:
    kind = "flatten"
    trainable = False
    factored = False
    activation = "identity"

    def forward(self, x):
        out = x.reshape(x.shape[0], -1)
        return out, LayerTape(x, out, out)

    def backward_input(self, gy, tape):
        return gy.reshape(tape.input.shape)

    def params(self):
        return {}

    def cost(self):
        return 0, 0


def cast_network(net: "Network", dtype) -> "Network":
    """Structural copy of net with parameters cast to dtype. Used for 64-bit
    diagnostic passes that must not touch training state."""
    layers = []
    for layer in net.layers:
        if layer.kind == "dense":
            bias = None if layer.bias is None else layer.bias.astype(dtype)
            layers.append(DenseLayer(layer.w.astype(dtype), layer.activation, bias=bias))
        elif layer.kind == "dense_factored":
            layers.append(FactoredDense(layer.fw.astype(dtype), layer.activation))
        elif layer.kind == "conv":
            layers.append(ConvLayer(layer.kernel.astype(dtype), layer.activation,
                                    layer.spatial))
        elif layer.kind == "conv_factored":
            layers.append(FactoredConv(layer.fw.astype(dtype), layer.dims,
                                       layer.activation, layer.spatial))
        elif layer.kind == "pool":
            layers.append(MaxPool2x2())
        elif layer.kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind {layer.kind}")
    return Network(layers, net.n_classes)


class Network:
    """Ordered layers plus the forward pass producing logits and tapes."""

    def __init__(self, layers, n_classes: int):
        self.layers = list(layers)
        self.n_classes = n_classes

    def forward(self, x):
        tapes = []
        h = x
        for layer in self.layers:
            h, tape = layer.forward(h)
            tapes.append(tape)
        if not np.all(np.isfinite(h)):
            raise NumericalFailure("non-finite activations in forward pass")
        return h, tapes

    def trainable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.trainable]

    def count_cost(self):
        """Total parameter count and per-sample inference MACs, with rows."""
        rows = []
        params_total = 0
        macs_total = 0
        for i, layer in enumerate(self.layers):
            p, f = layer.cost()
            params_total += p
            macs_total += f
            rows.append({"layer": i, "kind": layer.kind, "params": p, "macs": f})
        return {"params": params_total, "inference_flops": macs_total, "rows": rows}


# architecture builders

MLP_HIDDEN = {"image": (1024, 512), "vector": (64, 64)}
SMALLCONV_CHANNELS = (96, 192, 512)
SMALLCONV_FC = 1024


def rank_cap(m: int, n: int) -> int:
    """Largest rank strictly below the parameter break-even mn/(m+n)."""
    return int(np.ceil(m * n / (m + n))) - 1


def should_factor(m: int, n: int) -> bool:
    return min(m, n) >= 4 and rank_cap(m, n) >= 2


def initial_rank(m: int, n: int, fraction: float) -> int:
    k = min(m, n)
    return max(1, min(k, int(np.floor(fraction * k + 0.5))))


def _he_init(rng, fan_out, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((fan_out, fan_in)) * std).astype(dtype)


def _xavier_init(rng, fan_out, fan_in, dtype):
    std = np.sqrt(1.0 / fan_in)
    return (rng.standard_normal((fan_out, fan_in)) * std).astype(dtype)


def _dense_or_factored(w, activation, factored, rank_fraction, seed, dtype):
    m, n = w.shape
    if factored and should_factor(m, n):
        r = initial_rank(m, n, rank_fraction)
        fw = decompose_dense(w, r, seed=seed)
        return FactoredDense(fw.astype(dtype), activation)
    return DenseLayer(w.astype(dtype), activation)


def make_mlp3(input_dim: int, n_classes: int, factored: bool, rank_fraction: float,
              seed: int, image_input: bool, dtype=np.float32) -> Network:
    """Two hidden relu layers and a biased linear classifier; image inputs get
    a flatten layer in front."""
    hidden = MLP_HIDDEN["image" if image_input else "vector"]
    dims = [input_dim, *hidden]
    layers = []
    if image_input:
        layers.append(Flatten())
    for i in range(len(hidden)):
        rng = np.random.default_rng((seed, 101, i))
        w = _he_init(rng, dims[i + 1], dims[i], np.float64)
        layers.append(_dense_or_factored(w, "relu", factored, rank_fraction, seed + 7 * i, dtype))
    rng = np.random.default_rng((seed, 101, len(hidden)))
    wout = _he_init(rng, n_classes, dims[-1], np.float64)
    layers.append(DenseLayer(wout.astype(dtype), "identity",
                             bias=np.zeros(n_classes, dtype=dtype)))
    return Network(layers, n_classes)


def make_smallconv(n_classes: int, factored: bool, rank_fraction: float, seed: int,
                   dtype=np.float32) -> Network:
    """conv96-pool-conv192-pool-conv512-pool-fc1024 and a biased classifier,
    for 3x32x32 inputs. 3x3 kernels throughout.

    Hidden activations are tanh: with unbounded relu units the fixed-direction
    error injection makes deep-stack activations grow without limit, while
    saturation keeps every training mode stable at the same step sizes.
    """
    layers = []
    in_ch = 3
    spatial = 32
    for i, out_ch in enumerate(SMALLCONV_CHANNELS):
        rng = np.random.default_rng((seed, 102, i))
        kernel = (rng.standard_normal((out_ch, in_ch, 3, 3))
                  * np.sqrt(1.0 / (in_ch * 9))).astype(np.float64)
        m, n = out_ch * 3, in_ch * 3
        if factored and should_factor(m, n):
            r = initial_rank(m, n, rank_fraction)
            layer = FactoredConv.from_kernel(kernel, r, "tanh", (spatial, spatial),
                                             seed=seed + 11 * i)
            layer.fw = layer.fw.astype(dtype)
            layers.append(layer)
        else:
            layers.append(ConvLayer(kernel.astype(dtype), "tanh", (spatial, spatial)))
        layers.append(MaxPool2x2())
        in_ch = out_ch
        spatial //= 2
    layers.append(Flatten())
    flat = in_ch * spatial * spatial
    rng = np.random.default_rng((seed, 102, len(SMALLCONV_CHANNELS)))
    wfc = _xavier_init(rng, SMALLCONV_FC, flat, np.float64)
    layers.append(_dense_or_factored(wfc, "tanh", factored, rank_fraction,
                                     seed + 11 * len(SMALLCONV_CHANNELS), dtype))
    rng = np.random.default_rng((seed, 102, len(SMALLCONV_CHANNELS) + 1))
    wout = _xavier_init(rng, n_classes, SMALLCONV_FC, np.float64)
    layers.append(DenseLayer(wout.astype(dtype), "identity",
                             bias=np.zeros(n_classes, dtype=dtype)))
    return Network(layers, n_classes)
