"""Deep image prior: a small numpy encoder-decoder trained on a single image.

Images inside the network are ``(channels, height, width)`` float64 arrays;
the public helpers accept and return ``(rows, cols, bands)`` cubes.
Convolutions use zero "same" padding, so with ``lipschitz_constrained`` the
spectral norm of each convolution is measured on the exact padded operator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "Conv2d",
    "LeakyReLU",
    "Sigmoid",
    "AvgDown",
    "Upsample",
    "SkipSave",
    "SkipAdd",
    "DipNetwork",
    "AdamState",
    "WmvStopper",
    "dip_forward",
    "dip_train_step",
    "spectral_normalize",
    "estimate_lipschitz",
    "conv_operator_norm",
    "save_weights",
    "load_weights",
]


class Conv2d:
    """``k x k`` convolution, stride 1, zero padding ``k // 2``."""

    def __init__(self, c_in, c_out, k=3, rng=None, gain=np.sqrt(2.0)):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        fan_in = c_in * k * k
        bound = gain * np.sqrt(3.0 / fan_in)
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.bias = np.zeros(c_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.power_vec = None

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def _cols(self, x):
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(1, 2))
        c, h, w = x.shape
        return win.transpose(0, 3, 4, 1, 2).reshape(c * self.k * self.k, h * w)

    def linear(self, x):
        """The convolution without bias."""
        c, h, w = x.shape
        return (self.weight.reshape(self.c_out, -1) @ self._cols(x)).reshape(self.c_out, h, w)

    def adjoint(self, y):
        _, h, w = y.shape
        dcols = self.weight.reshape(self.c_out, -1).T @ y.reshape(self.c_out, h * w)
        return self._col2im(dcols, h, w)

    def _col2im(self, dcols, h, w):
        k, p = self.k, self.k // 2
        dcols = dcols.reshape(self.c_in, k, k, h, w)
        dxp = np.zeros((self.c_in, h + 2 * p, w + 2 * p))
        for a in range(k):
            for b in range(k):
                dxp[:, a:a + h, b:b + w] += dcols[:, a, b]
        return dxp[:, p:p + h, p:p + w]

    def forward(self, x):
        if x.shape[0] != self.c_in:
            raise ValueError(f"conv expects {self.c_in} channels, got {x.shape[0]}")
        _, h, w = x.shape
        self._cache = (self._cols(x), h, w)
        out = self.weight.reshape(self.c_out, -1) @ self._cache[0] + self.bias[:, None]
        return out.reshape(self.c_out, h, w)

    def backward(self, dout):
        cols, h, w = self._cache
        d = dout.reshape(self.c_out, h * w)
        self.grad_weight[...] = (d @ cols.T).reshape(self.weight.shape)
        self.grad_bias[...] = d.sum(axis=1)
        return self._col2im(self.weight.reshape(self.c_out, -1).T @ d, h, w)

    def out_shape(self, shape):
        return (self.c_out,) + tuple(shape[1:])


class LeakyReLU:
    params = grads = ()

    def __init__(self, slope=0.1):
        if not 0.0 <= slope <= 1.0:
            raise ValueError("slope must lie in [0, 1]")
        self.slope = slope

    def forward(self, x):
        self._pos = x > 0
        return np.where(self._pos, x, self.slope * x)

    def backward(self, dout):
        return np.where(self._pos, dout, self.slope * dout)

    def out_shape(self, shape):
        return shape


class Sigmoid:
    """Logistic output layer; 1/4-Lipschitz, keeps outputs in (0, 1)."""

    params = grads = ()

    def forward(self, x):
        self._out = expit(x)
        return self._out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)

    def out_shape(self, shape):
        return shape


class AvgDown:
    params = grads = ()

    def forward(self, x):
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial size {h}x{w} not divisible by 2")
        return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(self, dout):
        return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) / 4.0

    def out_shape(self, shape):
        return (shape[0], shape[1] // 2, shape[2] // 2)


class Upsample:
    params = grads = ()

    def forward(self, x):
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dout):
        c, h, w = dout.shape
        return dout.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))

    def out_shape(self, shape):
        return (shape[0], shape[1] * 2, shape[2] * 2)


class SkipSave:
    """Remembers its input for a matching `SkipAdd` further down the stack."""

    params = grads = ()

    def __init__(self, key):
        self.key = key
        self.store = None

    def forward(self, x):
        self.store[self.key] = x
        return x

    def backward(self, dout):
        return dout + self.store.pop(("grad", self.key))

    def out_shape(self, shape):
        return shape


class SkipAdd:
    params = grads = ()

    def __init__(self, key):
        self.key = key
        self.store = None

    def forward(self, x):
        return x + self.store[self.key]

    def backward(self, dout):
        self.store[("grad", self.key)] = dout
        return dout

    def out_shape(self, shape):
        return shape


class DipNetwork:
    """Sequential stack of layers mapping a ``bands``-channel image to itself."""

    def __init__(self, layers, input_shape, lipschitz_constrained=False):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.lipschitz_constrained = lipschitz_constrained
        store = {}
        for layer in self.layers:
            if isinstance(layer, (SkipSave, SkipAdd)):
                layer.store = store
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != self.input_shape:
            raise ValueError(f"network maps {self.input_shape} to {shape}")

    @classmethod
    def encoder_decoder(cls, bands, rows, cols, widths=(16, 32), slope=0.1, skip=False,
                        seed=0, lipschitz_constrained=False, output="sigmoid"):
        """Conv/leaky-ReLU encoder with 2x average pooling, mirrored decoder, 1x1 output conv.

        ``output="sigmoid"`` appends a logistic layer (outputs in (0, 1));
        ``"linear"`` leaves the last convolution unbounded.
        """
        if output not in ("sigmoid", "linear"):
            raise ValueError(f"unknown output layer {output!r}")
        depth = len(widths)
        if rows % 2**depth or cols % 2**depth:
            raise ValueError(f"{rows}x{cols} not divisible by 2^{depth}")
        rng = np.random.default_rng(seed)
        layers = []
        c = bands
        for lvl, w in enumerate(widths):
            layers += [Conv2d(c, w, 3, rng), LeakyReLU(slope)]
            if skip:
                layers.append(SkipSave(lvl))
            layers.append(AvgDown())
            c = w
        layers += [Conv2d(c, c, 3, rng), LeakyReLU(slope)]
        for lvl in reversed(range(depth)):
            w = widths[lvl]
            layers += [Upsample(), Conv2d(c, w, 3, rng), LeakyReLU(slope)]
            if skip:
                layers.append(SkipAdd(lvl))
            c = w
        layers.append(Conv2d(c, bands, 1, rng, gain=1.0))
        if output == "sigmoid":
            layers.append(Sigmoid())
        net = cls(layers, (bands, rows, cols), lipschitz_constrained)
        if lipschitz_constrained:
            for _ in range(10):
                spectral_normalize(net)
        return net

    @property
    def convs(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def conv_input_shapes(self):
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                shapes.append(shape)
            shape = layer.out_shape(shape)
        return shapes

    def forward(self, x):
        if x.shape != self.input_shape:
            raise ValueError(f"input shape {x.shape} != {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def _to_chw(cube):
    return np.ascontiguousarray(np.asarray(cube, dtype=np.float64).transpose(2, 0, 1))


def _to_cube(img):
    return np.ascontiguousarray(img.transpose(1, 2, 0))


def dip_forward(net, z):
    """Apply the network to a ``(rows, cols, bands)`` cube."""
    if any(not np.all(np.isfinite(p)) for p in net.params):
        raise FloatingPointError("network weights are not finite")
    return _to_cube(net.forward(_to_chw(z)))


@dataclass
class AdamState:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def loss_and_grads(net, z, y, mask):
    """Masked squared error ``||mask * (f(z) - y)||^2``; fills the layer gradients."""
    out = net.forward(_to_chw(z))
    m = _to_chw(mask)
    r = m * (out - _to_chw(y))
    loss = float(np.sum(r * r))
    net.backward(2.0 * m * r)
    return loss


def dip_train_step(net, adam, z, y, mask):
    """One Adam step on the masked fit of ``f(z)`` to `y`; returns the pre-update loss."""
    loss = loss_and_grads(net, z, y, mask)
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in net.grads):
        raise FloatingPointError("non-finite DIP loss or gradient")
    adam.update(net.params, net.grads)
    if net.lipschitz_constrained:
        spectral_normalize(net)
    return loss


def _power_step(conv, v, n_iter):
    sigma = 0.0
    for _ in range(n_iter):
        w = conv.adjoint(conv.linear(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
        sigma = np.linalg.norm(conv.linear(v))
    return float(sigma), v


def conv_operator_norm(conv, in_shape, n_iter=200, seed=0):
    """Operator norm of a convolution (no bias) on inputs of shape ``in_shape``."""
    v = np.random.default_rng(seed).standard_normal(in_shape)
    v /= np.linalg.norm(v)
    return _power_step(conv, v, n_iter)[0]


def spectral_normalize(net, n_iter=3):
    """Rescale every conv whose estimated operator norm exceeds 1.

    Power-iteration vectors persist on each layer between calls, so the
    estimate sharpens as training proceeds.
    """
    for conv, shape in zip(net.convs, net.conv_input_shapes()):
        if conv.power_vec is None or conv.power_vec.shape != shape:
            v = np.random.default_rng(0).standard_normal(shape)
            conv.power_vec = v / np.linalg.norm(v)
        sigma, conv.power_vec = _power_step(conv, conv.power_vec, n_iter)
        if sigma > 1.0:
            conv.weight /= sigma


def estimate_lipschitz(net, n_pairs=100, seed=0):
    """Largest ``||f(a) - f(b)|| / ||a - b||`` over random pairs (a lower bound on L)."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    scales = (1.0, 0.1, 0.01)
    best = 0.0
    for i in range(n_pairs):
        a = rng.random(net.input_shape)
        b = a + scales[i % 3] * rng.standard_normal(net.input_shape)
        ratio = np.linalg.norm(net.forward(a) - net.forward(b)) / np.linalg.norm(a - b)
        best = max(best, float(ratio))
    return best


@dataclass
class WmvStopper:
    """Windowed-moving-variance early stopping.

    Tracks the variance of the last `window` metric values and fires once
    that variance has not reached a new minimum for `patience` pushes.
    """

    window: int = 20
    patience: int = 100
    history: list = field(default_factory=list)
    best_variance: float = np.inf
    steps_since_best: int = 0
    best_step: int = -1  # index into `history` of the window ending at the minimum
    stopped: bool = False

    def __post_init__(self):
        if self.window < 2 or self.patience < 1:
            raise ValueError("window must be >= 2 and patience >= 1")

    def should_stop(self, metric):
        self.history.append(float(metric))
        if len(self.history) < self.window:
            return False
        var = float(np.var(self.history[-self.window:]))
        if var < self.best_variance:
            self.best_variance = var
            self.best_step = len(self.history) - 1
            self.steps_since_best = 0
        else:
            self.steps_since_best += 1
        if self.steps_since_best >= self.patience:
            self.stopped = True
        return self.stopped


def wmv_should_stop(stopper, metric):
    return stopper.should_stop(metric)


_CKPT = struct.Struct("<4sHI")


def save_weights(net, path):
    """Versioned binary checkpoint: parameter count, then per array ndim, dims, float64 data."""
    params = net.params
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(b"DIPW", 1, len(params)))
        for p in params:
            fh.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_weights(net, path):
    raw = open(path, "rb").read()
    magic, version, count = _CKPT.unpack_from(raw, 0)
    if magic != b"DIPW" or version != 1:
        raise ValueError(f"{path}: not a DIP checkpoint")
    params = net.params
    if count != len(params):
        raise ValueError(f"{path}: {count} arrays, network has {len(params)}")
    off = _CKPT.size
    for p in params:
        (ndim,) = struct.unpack_from("<I", raw, off)
        shape = struct.unpack_from(f"<{ndim}I", raw, off + 4)
        off += 4 + 4 * ndim
        if tuple(shape) != p.shape:
            raise ValueError(f"{path}: array shape {shape} != {p.shape}")
        n = int(np.prod(shape))
        p[...] = np.frombuffer(raw, "<f8", n, off).reshape(shape)
        off += 8 * n
