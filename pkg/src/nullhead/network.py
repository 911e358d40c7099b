"""Small feature extractors with hand-written reverse-mode gradients.

Layers operate on sample-first arrays (``N x ...``). :class:`Network` takes
and returns sample-last arrays so that its output is the D x N feature
matrix the head consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericalError

LAYER_KINDS = ("dense", "relu", "batchnorm", "conv2d", "maxpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """Layer kind plus its shape integers.

    ``dense``: (fan_in, fan_out); ``batchnorm``: (dim,);
    ``conv2d``: (in_ch, out_ch, kernel, stride, padding); ``maxpool``: (window,);
    ``relu`` and ``flatten``: ().
    """

    kind: str
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def param_count(self) -> int:
        if self.kind == "dense":
            fan_in, fan_out = self.shape
            return fan_in * fan_out + fan_out
        if self.kind == "conv2d":
            cin, cout, k = self.shape[:3]
            return cout * cin * k * k + cout
        if self.kind == "batchnorm":
            return 2 * self.shape[0]
        return 0


class Layer:
    kind = ""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def __init__(self, spec, rng=None):
        super().__init__(spec)
        fan_in, fan_out = spec.shape
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            "b": np.zeros(fan_out),
        }

    def output_shape(self, in_shape):
        if in_shape != (self.spec.shape[0],):
            raise DimensionError(f"dense expects input {(self.spec.shape[0],)}, got {in_shape}")
        return (self.spec.shape[1],)

    def forward(self, x, training):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dout, x):
        grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask):
        return dout * mask, {}


class BatchNorm(Layer):
    """Batch normalization over the sample axis (and spatial axes for images).

    Training mode normalizes with the biased batch statistics and updates
    the running averages; evaluation mode uses the running averages.
    """

    kind = "batchnorm"

    def __init__(self, spec, momentum: float = 0.1, eps: float = 1e-8):
        super().__init__(spec)
        dim = spec.shape[0]
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.buffers = {"running_mean": np.zeros(dim), "running_var": np.ones(dim)}

    def output_shape(self, in_shape):
        if in_shape[0] != self.spec.shape[0]:
            raise DimensionError(
                f"batchnorm over {self.spec.shape[0]} channels got input {in_shape}"
            )
        return in_shape

    @staticmethod
    def _to_2d(x):
        if x.ndim == 2:
            return x
        return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])

    @staticmethod
    def _from_2d(y, shape):
        if len(shape) == 2:
            return y
        n, c, *spatial = shape
        return np.moveaxis(y.reshape(n, *spatial, c), -1, 1)

    def forward(self, x, training):
        x2 = self._to_2d(x)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mean) * inv_std
        out = xhat * gamma + beta
        return self._from_2d(out, x.shape), (xhat, inv_std, training, x.shape)

    def backward(self, dout, cache):
        xhat, inv_std, training, shape = cache
        d2 = self._to_2d(dout)
        grads = {"gamma": np.sum(d2 * xhat, axis=0), "beta": d2.sum(axis=0)}
        dxhat = d2 * self.params["gamma"]
        if training:
            n = d2.shape[0]
            dx = inv_std / n * (
                n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
        else:
            dx = dxhat * inv_std
        return self._from_2d(dx, shape), grads


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, spec, rng=None):
        super().__init__(spec)
        cin, cout, k, _, _ = self._unpack()
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": rng.uniform(-bound, bound, size=(cout, cin, k, k)),
            "b": np.zeros(cout),
        }

    def _unpack(self):
        shape = self.spec.shape
        if len(shape) == 3:
            return (*shape, 1, 0)
        cin, cout, k, stride = shape[:4]
        return cin, cout, k, stride, shape[4] if len(shape) > 4 else 0

    def output_shape(self, in_shape):
        cin, cout, k, stride, pad = self._unpack()
        if len(in_shape) != 3 or in_shape[0] != cin:
            raise DimensionError(f"conv2d expects ({cin}, H, W) input, got {in_shape}")
        h = (in_shape[1] + 2 * pad - k) // stride + 1
        w = (in_shape[2] + 2 * pad - k) // stride + 1
        if h < 1 or w < 1:
            raise DimensionError(f"conv2d kernel {k} does not fit input {in_shape}")
        return (cout, h, w)

    def forward(self, x, training):
        cin, cout, k, stride, pad = self._unpack()
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        n, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
        out = cols @ self.params["W"].reshape(cout, -1).T + self.params["b"]
        out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        return out, (cols, xp.shape, ho, wo)

    def backward(self, dout, cache):
        cols, xp_shape, ho, wo = cache
        cin, cout, k, stride, pad = self._unpack()
        n = dout.shape[0]
        dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        grads = {
            "W": (dmat.T @ cols).reshape(cout, cin, k, k),
            "b": dmat.sum(axis=0),
        }
        dcols = (dmat @ self.params["W"].reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return dxp, grads


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool"

    def output_shape(self, in_shape):
        p = self.spec.shape[0]
        if len(in_shape) != 3 or in_shape[1] < p or in_shape[2] < p:
            raise DimensionError(f"maxpool window {p} does not fit input {in_shape}")
        return (in_shape[0], in_shape[1] // p, in_shape[2] // p)

    def forward(self, x, training):
        p = self.spec.shape[0]
        n, c, h, w = x.shape
        ho, wo = h // p, w // p
        blocks = x[:, :, : ho * p, : wo * p].reshape(n, c, ho, p, wo, p)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)
        arg = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, dout, cache):
        arg, shape = cache
        p = self.spec.shape[0]
        n, c, h, w = shape
        ho, wo = h // p, w // p
        blocks = np.zeros((n, c, ho, wo, p * p))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(shape)
        dx[:, :, : ho * p, : wo * p] = blocks.reshape(n, c, ho * p, wo * p)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), {}


def make_layer(spec: LayerSpec, rng=None) -> Layer:
    if spec.kind == "dense":
        return Dense(spec, rng)
    if spec.kind == "conv2d":
        return Conv2d(spec, rng)
    if spec.kind == "batchnorm":
        return BatchNorm(spec)
    return {"relu": ReLU, "maxpool": MaxPool, "flatten": Flatten}[spec.kind](spec)


class Network:
    """A feed-forward stack of layers.

    ``input_shape`` is the per-sample shape: ``(D_in,)`` for vectors or
    ``(channels, height, width)`` for images. Inputs and outputs keep the
    sample axis last, so :meth:`forward` returns a D x N feature matrix.
    """

    def __init__(self, specs, input_shape, seed: int = 0):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec(*s) for s in specs]
        self.input_shape = tuple(int(s) for s in input_shape)
        rng = np.random.default_rng(seed)
        self.layers = [make_layer(s, rng) for s in self.specs]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as exc:
                raise DimensionError(f"layer {i} ({layer.kind}): {exc}") from None
        if len(shape) != 1:
            raise DimensionError(f"network output must be a vector per sample, got {shape}")
        self.output_dim = shape[0]

    def param_count(self) -> int:
        return sum(s.param_count() for s in self.specs)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{i}.{name}": arr
            for i, layer in enumerate(self.layers)
            for name, arr in layer.params.items()
        }

    def forward(self, x, training: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[:-1] != self.input_shape:
            raise DimensionError(
                f"layer 0: expected input of shape {self.input_shape + ('N',)}, got {x.shape}"
            )
        h = np.moveaxis(x, -1, 0)
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h, training)
            caches.append(cache)
        return h.T, caches

    def backward(self, caches, grad_features):
        """Return ``(param_grads, input_grad)`` for a D x N feature gradient."""
        if len(caches) != len(self.layers):
            raise DimensionError(f"cache has {len(caches)} entries for {len(self.layers)} layers")
        d = np.asarray(grad_features, dtype=np.float64).T
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, caches[i])
            for name, arr in g.items():
                grads[f"{i}.{name}"] = arr
        return grads, np.moveaxis(d, 0, -1)


def architecture(name: str, input_shape, feature_dim: int = 64) -> list[LayerSpec]:
    """Layer specs for the built-in architectures ``mlp-small`` and ``conv-small``."""
    input_shape = tuple(input_shape)
    if name == "mlp-small":
        d_in = int(np.prod(input_shape))
        specs = [] if len(input_shape) == 1 else [LayerSpec("flatten")]
        return specs + [
            LayerSpec("dense", (d_in, 256)),
            LayerSpec("batchnorm", (256,)),
            LayerSpec("relu"),
            LayerSpec("dense", (256, 128)),
            LayerSpec("batchnorm", (128,)),
            LayerSpec("relu"),
            LayerSpec("dense", (128, feature_dim)),
        ]
    if name == "conv-small":
        if len(input_shape) != 3:
            raise ConfigError(f"conv-small needs image input (C, H, W), got {input_shape}")
        c, h, w = input_shape
        return [
            LayerSpec("conv2d", (c, 8, 3, 1, 1)),
            LayerSpec("batchnorm", (8,)),
            LayerSpec("relu"),
            LayerSpec("maxpool", (2,)),
            LayerSpec("conv2d", (8, 16, 3, 1, 1)),
            LayerSpec("batchnorm", (16,)),
            LayerSpec("relu"),
            LayerSpec("maxpool", (2,)),
            LayerSpec("flatten"),
            LayerSpec("dense", (16 * (h // 4) * (w // 4), feature_dim)),
        ]
    raise ConfigError(f"unknown architecture {name!r}")


@dataclass
class Adam:
    """Adam with bias correction. Mutates the parameter arrays in place."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params or params[name].shape != g.shape:
                raise DimensionError(f"gradient {name!r} does not match any parameter")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def softmax_xent(features, labels, weight, bias):
    """Mean softmax cross-entropy of a linear classifier on D x N features.

    ``weight`` is C x D and ``bias`` has length C. Returns ``(loss, grads)``
    with gradients for ``"W"``, ``"b"`` and ``"features"``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = weight.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DimensionError(f"labels must lie in [0, {n_classes})")
    n = features.shape[1]
    logits = weight @ features + bias[:, None]
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    log_p = shifted - log_z
    idx = np.arange(n)
    loss = -float(log_p[labels, idx].mean())
    dlogits = np.exp(log_p)
    dlogits[labels, idx] -= 1.0
    dlogits /= n
    grads = {
        "W": dlogits @ features.T,
        "b": dlogits.sum(axis=1),
        "features": weight.T @ dlogits,
    }
    return loss, grads


class SoftmaxHead:
    """Fully-connected softmax classifier used as the comparison baseline."""

    def __init__(self, feature_dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound = np.sqrt(1.0 / feature_dim)
        self.params = {
            "W": rng.uniform(-bound, bound, size=(num_classes, feature_dim)),
            "b": np.zeros(num_classes),
        }

    @property
    def num_classes(self) -> int:
        return self.params["W"].shape[0]

    def param_count(self) -> int:
        return self.params["W"].size + self.params["b"].size

    def scores(self, features) -> np.ndarray:
        """C x N logits."""
        return self.params["W"] @ features + self.params["b"][:, None]

    def loss(self, features, labels):
        return softmax_xent(features, labels, self.params["W"], self.params["b"])
