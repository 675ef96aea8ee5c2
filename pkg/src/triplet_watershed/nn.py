"""Small numpy network library with hand-written backward passes.

Only what the embedding network needs: linear, 2-D convolution, batch
normalization and ReLU. All parameters of a :class:`Model` live in one flat
vector; each layer works on views into it, so SGD is a single vector update
and gradients come back aligned with ``model.params``.

Image batches use NCHW layout.
"""
from __future__ import annotations

import json
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"TWNET1"
FORMAT_VERSION = 1

_BLOB_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, layer_index, expected, got):
        self.layer_index = layer_index
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer_index}: expected input shape {expected}, got {got}")


class Layer:
    kind = None

    def __init__(self):
        self.cache = None

    def n_params(self):
        return 0

    def bind(self, params, grads):
        """Attach views into the model's flat parameter and gradient vectors."""

    def reset_parameters(self, rng):
        pass

    def output_shape(self, shape):
        return shape

    def check_input(self, shape):
        return True

    def forward(self, x, training):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self):
        return {"kind": self.kind}


class Linear(Layer):
    """Affine map on the flattened non-batch dimensions."""

    kind = "linear"

    def __init__(self, in_features, out_features):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def n_params(self):
        return self.out_features * (self.in_features + 1)

    def bind(self, params, grads):
        k = self.out_features * self.in_features
        self.weight = params[:k].reshape(self.out_features, self.in_features)
        self.bias = params[k:]
        self.dweight = grads[:k].reshape(self.out_features, self.in_features)
        self.dbias = grads[k:]

    def reset_parameters(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = rng.uniform(-bound, bound, self.bias.shape)

    def check_input(self, shape):
        return int(np.prod(shape)) == self.in_features

    def output_shape(self, shape):
        return (self.out_features,)

    def forward(self, x, training):
        in_shape = x.shape
        x2 = x.reshape(len(x), -1)
        if training:
            self.cache = (x2, in_shape)
        return x2 @ self.weight.T + self.bias

    def backward(self, dout):
        x2, in_shape = self.cache
        self.dweight += dout.T @ x2
        self.dbias += dout.sum(axis=0)
        return (dout @ self.weight).reshape(in_shape)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}


class Conv2d(Layer):
    """Cross-correlation via im2col; input (N, C, H, W)."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size ** 2

    def n_params(self):
        return self.out_channels * (self.fan_in + 1)

    def bind(self, params, grads):
        k = self.out_channels * self.fan_in
        self.weight = params[:k].reshape(self.out_channels, self.fan_in)
        self.bias = params[k:]
        self.dweight = grads[:k].reshape(self.out_channels, self.fan_in)
        self.dbias = grads[k:]

    def reset_parameters(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = rng.uniform(-bound, bound, self.bias.shape)

    def check_input(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            return False
        return all(s + 2 * self.padding >= self.kernel_size for s in shape[1:])

    def output_shape(self, shape):
        k, s, p = self.kernel_size, self.stride, self.padding
        _, h, w = shape
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, training):
        n, c, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        _, ho, wo = self.output_shape((c, h, w))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ self.weight.T + self.bias
        if training:
            self.cache = (cols, xp.shape, x.shape)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, padded_shape, in_shape = self.cache
        n, c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        _, _, ho, wo = dout.shape
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.dweight += d2.T @ cols
        self.dbias += d2.sum(axis=0)
        dcols = (d2 @ self.weight).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return dxp

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding}


class BatchNorm(Layer):
    """Per-channel normalization over the batch (and spatial axes for NCHW).

    Train mode normalizes with batch statistics and updates the running
    mean and (unbiased) variance; eval mode uses the running values only.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def n_params(self):
        return 2 * self.num_features

    def bind(self, params, grads):
        c = self.num_features
        self.gamma, self.beta = params[:c], params[c:]
        self.dgamma, self.dbeta = grads[:c], grads[c:]

    def reset_parameters(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0
        self.running_mean = np.zeros(self.num_features, dtype=self.gamma.dtype)
        self.running_var = np.ones(self.num_features, dtype=self.gamma.dtype)

    def check_input(self, shape):
        return len(shape) in (1, 3) and shape[0] == self.num_features

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, a, x):
        return a if x.ndim == 2 else a[None, :, None, None]

    def forward(self, x, training):
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.num_features
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
            unbiased = var * m / max(m - 1, 1)
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            self.running_var = (1 - mom) * self.running_var + mom * unbiased
            self.cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self._bcast(self.running_mean, x)) * self._bcast(inv_std, x)
        return xhat * self._bcast(self.gamma, x) + self._bcast(self.beta, x)

    def backward(self, dout):
        xhat, inv_std = self.cache
        axes = self._axes(dout)
        self.dgamma += (dout * xhat).sum(axis=axes)
        self.dbeta += dout.sum(axis=axes)
        dxhat = dout * self._bcast(self.gamma, dout)
        mean_d = dxhat.mean(axis=axes, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * self._bcast(inv_std, dout)

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features,
                "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training):
        mask = x > 0
        self.mask = mask
        if training:
            self.cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self.cache


_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, BatchNorm, ReLU)}


def layer_from_spec(spec):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**spec)


class Model:
    """Sequential stack of layers sharing one flat parameter vector.

    Parameters
    ----------
    layers : list of dict
        Layer specs, e.g. ``{"kind": "linear", "in_features": 4, "out_features": 2}``.
    input_shape : tuple of int
        Shape of one sample (no batch axis).
    seed : int
        Seed for the uniform(+-1/sqrt(fan_in)) initialization.
    dtype : numpy dtype
        Storage and compute dtype; float64 for gradient checks.
    """

    def __init__(self, layers, input_shape, seed=0, dtype=np.float64):
        self.layer_specs = [dict(s) for s in layers]
        self.layers = [layer_from_spec(s) for s in self.layer_specs]
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.training = True
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            if not layer.check_input(self.shapes[-1]):
                raise ShapeError(i, self._expected(layer), self.shapes[-1])
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        self.offsets = np.cumsum([0] + [layer.n_params() for layer in self.layers])
        self.params = np.zeros(int(self.offsets[-1]), dtype=self.dtype)
        self.grads = np.zeros_like(self.params)
        for layer, lo, hi in zip(self.layers, self.offsets[:-1], self.offsets[1:]):
            layer.bind(self.params[lo:hi], self.grads[lo:hi])
        self.reset_parameters(self.seed)

    @staticmethod
    def _expected(layer):
        if isinstance(layer, Linear):
            return (layer.in_features,)
        if isinstance(layer, Conv2d):
            return (layer.in_channels, "H", "W")
        if isinstance(layer, BatchNorm):
            return (layer.num_features, "...")
        return ("any",)

    def reset_parameters(self, seed):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.reset_parameters(rng)

    @property
    def n_params(self):
        return len(self.params)

    @property
    def output_dim(self):
        return int(np.prod(self.shapes[-1]))

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        for layer in self.layers:
            layer.cache = None
        return self

    def forward(self, batch):
        x = np.asarray(batch)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(0, self.input_shape, x.shape[1:])
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, self.training)
        return x.reshape(len(x), -1)

    __call__ = forward

    def backward(self, upstream_grad):
        """Backpropagate ``d loss / d output``.

        Returns a copy of the flat parameter gradient and the gradient with
        respect to the batch passed to the last :meth:`forward`.
        """
        if any(layer.cache is None for layer in self.layers):
            raise RuntimeError("backward needs a preceding forward in train mode")
        self.grads[...] = 0.0
        d = np.asarray(upstream_grad, dtype=self.dtype)
        d = d.reshape((len(d),) + self.shapes[-1])
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return self.grads.copy(), d

    def relu_masks(self):
        return [layer.mask.copy() for layer in self.layers
                if isinstance(layer, ReLU) and getattr(layer, "mask", None) is not None]

    # running statistics -------------------------------------------------
    def _bn_layers(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def get_state(self):
        out = []
        for layer in self._bn_layers():
            out += [layer.running_mean, layer.running_var]
        if not out:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate(out).astype(self.dtype)

    def set_state(self, state):
        state = np.asarray(state)
        i = 0
        for layer in self._bn_layers():
            c = layer.num_features
            layer.running_mean = state[i:i + c].astype(self.dtype)
            layer.running_var = state[i + c:i + 2 * c].astype(self.dtype)
            i += 2 * c
        if i != len(state):
            raise ValueError(f"running-stat blob has {len(state)} values, expected {i}")

    # serialization ------------------------------------------------------
    def to_bytes(self, extra=None):
        """Serialize as ``TWNET1`` + u32 header length + JSON header + blobs."""
        blob_dtype = "f32le" if self.dtype == np.float32 else "f64le"
        dt = _BLOB_DTYPES[blob_dtype]
        params = self.params.astype(dt).tobytes()
        state = self.get_state().astype(dt).tobytes()
        header = {
            "format": MAGIC.decode(),
            "version": FORMAT_VERSION,
            "layers": self.layer_specs,
            "input_shape": list(self.input_shape),
            "embed_dim": self.output_dim,
            "seed": self.seed,
            "dtype": blob_dtype,
            "n_params": self.n_params,
            "param_bytes": len(params),
            "state_bytes": len(state),
            "extra": extra or {},
        }
        raw = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<I", len(raw)) + raw + params + state

    @classmethod
    def from_bytes(cls, data):
        """Inverse of :meth:`to_bytes`; returns ``(model, extra)``."""
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("not a TWNET1 model file (bad magic)")
        off = len(MAGIC)
        if len(data) < off + 4:
            raise ValueError("truncated model file")
        (hlen,) = struct.unpack("<I", data[off:off + 4])
        off += 4
        header = json.loads(data[off:off + hlen].decode())
        off += hlen
        dt = _BLOB_DTYPES[header["dtype"]]
        pb, sb = header["param_bytes"], header["state_bytes"]
        if len(data) != off + pb + sb:
            raise ValueError(
                f"model file size mismatch: expected {off + pb + sb} bytes, got {len(data)}")
        model = cls(header["layers"], header["input_shape"], seed=header["seed"],
                    dtype=np.float32 if header["dtype"] == "f32le" else np.float64)
        params = np.frombuffer(data[off:off + pb], dtype=dt)
        if len(params) != model.n_params:
            raise ValueError(f"parameter blob has {len(params)} values, expected {model.n_params}")
        model.params[...] = params
        model.set_state(np.frombuffer(data[off + pb:off + pb + sb], dtype=dt))
        return model, header.get("extra", {})

    def save(self, path, extra=None):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def mlp_spec(n_inputs, embed_dim=64, hidden=(128, 128)):
    """Batchnorm before every linear layer, ReLU after each hidden one."""
    layers = [{"kind": "batchnorm", "num_features": n_inputs}]
    width = n_inputs
    for h in hidden:
        layers += [{"kind": "linear", "in_features": width, "out_features": h},
                   {"kind": "batchnorm", "num_features": h},
                   {"kind": "relu"}]
        width = h
    layers.append({"kind": "linear", "in_features": width, "out_features": embed_dim})
    return layers


def conv_spec(in_channels, patch_size, embed_dim=64, channels=(24, 48, 32)):
    """Three 3x3 convolutions (second and third with stride 2) and a linear head,
    with batchnorm in front of every layer."""
    c1, c2, c3 = channels
    size = patch_size
    for _ in range(2):
        size = (size + 2 - 3) // 2 + 1
    return [
        {"kind": "batchnorm", "num_features": in_channels},
        {"kind": "conv2d", "in_channels": in_channels, "out_channels": c1,
         "kernel_size": 3, "stride": 1, "padding": 1},
        {"kind": "batchnorm", "num_features": c1},
        {"kind": "relu"},
        {"kind": "conv2d", "in_channels": c1, "out_channels": c2,
         "kernel_size": 3, "stride": 2, "padding": 1},
        {"kind": "batchnorm", "num_features": c2},
        {"kind": "relu"},
        {"kind": "conv2d", "in_channels": c2, "out_channels": c3,
         "kernel_size": 3, "stride": 2, "padding": 1},
        {"kind": "batchnorm", "num_features": c3},
        {"kind": "relu"},
        {"kind": "linear", "in_features": c3 * size * size, "out_features": embed_dim},
    ]


def grad_check(model, batch, loss_fn, wrt="params", h=1e-5, max_checks=10_000,
               rng=None, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(output)`` must return ``(loss, d_loss/d_output)``. Above
    ``max_checks`` entries a random subsample is perturbed. Entries whose
    +h and -h evaluations fall on different sides of a ReLU kink are skipped.
    The error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if wrt == "params" and model.n_params == 0:
        raise ValueError("model has no parameters")
    batch = np.array(batch, dtype=model.dtype)
    state = model.get_state()
    was_training = model.training
    model.train()

    def evaluate():
        loss, _ = loss_fn(model.forward(batch))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss in gradient check")
        return float(loss), model.relu_masks()

    loss, dout = loss_fn(model.forward(batch))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss in gradient check")
    pgrad, xgrad = model.backward(dout)
    target, analytic = (model.params, pgrad) if wrt == "params" else (batch, xgrad)
    flat = target.reshape(-1)
    analytic = analytic.reshape(-1)
    idx = np.arange(flat.size)
    if flat.size > max_checks:
        rng = np.random.default_rng(rng)
        idx = rng.choice(flat.size, max_checks, replace=False)

    worst = 0.0
    for i in idx.tolist():
        orig = flat[i]
        flat[i] = orig + h
        lp, mp = evaluate()
        flat[i] = orig - h
        lm, mm = evaluate()
        flat[i] = orig
        if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
            continue
        numeric = (lp - lm) / (2 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    model.set_state(state)
    model.training = was_training
    return worst
