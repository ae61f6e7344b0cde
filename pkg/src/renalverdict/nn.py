"""Small dense networks with hand-written backprop, Adam and early stopping.

Each hidden block is ``Linear -> activation -> [BatchNorm] -> [Dropout]``.
The output block is ``Linear -> activation`` only.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
MAGIC = b"VKNN1"


class CacheError(RuntimeError):
    pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    return g


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent layer shapes")

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def of_size(cls, n):
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n))


@dataclass
class MLP:
    layers: list
    batchnorm: list = field(default_factory=list)
    dropout_p: float = 0.0
    _version: int = 0

    def __post_init__(self):
        if not self.batchnorm:
            self.batchnorm = [None] * len(self.layers)
        if len(self.batchnorm) != len(self.layers):
            raise ValueError("one batchnorm slot per layer required")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer size mismatch {a.n_out} -> {b.n_in}")
        if self.batchnorm[-1] is not None:
            raise ValueError("output layer cannot carry batchnorm")

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def parameters(self):
        """Trainable arrays in a fixed order; updated in place by Adam."""
        out = []
        for layer, bn in zip(self.layers, self.batchnorm):
            out += [layer.weights, layer.bias]
            if bn is not None:
                out += [bn.gamma, bn.beta]
        return out

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self._version += 1

    def forward(self, x, train=False, rng=None):
        """Returns ``(output, cache)``. ``rng`` is required for dropout in
        training mode."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.layers[0].n_in:
            raise ValueError(f"input width {x.shape[1]} != {self.layers[0].n_in}")
        use_dropout = train and self.dropout_p > 0
        if use_dropout and rng is None:
            raise ValueError("dropout in training mode needs an rng")
        steps = []
        h = x
        last = len(self.layers) - 1
        for i, (layer, bn) in enumerate(zip(self.layers, self.batchnorm)):
            step = {"x": h}
            z = h @ layer.weights.T + layer.bias
            a = _act(layer.activation, z)
            step["z"], step["a"] = z, a
            h = a
            if bn is not None:
                if train:
                    mu = h.mean(axis=0)
                    var = h.var(axis=0)
                    n = h.shape[0]
                    bn.running_mean *= 1 - BN_MOMENTUM
                    bn.running_mean += BN_MOMENTUM * mu
                    unbiased = var * n / max(n - 1, 1)
                    bn.running_var *= 1 - BN_MOMENTUM
                    bn.running_var += BN_MOMENTUM * unbiased
                else:
                    mu, var = bn.running_mean, bn.running_var
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (h - mu) * inv
                step["bn"] = (xhat, inv, train)
                h = xhat * bn.gamma + bn.beta
            if use_dropout and i < last:
                keep = 1.0 - self.dropout_p
                mask = (rng.random(h.shape) < keep) / keep
                step["mask"] = mask
                h = h * mask
            steps.append(step)
        return h, {"steps": steps, "version": self._version}

    def backward(self, grad_out, cache):
        """Backpropagate ``grad_out`` (dL/doutput).

        Returns ``(grads, grad_input)`` with grads aligned to
        :meth:`parameters`.
        """
        if cache is None or "steps" not in cache:
            raise CacheError("missing forward cache")
        if cache["version"] != self._version:
            raise CacheError("stale forward cache: parameters changed since forward")
        g = np.asarray(grad_out, dtype=float)
        per_layer = []
        for layer, bn, step in reversed(list(zip(self.layers, self.batchnorm, cache["steps"]))):
            if "mask" in step:
                g = g * step["mask"]
            bn_grads = None
            if bn is not None:
                xhat, inv, batch_stats = step["bn"]
                dgamma = (g * xhat).sum(axis=0)
                dbeta = g.sum(axis=0)
                gx = g * bn.gamma
                if batch_stats:
                    n = g.shape[0]
                    g = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
                else:
                    g = gx * inv
                bn_grads = [dgamma, dbeta]
            g = _act_grad(layer.activation, step["z"], step["a"], g)
            dW = g.T @ step["x"]
            db = g.sum(axis=0)
            g = g @ layer.weights
            per_layer.append([dW, db] + (bn_grads or []))
        grads = [a for chunk in reversed(per_layer) for a in chunk]
        return grads, g

    def predict(self, x):
        return self.forward(x, train=False)[0]


def init_seeded(sizes, seed, hidden_activation="relu", output_activation="linear",
                dropout_p=0.0, batchnorm=False):
    """Build an MLP with seeded uniform initialisation.

    He-uniform for ReLU layers, Glorot-uniform otherwise; zero biases.
    ``batchnorm`` applies to every hidden layer.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError("need at least two sizes, all >= 1")
    rng = np.random.default_rng(seed)
    layers, bns = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        if act == "relu":
            limit = np.sqrt(6.0 / n_in)
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-limit, limit, size=(n_out, n_in))
        layers.append(DenseLayer(W, np.zeros(n_out), act))
        hidden = i < len(sizes) - 2
        bns.append(BatchNorm.of_size(n_out) if (batchnorm and hidden) else None)
    return MLP(layers, bns, dropout_p)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_step(params, grads, state: AdamState):
    """In-place bias-corrected Adam update of ``params``; returns state."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lengths differ")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class EarlyStopping:
    """Stop once the monitored loss fails to improve by more than
    ``min_delta`` for ``patience`` consecutive epochs."""

    def __init__(self, patience=10, min_delta=1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0
        self.best_epoch = -1

    def update(self, loss, epoch=None) -> bool:
        """Record a loss; True means stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
            self.best_epoch = epoch if epoch is not None else self.best_epoch + 1
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def snapshot(net: MLP):
    """Deep copy of every array needed to restore ``net``."""
    out = []
    for layer, bn in zip(net.layers, net.batchnorm):
        out.append((layer.weights.copy(), layer.bias.copy(),
                    None if bn is None else (bn.gamma.copy(), bn.beta.copy(),
                                             bn.running_mean.copy(), bn.running_var.copy())))
    return out


def restore(net: MLP, snap):
    for layer, bn, (W, b, bns) in zip(net.layers, net.batchnorm, snap):
        layer.weights[...] = W
        layer.bias[...] = b
        if bn is not None:
            bn.gamma[...], bn.beta[...], bn.running_mean[...], bn.running_var[...] = bns
    net.touch()


# Checkpoint layout (all little-endian):
#   5 bytes  magic "VKNN1"
#   u32      layer count L
#   u32 x (L+1) layer sizes
#   per layer: u8 activation code (0 linear, 1 relu, 2 sigmoid), u8 batchnorm flag
#   f32      dropout_p
#   per layer: W (out*in, row-major), b (out),
#              then gamma, beta, running_mean, running_var (out each) if flagged
def save_checkpoint(net: MLP, path) -> None:
    buf = bytearray(MAGIC)
    sizes = net.sizes
    buf += struct.pack("<I", len(net.layers))
    buf += struct.pack(f"<{len(sizes)}I", *sizes)
    for layer, bn in zip(net.layers, net.batchnorm):
        buf += struct.pack("<BB", ACTIVATIONS.index(layer.activation), bn is not None)
    buf += struct.pack("<f", net.dropout_p)
    for layer, bn in zip(net.layers, net.batchnorm):
        arrays = [layer.weights, layer.bias]
        if bn is not None:
            arrays += [bn.gamma, bn.beta, bn.running_mean, bn.running_var]
        for a in arrays:
            buf += np.ascontiguousarray(a, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path) -> MLP:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a VKNN1 checkpoint")
    off = 5
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    sizes = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    flags = []
    for _ in range(n_layers):
        flags.append(struct.unpack_from("<BB", data, off))
        off += 2
    (dropout_p,) = struct.unpack_from("<f", data, off)
    off += 4

    def take(n):
        nonlocal off
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(float)
        off += 4 * n
        return a

    layers, bns = [], []
    for (act, has_bn), n_in, n_out in zip(flags, sizes[:-1], sizes[1:]):
        W = take(n_out * n_in).reshape(n_out, n_in)
        layers.append(DenseLayer(W, take(n_out), ACTIVATIONS[act]))
        bns.append(BatchNorm(take(n_out), take(n_out), take(n_out), take(n_out)) if has_bn else None)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return MLP(layers, bns, float(dropout_p))
