"""A minimal dense network stack: parameter tensors, fully connected / batch
norm / ReLU / dropout layers, softmax cross-entropy, SGD with momentum and
weight decay, and a finite-difference gradient checker.

Parameters are stored in 32-bit floats (what the checkpoint format holds, so
save/load is lossless); activations flow in float64. Gradient buffers
accumulate across a batch; the cross-entropy gradient already carries the
1/batch factor, so accumulated sums arrive at the optimizer as batch means
and sgd_step applies them as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Tensor:
    """A parameter block: values plus a same-shape gradient buffer.

    Wraps the given arrays by reference (no copy), so external owners like a
    probing filter bank can share storage with the optimizer. `decay` marks
    whether weight decay applies; biases, batch-norm scales, and probing
    locations are exempt.
    """

    def __init__(self, values, grad=None, name="", decay=True):
        self.values = np.asarray(values)
        if self.values.ndim > 3:
            raise ValueError(f"rank {self.values.ndim} tensor; at most 3 supported")
        self.grad = np.zeros_like(self.values) if grad is None else np.asarray(grad)
        if self.grad.shape != self.values.shape:
            raise ValueError(f"grad shape {self.grad.shape} != values {self.values.shape}")
        self.name = name
        self.decay = decay

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grad[:] = 0


class FullyConnected:
    """y = x W^T + b with W of shape (out, in), Xavier-uniform initialized."""

    def __init__(self, in_dim, out_dim, rng, name="fc", dtype=np.float32):
        bound = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        self.weight = Tensor(w, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), name=f"{name}.bias", decay=False)
        self.name = name
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"{self.name}: input {x.shape} vs weight {self.weight.shape}")
        self._x = x
        return x @ self.weight.values.T.astype(np.float64) + self.bias.values

    def backward(self, upstream):
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        upstream = np.asarray(upstream, dtype=np.float64)
        self.weight.grad += upstream.T @ self._x
        self.bias.grad += upstream.sum(axis=0)
        return upstream @ self.weight.values.astype(np.float64)


class BatchNorm:
    """Per-feature batch normalization: train mode normalizes by batch
    statistics (variance with denominator N) and maintains running stats by
    exponential moving average; eval mode applies the running stats."""

    def __init__(self, features, momentum=0.9, epsilon=1e-5, name="bn", dtype=np.float32):
        self.gamma = Tensor(np.ones(features, dtype=dtype), name=f"{name}.gamma", decay=False)
        self.beta = Tensor(np.zeros(features, dtype=dtype), name=f"{name}.beta", decay=False)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.name = name
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if train:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: batch norm needs a batch of >= 2 in train mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean[:] = m * self.running_mean + (1 - m) * mean
            self.running_var[:] = m * self.running_var + (1 - m) * var
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.epsilon)
            xhat = (x - self.running_mean) * inv_std
            self._cache = None
        return self.gamma.values * xhat + self.beta.values

    def backward(self, upstream):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward requires a train-mode forward")
        xhat, inv_std = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        b = upstream.shape[0]
        self.gamma.grad += (upstream * xhat).sum(axis=0)
        self.beta.grad += upstream.sum(axis=0)
        dxhat = upstream * self.gamma.values
        return (
            inv_std
            / b
            * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        )


class ReLU:
    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, upstream):
        return np.where(self._mask, np.asarray(upstream, dtype=np.float64), 0.0)


class Dropout:
    """Inverted dropout: zero with probability `rate` and scale survivors by
    1/(1-rate) in train mode, identity in eval mode. The mask comes from the
    generator passed to forward, so determinism is the caller's seed."""

    def __init__(self, rate=0.5, name="dropout"):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.name = name
        self._mask = None

    def params(self):
        return []

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs a generator")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, upstream):
        upstream = np.asarray(upstream, dtype=np.float64)
        return upstream if self._mask is None else upstream * self._mask


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch plus the logit gradients
    (softmax - one-hot) / batch. Row maxima are subtracted first, so huge
    logits cannot overflow."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label outside class range")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(b), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    max_iterations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


class Sgd:
    """Momentum SGD: g' = g + decay*w (decay-exempt blocks skip the second
    term); v = momentum*v - rate*g'; w += v. Velocities live in the same
    dtype as their parameters so checkpoints capture them losslessly."""

    def __init__(self, params, cfg: SgdConfig):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names: {sorted(names)}")
        self.params = list(params)
        self.cfg = cfg
        self.velocities = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        lr = self.cfg.learning_rate
        for p, v in zip(self.params, self.velocities):
            g = p.grad
            if p.decay and self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.values
            v *= self.cfg.momentum
            v -= (lr * g).astype(v.dtype, copy=False)
            p.values += v

    def zero_grads(self):
        for p in self.params:
            p.zero_grad()


class Network:
    """An ordered layer stack ending in softmax cross-entropy."""

    def __init__(self, layers):
        self.layers = list(layers)
        names = [p.name for p in self.params()]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names: {sorted(names)}")

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, upstream):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream

    def state_blocks(self):
        """Every array a checkpoint must capture, name -> array, in a fixed
        order: parameters first, then auxiliary state (running stats)."""
        blocks = {}
        for p in self.params():
            blocks[p.name] = p.values
        for layer in self.layers:
            if hasattr(layer, "state"):
                blocks.update(layer.state())
        return blocks


def block_error(analytic, numeric):
    """Max elementwise relative error with a floor at 1e-3 of the block's
    dominant magnitude, so near-zero entries are judged at block scale
    instead of amplifying finite-difference noise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3 * scale + 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(fragment, x, labels=None, step=1e-4, seed=0):
    """Compare a fragment's analytic gradients against central finite
    differences, in double precision, returning {block name: max rel error}.

    The fragment provides params() / forward / backward. When labels are
    given the loss is the fragment's softmax cross-entropy; otherwise a fixed
    random projection of the output, which exercises every output entry. The
    probe step is `step` scaled by each entry's magnitude (at least `step`).
    Stochastic layers must be given the same generator stream on every call,
    which this harness guarantees by reseeding per evaluation.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    out = fragment.forward(x, train=True, rng=np.random.default_rng(seed + 1))
    projection = rng.standard_normal(out.shape)

    def loss():
        y = fragment.forward(x, train=True, rng=np.random.default_rng(seed + 1))
        if labels is None:
            return float((y * projection).sum())
        return float(softmax_cross_entropy(y, labels)[0])

    for p in fragment.params():
        p.zero_grad()
    y = fragment.forward(x, train=True, rng=np.random.default_rng(seed + 1))
    if labels is None:
        fragment.backward(projection)
    else:
        fragment.backward(softmax_cross_entropy(y, labels)[1])

    report = {}
    for p in fragment.params():
        analytic = p.grad.astype(np.float64).copy()
        numeric = np.zeros_like(analytic)
        flat_v = p.values.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_v.size):
            keep = flat_v[i]
            h = step * max(1.0, abs(float(keep)))
            flat_v[i] = keep + h
            hi = loss()
            flat_v[i] = keep - h
            lo = loss()
            flat_v[i] = keep
            flat_n[i] = (hi - lo) / (2 * h)
        report[p.name or f"block{len(report)}"] = block_error(analytic, numeric)
    return report
