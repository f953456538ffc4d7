"""Dense regressor from a 32x32 image to the 3x3 Fisher parameter, with manual
backpropagation, Adam, and a binary checkpoint format.

Checkpoint layout (all little-endian)::

    8 bytes   magic  b"RSSLNET\\x00"
    uint32    format version (1)
    uint32    number of dense layers L
    uint32    L + 1 layer widths, input first
    float64   for each layer: weight (fan_in x fan_out, row-major), then bias
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from rotssl import fisher

LAYER_DIMS = (32 * 32, 256, 64, 9)
CHECKPOINT_MAGIC = b"RSSLNET\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class NetParams:
    weights: list
    biases: list

    @property
    def dims(self):
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self):
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zeros_like(self):
        return NetParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


# Gradients have the same structure as the parameters.
NetGrads = NetParams


def init_params(rng, dims=LAYER_DIMS):
    """Fan-in scaled uniform init, limit ``sqrt(1 / fan_in)``."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-lim, lim, size=fan_out))
    return NetParams(weights, biases)


def zero_params(dims=LAYER_DIMS):
    return NetParams([np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])],
                     [np.zeros(o) for o in dims[1:]])


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    return x.reshape(1 if single else x.shape[0], -1), single


def _forward_cache(p, x):
    h = x
    cache = [h]
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite activation in dense layer {i}")
        cache.append(h)
    return cache


def forward(p, x):
    """Fisher parameters ``A`` for one image ``(H, W)`` or a batch ``(N, H, W)``.

    The 9 outputs are reshaped row-major into ``A``.
    """
    flat, single = _as_batch(x)
    out = _forward_cache(p, flat)[-1].reshape(-1, 3, 3)
    return out[0] if single else out


def forward_backward(p, x, loss_grad_fn):
    """Run forward, ask ``loss_grad_fn(A) -> (loss, dL/dA)`` for the loss, backprop.

    Returns ``(loss, A, grads)``; ``loss`` is whatever ``loss_grad_fn`` returns
    and the gradient is accumulated over the batch.
    """
    flat, single = _as_batch(x)
    cache = _forward_cache(p, flat)
    a = cache[-1].reshape(-1, 3, 3)
    loss, d_a = loss_grad_fn(a[0] if single else a)
    grads = _backward_from_cache(p, cache, np.asarray(d_a, dtype=float).reshape(-1, 9))
    return loss, a[0] if single else a, grads


def _backward_from_cache(p, cache, delta):
    gw, gb = [None] * len(p.weights), [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        gw[i] = cache[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ p.weights[i].T) * (1.0 - cache[i] ** 2)
    return NetParams(gw, gb)


def backward(p, x, d_a):
    """Parameter gradients given ``dL/dA`` for each input (summed over the batch)."""
    flat, _ = _as_batch(x)
    cache = _forward_cache(p, flat)
    return _backward_from_cache(p, cache, np.asarray(d_a, dtype=float).reshape(-1, 9))


def add_grads(g1, g2, scale=1.0):
    return NetParams([a + scale * b for a, b in zip(g1.weights, g2.weights)],
                     [a + scale * b for a, b in zip(g1.biases, g2.biases)])


def scale_grads(g, c):
    return NetParams([c * w for w in g.weights], [c * b for b in g.biases])


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, p, **kw):
        arrs = list(p.arrays())
        return cls(m=[np.zeros_like(a) for a in arrs], v=[np.zeros_like(a) for a in arrs], **kw)


def adam_update(p, g, o):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs untouched."""
    step = o.step + 1
    new_m, new_v, new_arrays = [], [], []
    c1 = 1.0 - o.beta1 ** step
    c2 = 1.0 - o.beta2 ** step
    for a, ga, m, v in zip(p.arrays(), g.arrays(), o.m, o.v):
        m = o.beta1 * m + (1.0 - o.beta1) * ga
        v = o.beta2 * v + (1.0 - o.beta2) * ga * ga
        new_arrays.append(a - o.lr * (m / c1) / (np.sqrt(v / c2) + o.eps))
        new_m.append(m)
        new_v.append(v)
    params = NetParams(new_arrays[0::2], new_arrays[1::2])
    state = OptimState(o.lr, o.beta1, o.beta2, o.eps, step, new_m, new_v)
    return params, state


def _loss_fn(kind, target):
    if kind == "nll":
        return lambda a: fisher.nll_loss(a, target)
    if kind == "cross_entropy":
        t_exp = fisher.expected_rotation(target)
        return lambda a: fisher.cross_entropy(target, a, teacher_expected=t_exp)
    raise ValueError(f"unknown loss kind {kind!r}")


def grad_check(p, x, loss_kind, rng, target=None, frac=0.01, h=1e-4, floor=1e-7):
    """Max relative error between backprop and central differences.

    Checks a random ``frac`` subset of parameters. ``target`` is the label
    rotation for ``"nll"`` or the fixed teacher ``A`` for ``"cross_entropy"``;
    a random one is drawn when omitted. Relative error uses
    ``max(|fd|, |analytic|, floor)`` as the denominator, so an all-zero
    gradient reports 0.
    """
    from rotssl import so3

    if target is None:
        target = so3.sample_uniform_rotation(rng) if loss_kind == "nll" else 3.0 * rng.standard_normal((3, 3))
    fn = _loss_fn(loss_kind, target)
    _, _, grads = forward_backward(p, x, fn)
    # Collect all perturbed outputs first, then evaluate the losses in one batch.
    outs, analytic = [], []
    for arr, garr in zip(p.arrays(), grads.arrays()):
        flat, gflat = arr.reshape(-1), garr.reshape(-1)
        k = max(1, int(round(frac * flat.size)))
        for idx in rng.choice(flat.size, size=k, replace=False):
            old = flat[idx]
            flat[idx] = old + h
            outs.append(forward(p, x))
            flat[idx] = old - h
            outs.append(forward(p, x))
            flat[idx] = old
            analytic.append(gflat[idx])
    outs = np.asarray(outs)
    losses = np.asarray(fn(outs.reshape(-1, 3, 3))[0]).reshape(len(outs), -1).sum(axis=1)
    fd = (losses[0::2] - losses[1::2]) / (2 * h)
    analytic = np.asarray(analytic)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    return float(np.max(np.abs(fd - analytic) / denom))


def save_checkpoint(path, p):
    dims = p.dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(p.weights)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for arr in p.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += 4 * (n_layers + 1)
    expected = sum(i * o + o for i, o in zip(dims[:-1], dims[1:])) * 8
    if len(data) - off != expected:
        raise CheckpointError(f"{path}: expected {expected} parameter bytes, found {len(data) - off}")
    weights, biases = [], []
    for i, o in zip(dims[:-1], dims[1:]):
        weights.append(np.frombuffer(data, "<f8", i * o, off).reshape(i, o).astype(float))
        off += 8 * i * o
        biases.append(np.frombuffer(data, "<f8", o, off).astype(float))
        off += 8 * o
    return NetParams(weights, biases)
