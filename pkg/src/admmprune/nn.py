"""A small feed-forward CNN with exact backpropagation and SGD with momentum.

The network is ``[conv -> relu -> (maxpool 2x2)] * M -> [dense -> relu] *
(N-M-1) -> dense`` followed by softmax cross-entropy.  Convolutions are
stride-1, unpadded, and lowered to GEMM through :mod:`admmprune.tensor`, so
the structured sparsity of a conv weight tensor is exactly the row/column
sparsity of the matrix that multiplies the lowered activations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import col2im, gemm, im2col, load_arrays, save_arrays, to_gemm_matrix

CHECKPOINT_FORMAT = "admmprune-checkpoint/1"


@dataclass(frozen=True)
class Architecture:
    """Layer sizes of a conv-then-dense classifier.

    ``conv`` holds ``(filters, kernel)`` pairs; every conv is followed by a
    ReLU and, when ``pool`` is set, a 2x2 max-pool.  ``dense`` lists hidden
    widths; the output layer of ``num_classes`` units is appended.
    """

    input_shape: Tuple[int, int, int] = (1, 28, 28)
    conv: Tuple[Tuple[int, int], ...] = ((8, 3), (16, 3))
    dense: Tuple[int, ...] = (64,)
    num_classes: int = 10
    pool: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv", tuple((int(f), int(k)) for f, k in self.conv))
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if not self.conv:
            raise ShapeError("at least one conv layer is required")
        self.shapes()  # validates that the layers compose

    @property
    def conv_names(self):
        return [f"conv{i + 1}" for i in range(len(self.conv))]

    @property
    def dense_names(self):
        return [f"fc{i + 1}" for i in range(len(self.dense) + 1)]

    def shapes(self):
        """Parameter shapes keyed by ``"<layer>.weight"`` / ``"<layer>.bias"``."""
        c, h, w = self.input_shape
        out = {}
        for name, (f, k) in zip(self.conv_names, self.conv):
            if h < k or w < k:
                raise ShapeError(f"{name}: kernel {k} does not fit {h}x{w} input")
            out[f"{name}.weight"] = (f, c, k, k)
            out[f"{name}.bias"] = (f,)
            c, h, w = f, h - k + 1, w - k + 1
            if self.pool:
                if h < 2 or w < 2:
                    raise ShapeError(f"{name}: {h}x{w} output too small to pool")
                h, w = h // 2, w // 2
        fan_in = c * h * w
        for name, width in zip(self.dense_names, self.dense + (self.num_classes,)):
            out[f"{name}.weight"] = (width, fan_in)
            out[f"{name}.bias"] = (width,)
            fan_in = width
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


LENET_C = Architecture()


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("one label per image required")


@dataclass
class Network:
    arch: Architecture
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, arch=LENET_C, seed=0, dtype=np.float64):
        """He-style uniform initialisation, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(arch, params)

    @property
    def conv_layers(self):
        return self.arch.conv_names

    def weight(self, layer):
        return self.params[f"{layer}.weight"]

    def copy(self):
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()})

    def check(self):
        for name, shape in self.arch.shapes().items():
            if self.params[name].shape != tuple(shape):
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")


# --- layers -----------------------------------------------------------------

def _conv_forward(x, w, b):
    _, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    oh, ow = h - kh + 1, wd - kw + 1
    cols = im2col(x, kh, kw)
    out = gemm(to_gemm_matrix(w), cols) + b[:, None]
    out = out.reshape(w.shape[0], n, oh, ow).transpose(1, 0, 2, 3)
    return out, cols


def _conv_backward(dout, x_shape, w, cols, need_dx):
    a = w.shape[0]
    dmat = dout.transpose(1, 0, 2, 3).reshape(a, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dx = None
    if need_dx:
        dcols = to_gemm_matrix(w).T @ dmat
        dx = col2im(dcols, x_shape, w.shape[2], w.shape[3])
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xr = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    d4 = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(d4, idx[..., None], dout[..., None], axis=-1)
    d4 = d4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    if (2 * h2, 2 * w2) == (h, w):
        return d4
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :2 * h2, :2 * w2] = d4
    return dx


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    s = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = expz / s
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def _check_input(net, images):
    if tuple(images.shape[1:]) != net.arch.input_shape:
        raise ShapeError(f"input {images.shape[1:]} does not match network {net.arch.input_shape}")


def _forward(net, images, keep_cache):
    _check_input(net, images)
    p = net.params
    cache = []
    x = images
    for name in net.arch.conv_names:
        w, b = p[f"{name}.weight"], p[f"{name}.bias"]
        x_shape = x.shape
        z, cols = _conv_forward(x, w, b)
        mask = z > 0
        x = z * mask
        pool = None
        if net.arch.pool:
            pooled_shape = x.shape
            x, idx = _pool_forward(x)
            pool = (idx, pooled_shape)
        if keep_cache:
            cache.append((name, x_shape, cols, mask, pool))
    flat_shape = x.shape
    x = x.reshape(x.shape[0], -1)
    names = net.arch.dense_names
    for i, name in enumerate(names):
        w, b = p[f"{name}.weight"], p[f"{name}.bias"]
        inp = x
        x = inp @ w.T + b
        mask = None
        if i < len(names) - 1:
            mask = x > 0
            x = x * mask
        if keep_cache:
            cache.append((name, inp, mask))
    return x, (cache, flat_shape)


def logits(net, images):
    return _forward(net, images, keep_cache=False)[0]


def forward(net, batch):
    """Logits and mean softmax cross-entropy of ``batch``."""
    out, _ = _forward(net, batch.images, keep_cache=False)
    loss, _ = softmax_cross_entropy(out, batch.labels)
    return out, loss


def backward(net, batch):
    """Loss and exact gradients of the loss with respect to every parameter."""
    out, (cache, flat_shape) = _forward(net, batch.images, keep_cache=True)
    loss, d = softmax_cross_entropy(out, batch.labels)
    grads = {}
    p = net.params
    n_conv = len(net.arch.conv)
    for name, inp, mask in reversed(cache[n_conv:]):
        if mask is not None:
            d = d * mask
        w = p[f"{name}.weight"]
        grads[f"{name}.weight"] = d.T @ inp
        grads[f"{name}.bias"] = d.sum(axis=0)
        d = d @ w
    d = d.reshape(flat_shape)
    for i in range(n_conv - 1, -1, -1):
        name, x_shape, cols, mask, pool = cache[i]
        if pool is not None:
            idx, pooled_shape = pool
            d = _pool_backward(d, idx, pooled_shape)
        d = d * mask
        dx, dw, db = _conv_backward(d, x_shape, p[f"{name}.weight"], cols, need_dx=i > 0)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
        d = dx
    return loss, {k: grads[k] for k in p}


class SGD:
    """SGD with heavy-ball momentum: ``v <- m*v + g; p <- p - lr*v``."""

    def __init__(self, lr, momentum=0.9):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, net, grads, extra: Optional[Dict[str, np.ndarray]] = None):
        for name, g in grads.items():
            param = net.params[name]
            if g.shape != param.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
            if extra is not None and name in extra:
                if extra[name].shape != param.shape:
                    raise ShapeError(f"extra gradient for {name} has wrong shape")
                g = g + extra[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            param -= self.lr * v
        return net


def sgd_step(net, grads, opt, extra=None):
    return opt.step(net, grads, extra)


def iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(net, opt, images, labels, batch_size, rng, extra_fn=None,
                grad_masks=None, after_step=None):
    """One pass over the data in a random order drawn from ``rng``.

    ``extra_fn(net)`` may return additional per-parameter gradients (e.g. a
    penalty term) that are added before the momentum update.  ``grad_masks``
    maps parameter names to boolean keep-masks multiplied into both the loss
    gradient and the extra term.  ``after_step(net)`` runs after every update.
    Returns the mean mini-batch loss.
    """
    losses = []
    for idx in iterate_batches(images.shape[0], batch_size, rng):
        loss, grads = backward(net, Batch(images[idx], labels[idx]))
        extra = extra_fn(net) if extra_fn is not None else None
        if grad_masks:
            for name, m in grad_masks.items():
                grads[name] = grads[name] * m
                if extra is not None and name in extra:
                    extra[name] = extra[name] * m
        opt.step(net, grads, extra)
        if after_step is not None:
            after_step(net)
        losses.append(loss)
    return float(np.mean(losses))


def predict(net, images, chunk=1000):
    out = []
    for s in range(0, images.shape[0], chunk):
        out.append(np.argmax(logits(net, images[s:s + chunk]), axis=1))
    return np.concatenate(out)


def evaluate(net, images, labels, chunk=1000):
    """Fraction of examples whose arg-max logit (lowest index on ties) is correct."""
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, images, chunk) == labels))


def save_checkpoint(path, net, epoch=0, seed=None, extra_arrays=None, extra_meta=None):
    arrays = dict(net.params)
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "architecture": net.arch.to_dict(),
        "layers": net.conv_layers + net.arch.dense_names,
        "shapes": {k: list(v.shape) for k, v in net.params.items()},
        "epoch": epoch,
        "seed": seed,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def load_checkpoint(path):
    """Return ``(network, extra_arrays, meta)``."""
    arrays, meta = load_arrays(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a network checkpoint: {meta.get('format')!r}")
    arch = Architecture.from_dict(meta["architecture"])
    names = set(arch.shapes())
    net = Network(arch, {k: arrays[k].copy() for k in arch.shapes()})
    net.check()
    extra = {k: v for k, v in arrays.items() if k not in names}
    return net, extra, meta
