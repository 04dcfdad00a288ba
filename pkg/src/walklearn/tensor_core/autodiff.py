"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operator records a node on the tape of its inputs. Nodes are appended in
creation order, which is a valid topological order, so :func:`backward` simply
walks the tape in reverse.

Shapes are checked eagerly and no broadcasting is performed except for the bias
add inside :func:`dense` and :func:`conv2d`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "dense", "conv2d", "relu", "maxpool2", "flatten", "concat", "take_rows",
    "l2_distance", "softmax_cross_entropy", "sigmoid_cross_entropy",
    "add", "scale", "shift", "mul_const", "mean", "total", "backward",
]

DTYPE = np.float64
KINK_EPS = 1e-6


class ShapeError(ValueError):
    """Operator received inputs of incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operator produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "tape", "name", "requires_grad")

    def __init__(self, data, tape=None, name=None, requires_grad=False):
        self.data = data
        self.grad = None
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"


class Tape:
    """Ordered record of operations plus the named parameter leaves.

    With ``track_kinks`` set, ``pattern`` collects the discrete decisions taken
    during the forward pass (relu masks, pooling argmaxes, zero distances). Two
    forward passes with equal patterns evaluate the same smooth branch of the
    network, which is what the gradient checker uses to detect kink crossings.
    """

    def __init__(self, track_kinks=False):
        self.nodes = []
        self.params = {}
        self.track_kinks = track_kinks
        self.pattern = []
        self.near_kink = False

    def param(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = Tensor(np.asarray(value, dtype=DTYPE), self, name, requires_grad=True)
        self.params[name] = t
        return t

    def constant(self, value):
        return Tensor(np.asarray(value, dtype=DTYPE), self)

    def _record(self, op, out_data, parents, backward_fn):
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{op}: produced non-finite values")
        needs = any(p.requires_grad for p in parents)
        out = Tensor(out_data, self, requires_grad=needs)
        if needs:
            self.nodes.append((out, parents, backward_fn))
        return out


def _tape_of(op, *xs):
    tapes = {id(x.tape): x.tape for x in xs if x.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"{op}: inputs live on different tapes")
    if not tapes:
        raise ValueError(f"{op}: inputs are not attached to a tape")
    return next(iter(tapes.values()))


def _check(cond, op, *shapes):
    if not cond:
        desc = ", ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"{op}: incompatible shapes {desc}")


def dense(x, W, b):
    """``x @ W + b`` for ``x`` (N, Din), ``W`` (Din, Dout), ``b`` (Dout,)."""
    _check(x.data.ndim == 2 and W.data.ndim == 2 and b.data.ndim == 1
           and x.shape[1] == W.shape[0] and W.shape[1] == b.shape[0],
           "dense", x.shape, W.shape, b.shape)
    tape = _tape_of("dense", x, W, b)
    xd, Wd = x.data, W.data
    need_x = x.requires_grad

    def back(g):
        return (g @ Wd.T if need_x else None), xd.T @ g, g.sum(axis=0)

    return tape._record("dense", xd @ Wd + b.data, (x, W, b), back)


def _same_pad(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))), ph, pw


def conv2d(x, K, b, stride=1):
    """2-D cross-correlation with same padding, NHWC layout.

    ``K`` has shape (kh, kw, C_in, C_out) with odd kernel sides.
    """
    _check(x.data.ndim == 4 and K.data.ndim == 4 and b.data.ndim == 1
           and x.shape[3] == K.shape[2] and K.shape[3] == b.shape[0]
           and K.shape[0] % 2 == 1 and K.shape[1] % 2 == 1 and stride >= 1,
           "conv2d", x.shape, K.shape, b.shape)
    tape = _tape_of("conv2d", x, K, b)
    n, h, w, c = x.shape
    kh, kw, _, f = K.shape
    xp, ph, pw = _same_pad(x.data, kh, kw)
    ho, wo = -(-h // stride), -(-w // stride)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, h, w, c, kh, kw
    win = win[:, ::stride, ::stride][:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3)
    cols = win.reshape(n * ho * wo, kh * kw * c)
    kmat = K.data.reshape(kh * kw * c, f)
    out = (cols @ kmat + b.data).reshape(n, ho, wo, f)

    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(n * ho * wo, f)
        dk = (cols.T @ g2).reshape(K.shape)
        if not need_x:
            return None, dk, g2.sum(axis=0)
        if stride == 1:
            # input gradient is a same-padded correlation of g with the flipped kernel
            gp, _, _ = _same_pad(g, kh, kw)
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
            kflip = K.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * f, c)
            return (gwin.reshape(n * h * w, kh * kw * f) @ kflip).reshape(n, h, w, c), dk, g2.sum(axis=0)
        dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        return dxp[:, ph:ph + h, pw:pw + w, :], dk, g2.sum(axis=0)

    return tape._record("conv2d", out, (x, K, b), back)


def relu(x):
    tape = _tape_of("relu", x)
    mask = x.data > 0
    if tape.track_kinks:
        tape.pattern.append(np.packbits(mask).tobytes())
        if np.any(np.abs(x.data) < KINK_EPS):
            tape.near_kink = True
    return tape._record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def maxpool2(x):
    """Non-overlapping 2x2 max pooling on NHWC input with even spatial sides.

    The gradient goes to the first maximum in row-major window order.
    """
    _check(x.data.ndim == 4 and x.shape[1] % 2 == 0 and x.shape[2] % 2 == 0,
           "maxpool2", x.shape)
    tape = _tape_of("maxpool2", x)
    xd = x.data
    quads = (xd[:, 0::2, 0::2], xd[:, 0::2, 1::2], xd[:, 1::2, 0::2], xd[:, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for q in quads[:3]:
        m = (q == out) & ~taken
        masks.append(m)
        taken |= m
    masks.append(~taken)
    if tape.track_kinks:
        code = sum(i * m.astype(np.uint8) for i, m in enumerate(masks))
        tape.pattern.append(code.tobytes())
        second = np.max(np.stack([np.where(m, -np.inf, q) for m, q in zip(masks, quads)]), axis=0)
        # all-zero windows come from relu and are covered by its own kink check
        if np.any((out - second < KINK_EPS) & ~((out == 0) & (second == 0))):
            tape.near_kink = True

    def back(g):
        d = np.empty(xd.shape)
        d[:, 0::2, 0::2] = g * masks[0]
        d[:, 0::2, 1::2] = g * masks[1]
        d[:, 1::2, 0::2] = g * masks[2]
        d[:, 1::2, 1::2] = g * masks[3]
        return (d,)

    return tape._record("maxpool2", out, (x,), back)


def flatten(x):
    tape = _tape_of("flatten", x)
    shape = x.shape
    return tape._record("flatten", x.data.reshape(shape[0], -1), (x,),
                        lambda g: (g.reshape(shape),))


def concat(xs):
    """Concatenate along the last axis; leading dimensions must agree."""
    xs = list(xs)
    _check(len(xs) > 0 and all(t.data.ndim == xs[0].data.ndim and t.shape[:-1] == xs[0].shape[:-1]
                               for t in xs), "concat", *[t.shape for t in xs])
    tape = _tape_of("concat", *xs)
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return tape._record("concat", np.concatenate([t.data for t in xs], axis=-1), tuple(xs), back)


def take_rows(x, start, stop):
    _check(0 <= start <= stop <= x.shape[0], "take_rows", x.shape)
    tape = _tape_of("take_rows", x)
    shape = x.shape

    def back(g):
        d = np.zeros(shape)
        d[start:stop] = g
        return (d,)

    return tape._record("take_rows", x.data[start:stop], (x,), back)


def l2_distance(u, v):
    """Row-wise Euclidean distance; subgradient 0 where the distance is 0."""
    _check(u.data.ndim == 2 and u.shape == v.shape, "l2_distance", u.shape, v.shape)
    tape = _tape_of("l2_distance", u, v)
    diff = u.data - v.data
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    zero = d < KINK_EPS
    if tape.track_kinks:
        tape.pattern.append(np.packbits(zero).tobytes())
        if np.any(zero):
            tape.near_kink = True
    safe = np.where(zero, 1.0, d)

    def back(g):
        unit = np.where(zero[:, None], 0.0, diff / safe[:, None])
        gu = g[:, None] * unit
        return gu, -gu

    return tape._record("l2_distance", d, (u, v), back)


def softmax_cross_entropy(logits, classes):
    """Per-row ``-log softmax(logits)[class]`` for logits (N, C)."""
    classes = np.asarray(classes)
    _check(logits.data.ndim == 2 and classes.shape == (logits.shape[0],),
           "softmax_cross_entropy", logits.shape, classes.shape)
    if classes.size and (classes.min() < 0 or classes.max() >= logits.shape[1]):
        raise ShapeError(f"softmax_cross_entropy: class index out of range for {logits.shape[1]} classes")
    tape = _tape_of("softmax_cross_entropy", logits)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(classes))
    loss = logsum - z[rows, classes]
    prob = np.exp(z - logsum[:, None])

    def back(g):
        d = prob.copy()
        d[rows, classes] -= 1.0
        return (d * g[:, None],)

    return tape._record("softmax_cross_entropy", loss, (logits,), back)


def sigmoid_cross_entropy(logits, targets):
    """Elementwise binary cross-entropy on logits, targets in {0, 1}."""
    targets = np.asarray(targets, dtype=DTYPE)
    _check(logits.shape == targets.shape, "sigmoid_cross_entropy", logits.shape, targets.shape)
    tape = _tape_of("sigmoid_cross_entropy", logits)
    z = logits.data
    loss = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))

    return tape._record("sigmoid_cross_entropy", loss, (logits,),
                        lambda g: ((prob - targets) * g,))


def add(x, y):
    _check(x.shape == y.shape, "add", x.shape, y.shape)
    tape = _tape_of("add", x, y)
    return tape._record("add", x.data + y.data, (x, y), lambda g: (g, g))


def scale(x, c):
    tape = _tape_of("scale", x)
    c = float(c)
    return tape._record("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x, c):
    tape = _tape_of("shift", x)
    return tape._record("shift", x.data + float(c), (x,), lambda g: (g,))


def mul_const(x, k):
    """Elementwise product with a constant array of identical shape."""
    k = np.asarray(k, dtype=DTYPE)
    _check(x.shape == k.shape, "mul_const", x.shape, k.shape)
    tape = _tape_of("mul_const", x)
    return tape._record("mul_const", x.data * k, (x,), lambda g: (g * k,))


def total(x):
    tape = _tape_of("total", x)
    shape = x.shape
    return tape._record("total", np.asarray(x.data.sum()), (x,),
                        lambda g: (np.full(shape, float(g)),))


def mean(x):
    tape = _tape_of("mean", x)
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return tape._record("mean", np.asarray(x.data.sum() / n), (x,),
                        lambda g: (np.full(shape, float(g) / n),))


def backward(tape, loss):
    """Reverse sweep from a scalar ``loss``; returns ``{param_name: gradient}``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, fn(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    result = {}
    for name, t in tape.params.items():
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape)
        result[name] = t.grad
    return result
