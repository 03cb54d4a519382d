"""Tape-free reverse-mode autodiff over numpy arrays.

Each op returns a ``Tensor`` that remembers its parents and a closure that
pushes the output gradient back into them.  ``Tensor.backward`` walks the
graph in reverse topological order.  Only the ops the networks in this
package need are provided; there is no general broadcasting.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, NumericError, ParameterError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} != output shape {self.shape}")
        order = topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # elementwise arithmetic on equal shapes (scalars allowed on the left/right)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    out = Tensor(data, _parents=tuple(parents), op=op)
    out._backward = backward
    return out


# ----------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _stable_sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), backward, "getitem")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tensors, backward, "concat")


# -------------------------------------------------------------------- layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for x (n, in), W (in, out), b (out,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match W {W.shape}")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _node(y, parents, backward, "linear")


def batched_affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-row affine map with row-specific parameters.

    x (n, in); W (m, in, out); b (m, out) with m == n or m == 1 (shared).
    """
    n = x.shape[0]
    m = W.shape[0]
    if W.data.ndim != 3 or x.data.ndim != 2 or W.shape[1] != x.shape[1]:
        raise ShapeError(f"batched_affine: x {x.shape} incompatible with W {W.shape}")
    if m not in (1, n) or b.shape != (m, W.shape[2]):
        raise ShapeError(f"batched_affine: W {W.shape}, b {b.shape} for batch {n}")
    if m == 1:
        y = x.data @ W.data[0] + b.data[0]
    else:
        y = np.einsum("ni,nio->no", x.data, W.data) + b.data

    def backward(g):
        if m == 1:
            gx = g @ W.data[0].T
            gW = (x.data.T @ g)[None]
            gb = g.sum(axis=0, keepdims=True)
        else:
            gx = np.einsum("no,nio->ni", g, W.data)
            gW = x.data[:, :, None] * g[:, None, :]
            gb = g
        return gx, gW, gb

    return _node(y, (x, W, b), backward, "batched_affine")


def _pad_hw(a, pad):
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, K: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation via im2col.

    x (n, c, h, w); K (oc, c, kh, kw); b (oc,).
    """
    if x.data.ndim != 4 or K.data.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    n, c, h, w = x.shape
    oc, _, kh, kw = K.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad_hw(x.data, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, oh, ow, c, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    kmat = K.data.reshape(oc, -1)
    y = cols @ kmat.T
    if b is not None:
        y += b.data
    y = y.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, oc)
        gK = (gflat.T @ cols).reshape(K.shape) if K.requires_grad else None
        gb = gflat.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ kmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if b is None:
            return gx, gK
        return gx, gK, gb

    parents = (x, K) if b is None else (x, K, b)
    return _node(np.ascontiguousarray(y), parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 3, stride: int = 2) -> Tensor:
    """Window max; backward routes to the first (lowest-index) maximum."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} exceeds input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for di in range(k):
            for dj in range(k):
                hit = arg == di * k + dj
                gx[:, :, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += g * hit
        return (gx,)

    return _node(y, (x,), backward, "maxpool2d")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must be {n} integers in [0, {k}), got {labels!r}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    nll = logz - z[np.arange(n), labels]
    p = np.exp(z - logz[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _node(np.asarray(nll.mean(), dtype=logits.data.dtype), (logits,), backward, "xent")


# ----------------------------------------------------------- parameter store


class ParamStore:
    """Named parameters plus optimizer state (first/second moment, step)."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value, dtype=np.float32) -> Tensor:
        if name in self.params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, t.data) for k, t in self.params.items())

    def astype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


def adam_step(store: ParamStore, grads=None, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """Bias-corrected Adam update in place; ``names`` restricts the update set."""
    if grads is None:
        grads = store.grads()
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in names if names is not None else store.params:
        p = store.params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return store


def sgd_step(store: ParamStore, grads=None, lr=1e-5, names=None):
    if grads is None:
        grads = store.grads()
    store.step += 1
    for name in names if names is not None else store.params:
        p = store.params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        p.data -= lr * g
    return store


def gradient_check(loss_fn, params, h=1e-5, max_coords=20, rng=None, floor=1e-6):
    """Largest relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar Tensor; ``params`` is a list (or dict) of leaf Tensors.
    Up to ``max_coords`` coordinates per parameter are sampled.
    """
    if isinstance(params, dict):
        params = list(params.values())
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise NumericError("analytic gradient is not finite")
        flat = p.data.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("finite-difference loss is not finite")
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
