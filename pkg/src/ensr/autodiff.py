"""A small reverse-mode autodiff engine over float64 numpy arrays.

Backward rules are written with the same differentiable ops as the forward
pass, so gradients can themselves be differentiated (``create_graph=True``).
The WGAN-GP penalty relies on this.
"""

from __future__ import annotations

import contextlib
import json
import weakref
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ensr.errors import ConfigurationError, DimensionError, UsageError
from ensr.io import read_raw, write_raw

_grad_enabled = True
_live = weakref.WeakSet()


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled):
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def live_node_count() -> int:
    """Number of interior graph nodes still referenced somewhere."""
    return len(_live)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name",
                 "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -------------------------------------------------------------- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, float(p))

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return sum_(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _live.add(out)
    return out


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ------------------------------------------------------------------ elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _result(a.data + b.data, (a, b), bw)


def neg(a):
    return _result(-a.data, (a,), lambda g, needs: (neg(g),))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), bw)


def power(a, p: float):
    a = as_tensor(a)

    def bw(g, needs):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _result(np.power(a.data, p), (a,), bw)


def sqrt(a):
    return power(a, 0.5)


def relu(x):
    return mul(x, Tensor((x.data > 0).astype(np.float64)))


def leaky_relu(x, slope=0.2):
    return mul(x, Tensor(np.where(x.data > 0, 1.0, slope)))


def abs_(x):
    return mul(x, Tensor(np.sign(x.data)))


# ------------------------------------------------------------------ shape ops

def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g, needs: (sum_to(g, src),))


def sum_to(a, shape):
    """Sum ``a`` down to a broadcast-compatible ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    data = a.data.sum(axis=axes, keepdims=True).reshape(shape)
    return _result(data, (a,), lambda g, needs: (broadcast_to(g, a.shape),))


def take(a, idx):
    """Basic slicing; the adjoint embeds the gradient into zeros."""
    src = a.shape
    return _result(a.data[idx].copy(), (a,), lambda g, needs: (embed(g, idx, src),))


def embed(a, idx, shape):
    out = np.zeros(shape)
    out[idx] = a.data
    return _result(out, (a,), lambda g, needs: (take(g, idx),))


def transpose(a):
    a = as_tensor(a)
    return _result(a.data.T.copy(), (a,), lambda g, needs: (transpose(g),))


def matmul(a, b):
    """2D matrix product."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _result(a.data @ b.data, (a, b), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(take(g, tuple(idx)))
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ------------------------------------------------------------------ convolution
#
# Internally the convolutions work on channels-last copies so that the im2col
# blocks are contiguous and every product is a single 2D matmul.

def _conv_out(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


_CHUNK_ELEMS = 1 << 24


def _row_chunks(n, ho, per_row):
    """Split ``ho`` output rows so each im2col block stays below _CHUNK_ELEMS."""
    step = max(1, _CHUNK_ELEMS // max(1, n * per_row))
    return [(r, min(r + step, ho)) for r in range(0, ho, step)]


def _nhwc_padded(x, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    return np.ascontiguousarray(xp.transpose(0, 2, 3, 1))


def _im2col(xp, k, stride, r0, r1, Wo):
    """(N, rows*Wo, k*k*C) patch matrix for output rows r0:r1 of a padded NHWC array."""
    N, C = xp.shape[0], xp.shape[3]
    n = r1 - r0
    cols = np.empty((N, n, Wo, k, k, C))
    for i in range(k):
        top = i + stride * r0
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, top:top + stride * n:stride,
                                        j:j + stride * Wo:stride, :]
    return cols.reshape(N * n * Wo, k * k * C)


def _wmat(w):
    """(O, C, k, k) -> (k*k*C, O) matching the im2col column order."""
    O = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, O)


def conv2d(x, w, stride=1, padding=None, name="conv"):
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) weights, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{name}: conv2d needs rank-4 input and weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{name}: input has {x.shape[1]} channels, weight expects "
                             f"{w.shape[1]}")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    N = x.shape[0]
    Ho, Wo = _conv_out(x.shape[2], k, stride, pad), _conv_out(x.shape[3], k, stride, pad)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"{name}: input {x.shape[2:]} too small for kernel {k}")
    xp = _nhwc_padded(x.data, pad)
    wm = _wmat(w.data)
    out = np.empty((N, Ho, Wo, w.shape[0]))
    for r0, r1 in _row_chunks(N, Ho, Wo * x.shape[1] * k * k):
        out[:, r0:r1] = (_im2col(xp, k, stride, r0, r1, Wo) @ wm).reshape(N, r1 - r0, Wo, -1)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    xs, ws = x.shape, w.shape

    def bw(g, needs):
        return (conv2d_input_grad(g, w, xs, stride, pad) if needs[0] else None,
                conv2d_weight_grad(x, g, ws, stride, pad) if needs[1] else None)

    return _result(out, (x, w), bw)


def conv2d_input_grad(g, w, x_shape, stride, pad):
    """Adjoint of conv2d with respect to its input (a transposed convolution)."""
    g, w = as_tensor(g), as_tensor(w)
    N, C, H, W = x_shape
    k = w.shape[2]
    Ho, Wo = g.shape[2], g.shape[3]
    gl = np.ascontiguousarray(g.data.transpose(0, 2, 3, 1))
    wmt = _wmat(w.data).T
    buf = np.zeros((N, H + 2 * pad + stride + k, W + 2 * pad + stride + k, C))
    for r0, r1 in _row_chunks(N, Ho, Wo * C * k * k):
        n = r1 - r0
        cols = (gl[:, r0:r1].reshape(-1, gl.shape[3]) @ wmt).reshape(N, n, Wo, k, k, C)
        for i in range(k):
            top = i + stride * r0
            for j in range(k):
                buf[:, top:top + stride * n:stride, j:j + stride * Wo:stride, :] += \
                    cols[:, :, :, i, j, :]
    out = np.ascontiguousarray(buf[:, pad:pad + H, pad:pad + W, :].transpose(0, 3, 1, 2))

    def bw(gg, needs):
        return (conv2d(gg, w, stride, pad) if needs[0] else None,
                conv2d_weight_grad(gg, g, w.shape, stride, pad) if needs[1] else None)

    return _result(out, (g, w), bw)


def conv2d_weight_grad(x, g, w_shape, stride, pad):
    """Adjoint of conv2d with respect to its weight."""
    x, g = as_tensor(x), as_tensor(g)
    O, C, k, _ = w_shape
    N = x.shape[0]
    Ho, Wo = g.shape[2], g.shape[3]
    xp = _nhwc_padded(x.data, pad)
    gl = np.ascontiguousarray(g.data.transpose(0, 2, 3, 1))
    acc = np.zeros((k * k * C, O))
    for r0, r1 in _row_chunks(N, Ho, Wo * C * k * k):
        acc += _im2col(xp, k, stride, r0, r1, Wo).T @ gl[:, r0:r1].reshape(-1, O)
    out = np.ascontiguousarray(acc.reshape(k, k, C, O).transpose(3, 2, 0, 1))

    def bw(gg, needs):
        return (conv2d_input_grad(g, gg, x.shape, stride, pad) if needs[0] else None,
                conv2d(x, gg, stride, pad) if needs[1] else None)

    return _result(out, (x, g), bw)


# ------------------------------------------------------------------ composites

LN_EPS = 1e-5


def layer_norm(x, gamma=None, beta=None, eps=LN_EPS):
    """Per-sample normalization over (C, H, W) with per-channel affine parameters."""
    if np.ndim(x) < 2 or int(np.prod(np.shape(x)[1:])) < 2:
        raise DimensionError("layer_norm needs at least 2 elements per sample")
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    y = xc * power(var + eps, -0.5)
    x = as_tensor(x)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if gamma is not None:
        y = y * reshape(gamma, bshape)
    if beta is not None:
        y = y + reshape(beta, bshape)
    return y


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise DimensionError("global average pooling needs rank-4 input")
    return x.mean(axis=(2, 3))


def mse(a, b):
    d = a - b
    return (d * d).mean()


def mae(a, b):
    return abs_(a - b).mean()


# ------------------------------------------------------------------ backprop

def _toposort(roots):
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p not in seen:
                stack.append((p, False))
    return order


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite gradient at {where}")


def _propagate(root, seed_grad, targets, create_graph):
    order = _toposort([root])
    if targets is None:
        relevant = None
    else:
        # keep only nodes that lead to a requested target
        relevant = set()
        for node in order:
            if node in targets or any(p in relevant for p in node._parents):
                relevant.add(node)
    grads = {root: seed_grad}
    found = {}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(node, None)
            if g is None:
                continue
            if targets is not None and node in targets:
                found[node] = g
            if node.is_leaf:
                if targets is None:
                    found[node] = g
                continue
            if relevant is not None and node not in relevant:
                continue
            needs = tuple(p.requires_grad and (relevant is None or p in relevant)
                          for p in node._parents)
            pgrads = node._backward(g, needs)
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                _check_finite(pg.data, node)
                grads[p] = pg if p not in grads else add(grads[p], pg)
    return found


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    found = _propagate(loss, Tensor(np.ones_like(loss.data)), None, False)
    for leaf, g in found.items():
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(output: Tensor, inputs, create_graph: bool = False):
    """Gradients of a scalar ``output`` with respect to ``inputs`` (zeros if unreachable)."""
    if output.data.size != 1:
        raise UsageError("grad needs a scalar output")
    inputs = list(inputs)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    found = _propagate(output, Tensor(np.ones_like(output.data)), set(inputs), create_graph)
    return [found.get(t, Tensor(np.zeros_like(t.data))) for t in inputs]


# ------------------------------------------------------------------ parameters

@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network description; ``kind`` in conv2d/layernorm/relu/lrelu/concat_skip/gap."""

    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    slope: float = 0.2
    name: str = ""

    def __post_init__(self):
        if self.kind not in {"conv2d", "layernorm", "relu", "lrelu", "concat_skip", "gap"}:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.stride not in (1, 2):
                raise ConfigurationError("conv stride must be 1 or 2")
            if self.kernel % 2 == 0:
                raise ConfigurationError("conv kernel must be odd")
        if self.kind == "lrelu" and not 0 < self.slope < 1:
            raise ConfigurationError("leaky-ReLU slope must lie in (0, 1)")


class ParamStore:
    """Named trainable tensors with Adam moment buffers."""

    def __init__(self, meta=None):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.meta = dict(meta or {})

    def add(self, name, data):
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def frozen(self, flag=True):
        for t in self.params.values():
            t.requires_grad = not flag
        return self

    def copy(self) -> "ParamStore":
        out = ParamStore(self.meta)
        for name, t in self.params.items():
            out.add(name, t.data.copy())
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        return out

    def state_equal(self, other: "ParamStore") -> bool:
        return (self.step == other.step and self.params.keys() == other.params.keys()
                and all(np.array_equal(t.data, other.params[n].data)
                        and np.array_equal(self.m[n], other.m[n])
                        and np.array_equal(self.v[n], other.v[n])
                        for n, t in self.params.items()))

    # -------------------------------------------------------------- checkpoints
    def save(self, path, extra: dict | None = None) -> None:
        """Write raw-float tensors and moments plus a JSON manifest."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name, t in self.params.items():
            shapes[name] = list(t.shape)
            for kind, arr in (("param", t.data), ("m", self.m[name]), ("v", self.v[name])):
                write_raw(path / kind / f"{name}.raw", arr.reshape(arr.shape[0], -1))
        manifest = {"tensors": shapes, "step": self.step, "meta": self.meta}
        if extra:
            manifest.update(extra)
        tmp = path / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
        tmp.replace(path / "manifest.json")

    @classmethod
    def load(cls, path) -> "ParamStore":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"no checkpoint manifest in {path}") from None
        store = cls(manifest.get("meta"))
        for name, shape in manifest["tensors"].items():
            store.add(name, read_raw(path / "param" / f"{name}.raw").reshape(shape))
            store.m[name] = read_raw(path / "m" / f"{name}.raw").reshape(shape)
            store.v[name] = read_raw(path / "v" / f"{name}.raw").reshape(shape)
        store.step = int(manifest["step"])
        return store


def _jsonable(obj):
    if isinstance(obj, LayerSpec):
        return asdict(obj)
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def adam_step(params: ParamStore, grads=None, lr=2e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; ``grads`` defaults to each tensor's ``.grad``."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params
