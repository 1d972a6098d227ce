"""Dense tensors with reverse-mode differentiation.

Storage is a row-major numpy array. Spatial maps use the H x W x C layout and
every attention-style op works on tokens x channels matrices.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_KINK_LOG: list | None = None


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU input evaluated inside the block."""
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote a 0-d array to shape (1,)
        self.data = arr.copy() if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; each node appears exactly once
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _result(x.data * x.dtype.type(alpha), (x,), lambda g: (g * alpha,))


def _relu_mask(x: np.ndarray) -> np.ndarray:
    return x > 0


def relu(x: Tensor) -> Tensor:
    mask = _relu_mask(x.data)
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return _result(x.data * mask, (x,), lambda g: (g * _relu_mask(x.data),))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product of an m x k and a k x n matrix."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten_tokens(x: Tensor) -> Tensor:
    """H x W x C -> HW x C in row-major spatial order."""
    if x.data.ndim != 3:
        raise ShapeError(f"flatten_tokens expects H x W x C, got {x.shape}")
    h, w, c = x.shape
    return reshape(x, (h * w, c))


def unflatten_tokens(x: Tensor, h: int, w: int) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != h * w:
        raise ShapeError(f"unflatten_tokens: {x.shape} does not hold {h}x{w} tokens")
    return reshape(x, (h, w, x.shape[1]))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of zero tensors")
    ndim = xs[0].data.ndim
    axis = axis % ndim
    for t in xs[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(xs[0].shape) if i != axis]
        if t.data.ndim != ndim or other != first:
            raise ShapeError(f"concat along axis {axis}: {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return out

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


def concat_tokens(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=0)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start, stop) of the last axis."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects an m x n matrix with n >= 1, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax_rows received non-finite input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), backward)


def _normalize(x2d: np.ndarray, axis: int, eps: float):
    mu = x2d.mean(axis=axis, keepdims=True)
    xc = x2d - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis: int) -> np.ndarray:
    m1 = gxhat.mean(axis=axis, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axis, keepdims=True)
    return (gxhat - m1 - xhat * m2) * inv


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over its channels, then apply gamma/beta."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xhat, inv = _normalize(x.data, 1, eps)
    out = xhat * gamma.data + beta.data

    def backward(g):
        dx = _normalize_backward(g * gamma.data, xhat, inv, 1)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gamma, beta), backward)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation of an H x W x C map over its spatial sites."""
    if x.data.ndim != 3 or gamma.shape != (x.shape[2],) or beta.shape != (x.shape[2],):
        raise ShapeError(f"channel_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    h, w, c = x.shape
    xhat, inv = _normalize(x.data.reshape(h * w, c), 0, eps)
    out = (xhat * gamma.data + beta.data).reshape(h, w, c)

    def backward(g):
        g2 = g.reshape(h * w, c)
        dx = _normalize_backward(g2 * gamma.data, xhat, inv, 0)
        return dx.reshape(h, w, c), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- spatial ops

def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; stride 2 halves (ceil) the size."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_3x3 expects H x W x C input, got {x.shape}")
    h, w, cin = x.shape
    if weight.shape[:3] != (3, 3, cin) or weight.data.ndim != 4:
        raise ShapeError(f"conv2d_3x3: input has {cin} channels but weight is {weight.shape}")
    cout = weight.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d_3x3: bias {bias.shape} for {cout} output channels")
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.zeros((h + 2, w + 2, cin), dtype=x.dtype)
    xp[1:-1, 1:-1] = x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    cols = np.empty((ho, wo, 9, cin), dtype=x.dtype)
    for k in range(9):
        di, dj = divmod(k, 3)
        cols[:, :, k, :] = xp[di:di + hspan:stride, dj:dj + wspan:stride, :]
    cols = cols.reshape(ho * wo, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = (cols @ wmat + bias.data).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        dw = (cols.T @ g2).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(ho, wo, 9, cin)
            dxp = np.zeros_like(xp)
            for k in range(9):
                di, dj = divmod(k, 3)
                dxp[di:di + hspan:stride, dj:dj + wspan:stride, :] += dcols[:, :, k, :]
            dx = dxp[1:-1, 1:-1]
        return dx, dw, db

    return _result(out, (x, weight, bias), backward)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the align-corners-false linear weights of output site i."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    if h2 < 1 or w2 < 1:
        raise ValueError(f"target size must be positive, got {h2}x{w2}")
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_resize expects H x W x C input, got {x.shape}")
    h, w, c = x.shape
    ry = resize_matrix(h, h2, x.dtype)
    rx = resize_matrix(w, w2, x.dtype)
    tmp = (ry @ x.data.reshape(h, w * c)).reshape(h2, w, c)
    out = np.einsum("bw,awc->abc", rx, tmp, optimize=True)

    def backward(g):
        gt = np.einsum("bw,abc->awc", rx, g, optimize=True)
        return ((ry.T @ gt.reshape(h2, w * c)).reshape(h, w, c),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- loss

def weighted_cross_entropy(logits: Tensor, target, w_bg: float = 1.0, w_fg: float = 4.0) -> Tensor:
    """Pixel-mean of class-weighted cross-entropy for a binary segmentation."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.data.ndim != 3 or logits.shape[2] != 2 or t.shape != logits.shape[:2]:
        raise ShapeError(f"weighted_cross_entropy: logits {logits.shape}, target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("weighted_cross_entropy: target must be binary")
    if w_bg <= 0 or w_fg <= 0:
        raise ValueError("class weights must be positive")
    t = t.astype(np.int64)
    z = logits.data - logits.data.max(axis=2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
    wt = np.where(t == 1, w_fg, w_bg).astype(logits.dtype)
    picked = np.take_along_axis(logp, t[..., None], axis=2)[..., 0]
    n = t.size
    loss = -(wt * picked).sum() / n

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, t[..., None], 1.0, axis=2)
        return (g * wt[..., None] * (p - onehot) / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- gradient oracle

def _same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_detail(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      kink_guard: bool = False, min_eps: float = 1e-8, order: int = 2):
    """Compare recorded-graph gradients with central differences.

    Returns (max_relative_error, (param_index, flat_index, g_ad, g_fd)) for the
    worst coordinate. With ``max_coords`` only a random subset of each
    parameter's coordinates is probed.

    With ``kink_guard`` a coordinate whose +-eps probes flip any ReLU input
    sign is re-probed with a step ten times smaller (down to ``min_eps``):
    a difference quotient across a kink does not estimate the derivative.

    ``order=4`` uses the five-point central stencil, whose O(eps^4) error
    allows a larger step and so less round-off in the loss.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit parameters")
        p.grad = None
    with record_kinks() as base_kinks:
        loss = f()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check objective must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)

    stencil = {2: ((1, 0.5),), 4: ((1, 2 / 3), (2, -1 / 12))}[order]

    def probe(flat, i, h):
        orig = flat[i]
        g, smooth = 0.0, True
        try:
            for k, c in stencil:
                vals = []
                for sgn in (1, -1):
                    flat[i] = orig + sgn * k * h
                    with record_kinks() as kinks:
                        vals.append(float(f().data))
                    smooth = smooth and _same_kinks(kinks, base_kinks)
                g += c * (vals[0] - vals[1])
        finally:
            flat[i] = orig
        return g / h, smooth

    worst = (0.0, None)
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                h = eps
                g_fd, smooth = probe(flat, i, h)
                while kink_guard and not smooth and h / 10 >= min_eps:
                    h /= 10
                    g_fd, smooth = probe(flat, i, h)
                g_ad = float(analytic[pi].reshape(-1)[i])
                err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
                if err > worst[0] or worst[1] is None:
                    worst = (err, (pi, int(i), g_ad, g_fd))
    return worst


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, **kw) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_detail(f, params, eps, **kw)[0]
