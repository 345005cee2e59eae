"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a contiguous float32/float64 ndarray. Operations record a tape
node on the output when gradients are enabled and any input requires them;
``backward`` replays the tape in reverse topological order. Gradients
accumulate on leaf tensors with ``requires_grad=True``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .errors import InvalidArgumentError, InvalidStateError, NumericFailure
from .prng import SplitMix64

DTYPES = {"f32": np.float32, "f64": np.float64}


class Node:
    __slots__ = ("parents", "backward_fn", "consumed")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def grad_or_zeros(self) -> np.ndarray:
        """Accumulated gradient; zeros when the tensor was unused in the graph."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (eval-mode forward passes, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _track(inputs: Sequence[Tensor]) -> bool:
    return _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs)


def _out(data, inputs, backward_fn: Callable):
    t = Tensor(data)
    if _track(inputs):
        t.node = Node(tuple(inputs), backward_fn)
        t.requires_grad = True
    return t


def _same_dtype(*tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise InvalidArgumentError(
                f"mixed dtypes {dt.name} and {t.data.dtype.name}; cast explicitly"
            )
    return dt


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    The tape is single-use: calling backward twice on the same recorded graph
    raises InvalidStateError.
    """
    if loss.node is None:
        raise InvalidArgumentError("loss was not produced by recorded operations")
    if loss.data.size != 1:
        raise InvalidArgumentError("backward expects a scalar loss")
    if loss.node.consumed:
        raise InvalidStateError("backward already ran for this graph; rerun the forward pass")

    # iterative post-order toposort over tensors that carry nodes
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.node is not None and id(p) not in visited:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        node = t.node
        g = grads.pop(id(t), None)
        if g is None or node is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if p.node is not None:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            elif p.requires_grad:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
        node.consumed = True
        node.backward_fn = None  # free saved closures


# ---------------------------------------------------------------------------
# initialization


def he_uniform_init(shape, fan_in: int, prng: SplitMix64, dtype="f32") -> Tensor:
    """Uniform init on [-sqrt(6/fan_in), +sqrt(6/fan_in)], PRNG-deterministic."""
    if fan_in < 1:
        raise InvalidArgumentError("fan_in must be >= 1")
    bound = float(np.sqrt(6.0 / fan_in))
    n = int(np.prod(shape))
    np_dtype = DTYPES[dtype] if isinstance(dtype, str) else dtype
    data = prng.fill_uniform(n, -bound, bound, dtype=np_dtype).reshape(shape)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / reduction ops (used by blocks and tests)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    _same_dtype(a, b)
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _out(a.data * c, (a,), lambda g: (g * c,))
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _out(
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.full(shape, g.reshape(()), dtype=x.data.dtype),),
    )


# ---------------------------------------------------------------------------
# neural-network ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW input and OIHW weights, zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise InvalidArgumentError("conv2d expects 4-D x (NCHW) and w (OIHW)")
    if stride < 1 or pad < 0:
        raise InvalidArgumentError("conv2d requires stride >= 1 and pad >= 0")
    n, ci, h, wd = x.data.shape
    co, wi, kh, kw = w.data.shape
    if wi != ci:
        raise InvalidArgumentError(f"conv2d channel mismatch: x has {ci}, w expects {wi}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or wd + 2 * pad < kw or oh < 1 or ow < 1:
        raise InvalidArgumentError("conv2d output would be empty")
    if b is not None and b.data.shape != (co,):
        raise InvalidArgumentError(f"conv2d bias must have shape ({co},)")
    _same_dtype(x, w, *(() if b is None else (b,)))

    y = K.conv2d_fwd(x.data, w.data, stride, pad)
    if b is not None:
        y += b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        need_dx = x.requires_grad or x.node is not None
        need_dw = w.requires_grad or w.node is not None
        dx, dw = K.conv2d_bwd(x.data, w.data, g, stride, pad, need_dx, need_dw)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _out(y, inputs, bwd)


def depthwise_conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Per-channel spatial convolution; w has shape (C, 1, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.data.shape[1] != 1:
        raise InvalidArgumentError("depthwise_conv2d expects NCHW x and (C,1,kh,kw) w")
    n, c, h, wd = x.data.shape
    if w.data.shape[0] != c:
        raise InvalidArgumentError(
            f"depthwise_conv2d channel mismatch: x has {c}, w has {w.data.shape[0]}"
        )
    if stride < 1 or pad < 0:
        raise InvalidArgumentError("depthwise_conv2d requires stride >= 1 and pad >= 0")
    kh, kw = w.data.shape[2], w.data.shape[3]
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or wd + 2 * pad < kw or oh < 1 or ow < 1:
        raise InvalidArgumentError("depthwise_conv2d output would be empty")
    if b is not None and b.data.shape != (c,):
        raise InvalidArgumentError(f"depthwise_conv2d bias must have shape ({c},)")
    _same_dtype(x, w, *(() if b is None else (b,)))

    y = K.depthwise_fwd(x.data, w.data, stride, pad)
    if b is not None:
        y += b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        need_dx = x.requires_grad or x.node is not None
        dx, dw = K.depthwise_bwd(x.data, w.data, g, stride, pad, need_dx)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _out(y, inputs, bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b for x of shape (N, F), w (F, G), b (G,)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise InvalidArgumentError("dense expects 2-D x and w")
    if x.data.shape[1] != w.data.shape[0]:
        raise InvalidArgumentError(
            f"dense dimension mismatch: x has {x.data.shape[1]} features, w expects {w.data.shape[0]}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise InvalidArgumentError(f"dense bias must have shape ({w.data.shape[1]},)")
    _same_dtype(x, w, b)
    y = x.data @ w.data + b.data

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _out(y, (x, w, b), bwd)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Train mode normalizes by the batch mean and biased variance and updates
    the running buffers in place (running <- momentum*running + (1-momentum)*batch).
    Eval mode is a fixed affine map using the running buffers.
    """
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"batchnorm mode must be train|eval, got {mode!r}")
    if x.data.ndim != 4:
        raise InvalidArgumentError("batchnorm expects NCHW input")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise InvalidArgumentError("batchnorm gamma/beta must be per-channel vectors")
    _same_dtype(x, gamma, beta)

    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv).astype(x.data.dtype)
        shift = (beta.data - running_mean * scale).astype(x.data.dtype)
        y = x.data * scale[None, :, None, None] + shift[None, :, None, None]

        def bwd_eval(g):
            dx = g * scale[None, :, None, None]
            xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _out(y, (x, gamma, beta), bwd_eval)

    m = n * h * w
    if m < 2:
        raise InvalidArgumentError("batchnorm train mode needs >= 2 elements per channel")
    y, xhat, inv, mean, var = K.bn_fwd_train(x.data, gamma.data, beta.data, eps)

    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def bwd(g):
        return K.bn_bwd_train(xhat, inv, gamma.data, np.ascontiguousarray(g))

    return _out(y, (x, gamma, beta), bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu / relu6 / linear; subgradient 0 at the kinks."""
    if kind == "linear":
        return _out(x.data.copy(), (x,), lambda g: (g,))
    if kind == "relu":
        y = np.maximum(x.data, 0)
        mask = x.data > 0
        return _out(y, (x,), lambda g: (g * mask,))
    if kind == "relu6":
        y = np.minimum(np.maximum(x.data, 0), 6)
        mask = (x.data > 0) & (x.data < 6)
        return _out(y, (x,), lambda g: (g * mask,))
    raise InvalidArgumentError(f"unknown activation kind {kind!r}")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling; the gradient routes to the window argmax (first index on ties)."""
    if x.data.ndim != 4:
        raise InvalidArgumentError("maxpool2d expects NCHW input")
    n, c, h, w = x.data.shape
    if k < 1 or stride < 1:
        raise InvalidArgumentError("maxpool2d requires k >= 1 and stride >= 1")
    if k > h or k > w:
        raise InvalidArgumentError("maxpool2d window larger than input")
    y, arg = K.maxpool_fwd(x.data, k, stride)

    def bwd(g):
        return (K.maxpool_bwd(arg, g, h, w),)

    return _out(y, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: NCHW -> NC."""
    if x.data.ndim != 4:
        raise InvalidArgumentError("global_avg_pool expects NCHW input")
    n, c, h, w = x.data.shape
    y = x.data.mean(axis=(2, 3))
    inv = np.asarray(1.0 / (h * w), dtype=x.data.dtype)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.data.shape).astype(x.data.dtype, copy=False),)

    return _out(y, (x,), bwd)


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of (N, F1) and (N, F2) feature matrices."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InvalidArgumentError("concat_features expects 2-D inputs")
    if a.data.shape[0] != b.data.shape[0]:
        raise InvalidArgumentError(
            f"concat_features batch mismatch {a.data.shape[0]} vs {b.data.shape[0]}"
        )
    _same_dtype(a, b)
    f1 = a.data.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return _out(y, (a, b), lambda g: (g[:, :f1], g[:, f1:]))


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, Tensor]:
    """Mean softmax cross-entropy over the batch.

    Returns (loss, probs); probs is detached from the graph. Uses the
    log-sum-exp formulation so large logits stay finite.
    """
    if logits.data.ndim != 2:
        raise InvalidArgumentError("softmax_cross_entropy expects (N, K) logits")
    n, k = logits.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise InvalidArgumentError(f"labels must have shape ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise InvalidArgumentError(f"labels must lie in [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    logp = z - np.log(denom)
    loss_val = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0

    def bwd(g):
        return (g.reshape(()) * (probs - onehot) / n,)

    loss = _out(loss_val, (logits,), bwd)
    return loss, Tensor(probs)


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords_per_param: int | None = None,
    seed: int = 0,
    select: str = "random",
) -> float:
    """Compare tape gradients against central finite differences.

    ``build_loss`` must rerun the forward pass from the current parameter
    values and return the scalar loss. Parameters must be float64. When
    ``max_coords_per_param`` is set, a subset of coordinates per parameter is
    checked (needed to keep whole-model checks tractable): a seeded draw when
    ``select="random"``, or the coordinates with the largest analytic
    magnitude when ``select="largest"``. Returns the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-5 <= eps <= 1e-2):
        raise InvalidArgumentError("eps must lie in [1e-5, 1e-2]")
    for p in params:
        if p.data.dtype != np.float64:
            raise InvalidArgumentError("gradient_check requires float64 parameters")
        p.zero_grad()

    loss = build_loss()
    if not np.isfinite(loss.data).all():
        raise NumericFailure("non-finite loss in gradient_check")
    if loss.node is not None:
        backward(loss)
    analytic = [p.grad_or_zeros().copy() for p in params]

    if select not in ("random", "largest"):
        raise InvalidArgumentError(f"select must be random|largest, got {select!r}")
    rng = SplitMix64(seed)
    max_rel = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = range(n)
        elif select == "largest":
            coords = np.argsort(-np.abs(a.reshape(-1)))[:max_coords_per_param]
        else:
            coords = sorted({rng.next_u64() % n for _ in range(max_coords_per_param)})
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = build_loss().item()
                flat[i] = orig - eps
                f_minus = build_loss().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericFailure("non-finite loss in finite-difference sweep")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(a.reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return max_rel
