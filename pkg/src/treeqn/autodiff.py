"""Dense tensors with a reverse-mode differentiation tape.

Every op works on numpy arrays with optional leading batch dimensions and
records a backward closure on its output.  ``backward`` sorts the recorded
graph topologically (the tape) and walks it in reverse.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
EPS_NORM = 1e-12
# debug mode turns the l2_normalize guard into a hard error
DEBUG = os.environ.get("TREEQN_DEBUG", "") not in ("", "0")

_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad, name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max along ``axis``; the gradient goes to the lowest-index maximiser."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (ga,)

    return _make(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), backward)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``a[..., idx[...]]`` along the last axis (one entry per row)."""
    idx = np.asarray(idx, dtype=np.intp)[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), backward)


def concatenate(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


# ---------------------------------------------------------------------------
# layers


def fc(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"fc: input {x.shape} does not conform to weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"fc: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ W.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, backward)


def action_linear(x: Tensor, W: Tensor) -> Tensor:
    """Apply one square matrix per action: ``out[n, a] = W[a] @ x[n]``.

    x is (N, k) and W is (A, k, k); the result is (N, A, k).
    """
    if x.ndim != 2 or W.ndim != 3 or W.shape[1:] != (x.shape[1], x.shape[1]):
        raise ValueError(f"action_linear: bad shapes {x.shape} and {W.shape}")
    out = np.einsum("aij,nj->nai", W.data, x.data, optimize=True)

    def backward(g):
        gx = np.einsum("nai,aij->nj", g, W.data, optimize=True)
        gW = np.einsum("nai,nj->aij", g, x.data, optimize=True)
        return gx, gW

    return _make(out, (x, W), backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation.

    x is (C, H, W) or (N, C, H, W); kernels is (C_out, C_in, kh, kw).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d: bad shapes {x.shape} and {kernels.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernels expect {ci}")
    if (h - kh) % stride or (w - kw) % stride or h < kh or w < kw:
        raise ValueError(
            f"conv2d: {h}x{w} input with {kh}x{kw} kernel and stride {stride} "
            "does not give an integral output size")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(co, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gflat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gk = (gflat.T @ cols).reshape(kernels.shape)
        gcols = (gflat @ kmat).reshape(n, ho, wo, c, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        grads = [gx[0] if squeeze else gx, gk]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(np.ascontiguousarray(out), parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """``x / (||x|| + eps)`` along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if DEBUG and np.any(norm <= eps):
        raise FloatingPointError("l2_normalize: vector norm below guard threshold")
    denom = norm + eps
    out = x.data / denom

    def backward(g):
        dot = (x.data * g).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * dot / (denom * denom * safe),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of every tensor the loss depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             accumulate: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    When ``params`` is given their grads are zeroed first (unless
    ``accumulate``) so parameters off the loss path end up with zero grads.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    zeroed: set[int] = set()
    if params is not None and not accumulate:
        for p in params:
            p.zero_grad()
            zeroed.add(id(p))
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.grad is not None and (accumulate or id(node) in zeroed):
                node.grad = node.grad + g
            else:
                node.grad = np.array(g, copy=True)
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp


# ---------------------------------------------------------------------------
# verification helpers


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None,
                      oracle_dtype=None) -> float:
    """Worst relative error between backward grads and central differences.

    ``f(*inputs)`` must return a scalar.  With ``max_coords`` a random subset
    of coordinates of each input is probed instead of all of them.  The
    backward pass always runs at the current precision; ``oracle_dtype``
    (e.g. ``np.longdouble``) only raises the precision of the difference
    quotients so their rounding noise stays below tiny true gradients.
    """
    global DEFAULT_DTYPE
    loss = f(*inputs)
    backward(loss, params=inputs)
    analytic = [np.array(t.grad, dtype=np.float64) for t in inputs]
    rng = rng or np.random.default_rng(0)
    saved = [t.data for t in inputs]
    prev_dtype = DEFAULT_DTYPE
    if oracle_dtype is not None:
        DEFAULT_DTYPE = np.dtype(oracle_dtype).type
    worst = 0.0
    try:
        with no_grad():
            for t, ga in zip(inputs, analytic):
                t.data = np.array(t.data, dtype=oracle_dtype or t.data.dtype, order="C")
            for t, ga in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = rng.choice(flat.size, max_coords, replace=False)
                for i in coords:
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(*inputs).data
                    flat[i] = orig - h
                    fm = f(*inputs).data
                    flat[i] = orig
                    num = float((fp - fm) / (2 * h))
                    worst = max(worst, float(relative_error(ga.reshape(-1)[i], num)))
    finally:
        DEFAULT_DTYPE = prev_dtype
        for t, data in zip(inputs, saved):
            t.data = data
    return worst


# ---------------------------------------------------------------------------
# optimiser


class RmsPropState:
    """Per-parameter second-moment accumulators plus a step counter."""

    def __init__(self, v: dict[str, np.ndarray] | None = None, step: int = 0):
        self.v = v if v is not None else {}
        self.step = step


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: RmsPropState,
                 lr: float = 1e-4, alpha: float = 0.99, eps: float = 1e-5) -> None:
    """Non-centred RMSProp, eps added outside the square root."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"rmsprop: grad shape {g.shape} != param shape {p.shape} for {name}")
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = alpha * v + (1.0 - alpha) * g * g
        state.v[name] = v
        p.data = p.data - lr * g / (np.sqrt(v) + eps)
    state.step += 1


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_arrays(path, params: dict[str, np.ndarray], opt_state: RmsPropState | None = None,
                extra: dict[str, np.ndarray] | None = None, meta: str = "") -> None:
    """Write a versioned npz: parameters and optimiser state as little-endian f64."""
    blob: dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION, dtype="<i8"),
        "meta": np.array(meta),
    }
    for name, arr in params.items():
        blob[f"param/{name}"] = np.asarray(arr, dtype="<f8")
    if opt_state is not None:
        blob["rmsprop/step"] = np.array(opt_state.step, dtype="<i8")
        for name, arr in opt_state.v.items():
            blob[f"rmsprop/v/{name}"] = np.asarray(arr, dtype="<f8")
    for name, arr in (extra or {}).items():
        blob[f"extra/{name}"] = np.asarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **blob)


def load_arrays(path):
    """Inverse of :func:`save_arrays`: (params, opt_state or None, extra, meta)."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params, v, extra = {}, {}, {}
        step = None
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = z[key]
            elif key.startswith("rmsprop/v/"):
                v[key[len("rmsprop/v/"):]] = z[key]
            elif key == "rmsprop/step":
                step = int(z[key])
            elif key.startswith("extra/"):
                extra[key[len("extra/"):]] = z[key]
        meta = str(z["meta"])
    opt = RmsPropState(v, step) if step is not None else None
    return params, opt, extra, meta
