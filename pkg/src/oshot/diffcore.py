"""Reverse-mode differentiable numerics.

Tensors wrap numpy buffers; primitive ops record onto an explicit Graph
(tape) while one is active, and ``Graph.backward`` replays the tape in
reverse. Training runs in float32; gradient checking uses float64.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractViolation

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy: backward closures may hand out shared buffers.
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Graph (tape)

_tls = threading.local()


def _stack() -> list:
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


class Graph:
    """Tape of primitive applications, in execution order.

    Used as a context manager; while active, every op whose inputs carry
    gradients appends a node. A node is (inputs, output, backward_fn) where
    backward_fn maps the output gradient to per-input gradients (None for
    inputs that need none).
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor.

        Tensors in `params` that the loss does not reach are given zero
        gradients so optimizers see a full gradient set.
        """
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward: loss must be scalar, got shape {loss.shape}"
            )
        for p in params:
            if p.requires_grad:
                p.zero_grad()
        # Node outputs are always intermediates; clear any stale buffers.
        for _, out, _ in self.nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for inputs, out, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue
            gin = backward_fn(out.grad)
            for t, g in zip(inputs, gin):
                if g is not None and t.requires_grad:
                    t.accumulate_grad(g)


def current_graph() -> Graph | None:
    s = _stack()
    return s[-1] if s else None


class pause_recording:
    """Temporarily disable op recording (inference inside a training step)."""

    def __enter__(self):
        self._saved = _stack()
        _tls.stack = []
        return self

    def __exit__(self, *exc):
        _tls.stack = self._saved


def record(inputs: Sequence[Tensor], out: Tensor, backward_fn: Callable) -> Tensor:
    """Append a primitive application to the active graph, if any."""
    g = current_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append((tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# Primitive operations


def _im2col(xpad: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xpad.shape[0]
    s0, s1, s2 = xpad.strides
    win = as_strided(xpad, (c, k, k, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride))
    return np.ascontiguousarray(win).reshape(c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with bias over a CHW tensor."""
    if x.data.ndim != 3:
        raise ContractViolation(f"conv2d: input must be CxHxW, got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ContractViolation(f"conv2d: weight must be OxIxKxK, got shape {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, k, _ = w.shape
    if cin_w != cin:
        raise ContractViolation(
            f"conv2d: weight expects {cin_w} input channels, input has {cin}"
        )
    if b.shape != (cout,):
        raise ContractViolation(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ContractViolation(f"conv2d: stride must be >= 1, got {stride}")
    if k > h + 2 * pad:
        raise ContractViolation(f"conv2d: kernel {k} exceeds padded height {h + 2 * pad}")
    if k > wd + 2 * pad:
        raise ContractViolation(f"conv2d: kernel {k} exceeds padded width {wd + 2 * pad}")

    if pad:
        xpad = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        xpad[:, pad:-pad, pad:-pad] = x.data
    else:
        xpad = x.data
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    col = _im2col(xpad, k, stride, ho, wo)
    out_mat = w.data.reshape(cout, -1) @ col
    out_mat += b.data[:, None]
    out = Tensor(out_mat.reshape(cout, ho, wo))

    def backward_fn(gout: np.ndarray):
        g2 = gout.reshape(cout, -1)
        gw = (g2 @ col.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = (w.data.reshape(cout, -1).T @ g2).reshape(cin, k, k, ho, wo)
            gxp = np.zeros_like(xpad)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += gcol[:, ki, kj]
            gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    return record((x, w, b), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def backward_fn(gout: np.ndarray):
        return (gout * (x.data > 0),)

    return record((x,), out, backward_fn)


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Windowed max over a CHW tensor; backward routes to the first
    (row-major) argmax of each window."""
    c, h, w = x.shape
    if k > h or k > w:
        raise ContractViolation(f"max_pool2d: window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2 = x.data.strides
    win = as_strided(x.data, (c, ho, wo, k, k), (s0, s1 * stride, s2 * stride, s1, s2))
    flat = np.ascontiguousarray(win).reshape(c, ho, wo, k * k)
    arg = flat.argmax(axis=3)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=3)[..., 0])

    def backward_fn(gout: np.ndarray):
        gx = np.zeros_like(x.data)
        ci, hi, wi = np.indices((c, ho, wo))
        rows = hi * stride + arg // k
        cols = wi * stride + arg % k
        np.add.at(gx, (ci, rows, cols), gout)
        return (gx,)

    return record((x,), out, backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w @ x + b; a 2-D x is treated as a batch of rows."""
    n = w.shape[1] if w.data.ndim == 2 else -1
    if w.data.ndim != 2:
        raise ContractViolation(f"linear: weight must be 2-D, got shape {w.shape}")
    if x.shape[-1] != n:
        raise ContractViolation(
            f"linear: input dim {x.shape[-1]} != weight inner dim {n}"
        )
    if b.shape != (w.shape[0],):
        raise ContractViolation(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    batched = x.data.ndim == 2
    if batched:
        out = Tensor(x.data @ w.data.T + b.data)
    else:
        out = Tensor(w.data @ x.data + b.data)

    def backward_fn(gout: np.ndarray):
        if batched:
            gx = gout @ w.data if x.requires_grad else None
            gw = gout.T @ x.data if w.requires_grad else None
            gb = gout.sum(axis=0) if b.requires_grad else None
        else:
            gx = w.data.T @ gout if x.requires_grad else None
            gw = np.outer(gout, x.data) if w.requires_grad else None
            gb = gout if b.requires_grad else None
        return gx, gw, gb

    return record((x, w, b), out, backward_fn)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax over a plain array (no gradient)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    k = logits.shape[0]
    if logits.data.ndim != 1:
        raise ContractViolation(f"softmax_cross_entropy: logits must be 1-D, got {logits.shape}")
    if not 0 <= label < k:
        raise ContractViolation(f"softmax_cross_entropy: label {label} out of range [0,{k})")
    p = softmax(logits.data)
    out = Tensor(np.asarray(-np.log(max(p[label], np.finfo(p.dtype).tiny)), dtype=logits.dtype))

    def backward_fn(gout: np.ndarray):
        g = p.copy()
        g[label] -= 1.0
        return (g * gout,)

    return record((logits,), out, backward_fn)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows of an (N, K) logit matrix."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractViolation(f"cross_entropy_rows: labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractViolation("cross_entropy_rows: label out of range")
    p = softmax(logits.data, axis=1)
    rows = np.arange(n)
    picked = np.maximum(p[rows, labels], np.finfo(p.dtype).tiny)
    out = Tensor(np.asarray(-np.log(picked).mean(), dtype=logits.dtype))

    def backward_fn(gout: np.ndarray):
        g = p.copy()
        g[rows, labels] -= 1.0
        g *= gout / n
        return (g,)

    return record((logits,), out, backward_fn)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Huber-style loss summed over elements: 0.5 d^2 if |d|<1 else |d|-0.5."""
    if pred.shape != target.shape:
        raise ContractViolation(
            f"smooth_l1: shape mismatch {pred.shape} vs {target.shape}"
        )
    d = pred.data - target.data
    ad = np.abs(d)
    val = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()
    out = Tensor(np.asarray(val, dtype=pred.dtype))

    def backward_fn(gout: np.ndarray):
        g = np.clip(d, -1.0, 1.0) * gout
        return g, (-g if target.requires_grad else None)

    return record((pred, target), out, backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout: rate must be in [0,1), got {p}")
    if not train or p == 0.0:
        out = Tensor(x.data.copy())

        def backward_id(gout: np.ndarray):
            return (gout,)

        return record((x,), out, backward_id)

    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = Tensor(x.data * mask)

    def backward_fn(gout: np.ndarray):
        return (gout * mask,)

    return record((x,), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward_fn(gout: np.ndarray):
        return gout, gout

    return record((a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def backward_fn(gout: np.ndarray):
        ga = gout * b.data if a.requires_grad else None
        gb = gout * a.data if b.requires_grad else None
        return ga, gb

    return record((a, b), out, backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * x.dtype.type(c))

    def backward_fn(gout: np.ndarray):
        return (gout * x.dtype.type(c),)

    return record((x,), out, backward_fn)


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward_fn(gout: np.ndarray):
        return (np.broadcast_to(gout, x.shape).astype(x.dtype, copy=True),)

    return record((x,), out, backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())

    def backward_fn(gout: np.ndarray):
        return (gout.reshape(x.shape),)

    return record((x,), out, backward_fn)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def backward_fn(gout: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, gout)
        return (gx,)

    return record((x,), out, backward_fn)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    if not tensors:
        raise ContractViolation("stack_rows: empty input")
    out = Tensor(np.stack([t.data for t in tensors]))

    def backward_fn(gout: np.ndarray):
        return tuple(gout[i] for i in range(len(tensors)))

    return record(tuple(tensors), out, backward_fn)


# ---------------------------------------------------------------------------
# Optimizer


class OptimizerState:
    """SGD-with-momentum state: one velocity buffer per trainable parameter."""

    def __init__(self, lr: float, momentum: float):
        if lr <= 0:
            raise ContractViolation(f"OptimizerState: lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation(f"OptimizerState: momentum must be in [0,1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}


def sgd_momentum_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: OptimizerState,
) -> tuple[dict[str, Tensor], OptimizerState]:
    """v <- mu*v + g; p <- p - lr*v. Zeroes parameter gradients afterwards."""
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ContractViolation(f"sgd_momentum_step: parameter '{name}' has no gradient")
        if g.shape != p.data.shape:
            raise ContractViolation(
                f"sgd_momentum_step: gradient shape {g.shape} != parameter shape {p.data.shape} for '{name}'"
            )
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        v *= state.momentum
        v += g
        p.data -= state.lr * v
        if grads is None:
            p.grad = None
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_probes_per_tensor: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients of f and central
    differences, probed coordinate-wise.

    f must be a deterministic scalar-valued function of `inputs`. Tensors
    are probed exhaustively up to `max_probes_per_tensor` coordinates,
    beyond which a seeded random subset is used.
    """
    if eps <= 0:
        raise ContractViolation(f"finite_diff_check: eps must be positive, got {eps}")
    if rng is None:
        rng = np.random.default_rng(0)
    with Graph() as g:
        loss = f(*inputs)
    g.backward(loss, params=inputs)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        n = flat.size
        if n <= max_probes_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_probes_per_tensor, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp = f(*inputs).item()
            flat[i] = orig - eps
            lm = f(*inputs).item()
            flat[i] = orig
            cd = (lp - lm) / (2.0 * eps)
            an = float(gflat[i])
            rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
