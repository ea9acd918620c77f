"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: exactly the ops the embedding / fusion / policy stack
needs, backed by numpy float64 so finite-difference gradient checks hold to
tight tolerances and runs are bit-reproducible per seed. No broadcasting
beyond a trailing-dimension bias add; everything else must shape-match.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Raised on shape mismatches, non-finite inputs, or misuse of the tape."""


class Tensor:
    """N-dimensional float64 array plus an optional gradient buffer.

    Leaf tensors are created directly (parameters set requires_grad=True).
    Non-leaf tensors are produced by the ops below and carry a backward
    closure plus references to their parents; `backward()` on a scalar
    walks the recorded ops in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, retain_graph: bool = False) -> "Tape":
        """Reverse-mode sweep from a scalar root. Returns the tape used.

        The tape is released afterwards (parent links dropped) unless
        retain_graph is set, so a second backward through the same graph
        requires rebuilding it.
        """
        if self.data.size != 1:
            raise TensorError("backward() requires a scalar root")
        if not np.isfinite(self.data).all():
            raise TensorError("backward() on non-finite root")
        tape = Tape(self)
        for node in tape.nodes:
            if node._parents:  # reset non-leaf grads; leaves accumulate
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(tape.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        if not retain_graph:
            tape.release()
        return tape

    # operator sugar; full op set lives in module functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Topologically ordered record of the ops reaching a root tensor.

    Every node's parents appear before the node itself; iteration order is
    deterministic (depth-first over the recorded parent tuples), which keeps
    backward accumulation order, and therefore results, bit-stable.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = nodes

    def release(self) -> None:
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add g into t's gradient. owned=True promises g is a freshly allocated
    array the caller will not reuse, letting the first accumulation take the
    buffer instead of copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise TensorError(f"non-finite {what}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add. The only broadcast allowed: b as a trailing-shape bias
    (b.shape matches the trailing axes of a.shape)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape
    if not bias and a.shape != b.shape:
        raise TensorError(f"add shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        if bias:
            _accumulate(b, g.reshape(-1, *b.shape).sum(axis=0), owned=True)
        else:
            _accumulate(b, g)

    return _make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise TensorError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g, owned=True)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.shape != b.shape:
        raise TensorError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data, owned=True)
        _accumulate(b, g * a.data, owned=True)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s, owned=True)

    return _make(a.data * s, (a,), backward)


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a single-element learnable tensor (broadcast over a)."""
    if s.size != 1:
        raise TensorError(f"scalar_mul needs a 1-element tensor, got {s.shape}")
    sval = s.data.reshape(())

    def backward(g):
        _accumulate(a, g * sval)
        if s.requires_grad:
            _accumulate(s, np.asarray((g * a.data).sum()).reshape(s.shape))

    return _make(a.data * sval, (a, s), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (..., n, k) @ (k, m) and batched (B, n, k) @ (B, k, m)."""
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner-dim mismatch {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"matmul batch mismatch {a.shape} vs {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM; much faster than batched matmul
        m = b.shape[1]
        out_data = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], m)
    else:
        out_data = a.data @ b.data

    def backward(g):
        if b.ndim == 2:
            m = b.shape[1]
            g2 = g.reshape(-1, m)
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, k).T @ g2, owned=True)
        else:
            if a.requires_grad:
                _accumulate(a, g @ np.swapaxes(b.data, -1, -2), owned=True)
            if b.requires_grad:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g, owned=True)

    return _make(out_data, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise TensorError("transpose_last requires rank >= 2")

    def backward(g):
        _accumulate(a, np.ascontiguousarray(np.swapaxes(g, -1, -2)), owned=True)

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along axis; backward splits the gradient back to each parent."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise TensorError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along axis, starting at `start`."""
    if start < 0 or start + length > a.shape[axis]:
        raise TensorError(f"narrow [{start}:{start + length}) out of range for {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accumulate(a, full, owned=True)

    return _make(a.data[idx].copy(), (a,), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of concat: chop into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise TensorError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(narrow(a, axis, start, n))
        start += n
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _unary(a: Tensor, out_data: np.ndarray, dfn: Callable[[], np.ndarray]) -> Tensor:
    def backward(g):
        _accumulate(a, g * dfn(), owned=True)

    return _make(out_data, (a,), backward)


def cos(a: Tensor) -> Tensor:
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def sin(a: Tensor) -> Tensor:
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary(a, y, lambda: 1.0 - y * y)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, y, lambda: y * (1.0 - y))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|
    y = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _unary(a, y, lambda: 1.0 / (1.0 + np.exp(-a.data)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _unary(a, y, lambda: y)


def absolute(a: Tensor) -> Tensor:
    """|x| with the subgradient at 0 fixed to 0."""
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def clamp_max(a: Tensor, hi: float) -> Tensor:
    """min(x, hi); subgradient 0 on the clamped side (including at the boundary)."""
    mask = a.data < hi
    return _unary(a, np.minimum(a.data, hi), lambda: mask.astype(np.float64))


# ---------------------------------------------------------------------------
# reductions and fused ops


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g.reshape(()))))

    return _make(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, float(g.reshape(())) / n))

    return _make(np.asarray(a.data.mean()), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along axis; slices sum to 1."""
    _require_finite(a.data, "logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot), owned=True)

    return _make(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite(a.data, "logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True), owned=True)

    return _make(y, (a,), backward)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference; subgradient at exact ties is 0."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise TensorError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = float(g.reshape(())) / n
        _accumulate(pred, np.sign(diff) * s)
        _accumulate(target, -np.sign(diff) * s)

    return _make(np.asarray(np.abs(diff).mean()), (pred, target), backward)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatters gradients into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= table.shape[0]:
        raise TensorError(f"lookup ids out of range for table {table.shape}")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, full)

    return _make(table.data[ids], (table,), backward)


def nll(logp: Tensor, ids: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class ids under log-probabilities."""
    ids = np.asarray(ids, dtype=np.int64)
    if logp.ndim != 2 or ids.shape != (logp.shape[0],):
        raise TensorError(f"nll expects (n, c) log-probs and (n,) ids, got {logp.shape} / {ids.shape}")
    rows = np.arange(logp.shape[0])
    picked = logp.data[rows, ids]

    def backward(g):
        s = float(g.reshape(())) / logp.shape[0]
        full = np.zeros_like(logp.data)
        full[rows, ids] = -s
        _accumulate(logp, full)

    return _make(np.asarray(-picked.mean()), (logp,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorError("layer_norm gain/bias must match last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0), owned=True)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0), owned=True)
        if a.requires_grad:
            gx = g * gain.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(a, ga, owned=True)

    return _make(out_data, (a, gain, bias), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    rel_err: float
    probes: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)


def _rel_err(a: float, b: float, floor: float) -> float:
    denom = max(abs(a), abs(b), floor)
    if denom == 0.0:
        return 0.0
    return abs(a - b) / denom


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, rng: np.random.Generator | None = None,
               dense_limit: int = 32, n_dirs: int = 2,
               atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    Small parameters (size <= dense_limit) are perturbed entry by entry; larger
    ones are probed along n_dirs random unit directions, comparing the
    directional derivative (f(p+hv) - f(p-hv)) / 2h with v . grad(p).

    The comparison is |a - b| <= max(tol*|a|, tol*|b|, atol); the absolute
    floor keeps mathematically-zero gradients (whose central differences are
    pure cancellation noise) from reporting spurious relative error.
    """
    rng = rng or np.random.default_rng(0)
    floor = atol / tol
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise TensorError("non-finite loss in grad_check")
    loss.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    def eval_loss() -> float:
        return f().item()

    report = GradCheckReport(tol=tol)
    for p, g in zip(params, analytic):
        if p.size <= dense_limit:
            worst = 0.0
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(p.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = eval_loss()
                flat[i] = orig - h
                fm = eval_loss()
                flat[i] = orig
                worst = max(worst, _rel_err((fp - fm) / (2 * h), gflat[i], floor))
            report.entries.append(GradCheckEntry(p.name or "param", worst, p.size))
        else:
            worst = 0.0
            for _ in range(n_dirs):
                v = rng.normal(size=p.shape)
                v /= np.linalg.norm(v)
                p.data += h * v
                fp = eval_loss()
                p.data -= 2 * h * v
                fm = eval_loss()
                p.data += h * v
                worst = max(worst, _rel_err((fp - fm) / (2 * h), float((g * v).sum()),
                                            floor))
            report.entries.append(GradCheckEntry(p.name or "param", worst, n_dirs))
    return report
