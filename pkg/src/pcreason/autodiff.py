"""Minimal dense-tensor arithmetic with reverse-mode gradients.

Everything is float64 and numpy-backed. A ``Tensor`` records the operations
applied to it; calling :func:`backward` on a scalar result walks the tape in
reverse and accumulates gradients into every leaf with ``requires_grad``.
The op set is deliberately small (matmul, elementwise arithmetic, exp/log,
tanh/sigmoid, reductions, softmax, layer norm, gather/concat/slice) -- just
what the encoders, fusion block, transformer and losses need.

:func:`finite_diff_check` is the central-difference oracle used to validate
every differentiable path in the rest of the package.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Rng:
    """Deterministic random source: numpy PCG64 keyed by a 64-bit seed.

    PCG64 gives identical streams for identical seeds on every platform,
    which the determinism contracts elsewhere rely on.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = "numpy-PCG64"
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, scale=1.0):
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, seq):
        self._gen.shuffle(seq)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; key folds into the seed."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + key + 1) & 0xFFFFFFFFFFFFFFFF)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast axes so grad matches the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -------------------------------------------------------

    @staticmethod
    def const(data) -> "Tensor":
        return Tensor(data, requires_grad=False)

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # -- plumbing -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def _needs_tape(self, *others: "Tensor") -> bool:
        return self.requires_grad or any(o.requires_grad for o in others)

    @staticmethod
    def _make(data, parents, backward, tracked: bool) -> "Tensor":
        tracked = tracked and _GRAD_ENABLED
        out = Tensor(data, requires_grad=tracked)
        if tracked:
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- arithmetic ---------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor.const(other)

    def __add__(self, other):
        other = Tensor._wrap(other)
        tracked = self._needs_tape(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw, tracked)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), bw, self.requires_grad)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        tracked = self._needs_tape(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw, tracked)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        tracked = self._needs_tape(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data**2), other.shape)
                )

        return Tensor._make(self.data / other.data, (self, other), bw, tracked)

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, exponent: float):
        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(self.data**exponent, (self,), bw, self.requires_grad)

    def __matmul__(self, other):
        other = Tensor._wrap(other)
        tracked = self._needs_tape(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw, tracked)

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            self._accumulate(g * out_data)

        return Tensor._make(out_data, (self,), bw, self.requires_grad)

    def log(self):
        def bw(g):
            self._accumulate(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bw, self.requires_grad)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            self._accumulate(g * (1.0 - out_data**2))

        return Tensor._make(out_data, (self,), bw, self.requires_grad)

    def sigmoid(self):
        out_data = np.empty_like(self.data)
        pos = self.data >= 0
        out_data[pos] = 1.0 / (1.0 + np.exp(-self.data[pos]))
        ez = np.exp(self.data[~pos])
        out_data[~pos] = ez / (1.0 + ez)

        def bw(g):
            self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), bw, self.requires_grad)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape).copy())

        return Tensor._make(
            self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, self.requires_grad
        )

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int):
        """Max-reduction along one axis; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.max(self.data, axis=axis)

        def bw(g):
            mask = np.zeros_like(self.data)
            np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
            self._accumulate(mask * np.expand_dims(g, axis))

        return Tensor._make(out_data, (self,), bw, self.requires_grad)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        old_shape = self.shape

        def bw(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._make(self.data.reshape(*shape), (self,), bw, self.requires_grad)

    def transpose(self):
        def bw(g):
            self._accumulate(g.T)

        return Tensor._make(self.data.T, (self,), bw, self.requires_grad)

    def __getitem__(self, key):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor._make(self.data[key], (self,), bw, self.requires_grad)

    def gather_rows(self, indices) -> "Tensor":
        """Row lookup (embedding-style); repeated indices accumulate grads."""
        idx = np.asarray(indices, dtype=np.int64)
        return self[idx]

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.size != 1:
            raise ValueError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._wrap(t) for t in tensors]
    tracked = any(t.requires_grad for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, tracked
    )


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor, max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ValueError("softmax_rows expects a rank-2 tensor")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        logits._accumulate(out_data * (g - dot))

    return Tensor._make(out_data, (logits,), bw, logits.requires_grad)


def log_softmax_rows(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2:
        raise ValueError("log_softmax_rows expects a rank-2 tensor")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("non-finite logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bw(g):
        logits._accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return Tensor._make(out_data, (logits,), bw, logits.requires_grad)


def layer_norm(x: Tensor, epsilon: float = 1e-9) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (no affine)."""
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs a nonempty last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    out_data = (x.data - mean) * inv

    def bw(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out_data).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - out_data * gym))

    return Tensor._make(out_data, (x,), bw, x.requires_grad)


def backward(loss: Tensor) -> None:
    """Module-level alias: run reverse-mode accumulation from a scalar loss."""
    loss.backward()


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Central-difference gradient oracle.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from the tensors in ``params``. Returns a report with the
    max relative error per parameter and overall; raises if two evaluations
    of ``f`` disagree (non-determinism).
    """
    params = dict(params)
    base1 = f()
    base2 = f()
    if base1.item() != base2.item():
        raise ValueError("finite_diff_check: f is not deterministic")
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in params.items():
        analytic[name] = (
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        )
        p.grad = None

    report: dict = {"per_param": {}, "max_rel_err": 0.0, "h": h, "tol": tol}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * h)
        an = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(an)))
        err = float(np.max(np.abs(fd - an) / denom)) if flat.size else 0.0
        report["per_param"][name] = err
        report["max_rel_err"] = max(report["max_rel_err"], err)
    report["passed"] = report["max_rel_err"] < tol
    return report
