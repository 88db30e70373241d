"""Array-valued reverse-mode tape plus second-order input jets.

Input derivatives (value, gradient, Hessian) are propagated forward through a
network as a `Jet`, and every array in that forward pass is a `Var` recorded
on a tape.  Calling `Var.backward` on a scalar loss built from jets therefore
yields exact parameter gradients, including through Hessian entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class UnsupportedCapability(RuntimeError):
    """Raised when a derivative order is requested that a network cannot supply."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or an intermediate quantity is not finite."""

    def __init__(self, what: str, index: int | None = None, point=None):
        self.what = what
        self.index = index
        self.point = None if point is None else np.asarray(point, dtype=float)
        msg = f"non-finite {what}"
        if index is not None:
            msg += f" at sample {index}"
        if self.point is not None:
            msg += f" (point {np.array2string(self.point, precision=6)})"
        super().__init__(msg)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """A float64 array node on the tape."""

    __array_ufunc__ = None  # make ndarray (op) Var dispatch to Var's reflected ops

    def __init__(self, data, parents: Sequence[tuple["Var", Callable]] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad: Optional[np.ndarray] = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, Var):
            o = np.asarray(other, dtype=np.float64)
            return Var(self.data + o, [(self, lambda g, s=self.shape: _unbroadcast(g, s))])
        return Var(
            self.data + other.data,
            [
                (self, lambda g, s=self.shape: _unbroadcast(g, s)),
                (other, lambda g, s=other.shape: _unbroadcast(g, s)),
            ],
        )

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Var):
            o = np.asarray(other, dtype=np.float64)
            return Var(self.data * o, [(self, lambda g, s=self.shape: _unbroadcast(g * o, s))])
        a, b = self.data, other.data
        return Var(
            a * b,
            [
                (self, lambda g, s=self.shape: _unbroadcast(g * b, s)),
                (other, lambda g, s=other.shape: _unbroadcast(g * a, s)),
            ],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __getitem__(self, idx):
        shape = self.shape

        basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return out

        return Var(self.data[idx], [(self, back)])

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape):
        old = self.shape
        return Var(self.data.reshape(*shape), [(self, lambda g: g.reshape(old))])

    def sum(self, axis=None):
        shape = self.shape

        def back(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy()
            return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

        return Var(self.data.sum(axis=axis), [(self, back)])

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # -- elementwise nonlinearities ------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return Var(y, [(self, lambda g: g * (1.0 - y * y))])

    def relu(self):
        # derivative at 0 taken as 0
        mask = (self.data > 0).astype(np.float64)
        return Var(self.data * mask, [(self, lambda g: g * mask)])

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Var(y, [(self, lambda g: g * y * (1.0 - y))])

    def softplus(self):
        x = self.data
        y = np.logaddexp(0.0, x)
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return Var(y, [(self, lambda g: g * s)])

    def clip_max0(self):
        """min(0, x) with zero derivative at 0."""
        mask = (self.data < 0).astype(np.float64)
        return Var(self.data * mask, [(self, lambda g: g * mask)])

    def clip_min0(self):
        """max(0, x) with zero derivative at 0."""
        return self.relu()

    # -- backward ---------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, fn in node.parents:
                contrib = fn(node.grad)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def einsum(spec: str, a, b) -> Var:
    """Two-operand einsum; every index of each operand must appear in the other or the output."""
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    ad = a.data if a_var else np.asarray(a, dtype=np.float64)
    bd = b.data if b_var else np.asarray(b, dtype=np.float64)
    parents = []
    if a_var:
        parents.append((a, lambda g: np.einsum(f"{out},{sb}->{sa}", g, bd)))
    if b_var:
        parents.append((b, lambda g: np.einsum(f"{out},{sa}->{sb}", g, ad)))
    return Var(np.einsum(spec, ad, bd), parents)


def matmul(a, b) -> Var:
    """Broadcasting matrix product of operands with ndim >= 2."""
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    ad = a.data if a_var else np.asarray(a, dtype=np.float64)
    bd = b.data if b_var else np.asarray(b, dtype=np.float64)
    parents = []
    if a_var:
        parents.append((a, lambda g: _matmul_grad_a(g, ad.shape, bd)))
    if b_var:
        parents.append((b, lambda g: _matmul_grad_b(g, ad, bd.shape)))
    return Var(ad @ bd, parents)


def _matmul_grad_a(g, a_shape, bd):
    if len(a_shape) == 2 and bd.ndim == 3:
        # shared matrix times a batch: contract over the batch directly
        if bd.shape[0] == 1:
            return g.sum(0) @ bd[0].T
        return np.tensordot(g, bd, axes=([0, 2], [0, 2]))
    return _unbroadcast(g @ np.swapaxes(bd, -1, -2), a_shape)


def _matmul_grad_b(g, ad, b_shape):
    if len(b_shape) == 2 and ad.ndim == 3:
        if ad.shape[0] == 1:
            return ad[0].T @ g.sum(0)
        return np.tensordot(ad, g, axes=([0, 1], [0, 1]))
    return _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b_shape)


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    return Var(np.swapaxes(a.data, -1, -2), [(a, lambda g: np.swapaxes(g, -1, -2))])


def stack(vars_: Sequence[Var], axis: int = -1) -> Var:
    data = np.stack([v.data for v in vars_], axis=axis)
    parents = []
    for i, v in enumerate(vars_):
        parents.append((v, lambda g, i=i: np.take(g, i, axis=axis)))
    return Var(data, parents)


def concat(vars_: Sequence[Var], axis: int = 0) -> Var:
    data = np.concatenate([v.data for v in vars_], axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vars_])
    parents = []
    for i, v in enumerate(vars_):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        parents.append((v, lambda g, sl=tuple(sl): g[sl]))
    return Var(data, parents)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamVector:
    """Flat parameter vector with a named block layout."""

    values: np.ndarray
    layout: list  # list of (name, offset, shape)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.layout = [(str(n), int(o), tuple(int(s) for s in shp)) for n, o, shp in self.layout]
        end = 0
        for name, off, shp in self.layout:
            if off != end:
                raise ValueError(f"layout block {name!r} is not contiguous (offset {off}, expected {end})")
            end = off + int(np.prod(shp, dtype=int))
        if end != self.values.size:
            raise ValueError(f"layout covers {end} entries but vector has {self.values.size}")

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple]], values=None) -> "ParamVector":
        layout, off = [], 0
        for name, shp in shapes:
            layout.append((name, off, tuple(shp)))
            off += int(np.prod(shp, dtype=int))
        vals = np.zeros(off) if values is None else values
        return cls(vals, layout)

    def __len__(self):
        return self.values.size

    def slot(self, name: str) -> tuple[int, tuple]:
        for n, off, shp in self.layout:
            if n == name:
                return off, shp
        raise KeyError(name)

    def block(self, name: str) -> np.ndarray:
        """Writable view of one block."""
        off, shp = self.slot(name)
        return self.values[off: off + int(np.prod(shp, dtype=int))].reshape(shp)

    def names(self) -> list[str]:
        return [n for n, _, _ in self.layout]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.layout))

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))


class Blocks:
    """Tape views of the parameter blocks, all sharing one flat leaf."""

    def __init__(self, params: ParamVector, theta: Var | None = None):
        self.params = params
        self.theta = Var(params.values.copy()) if theta is None else theta
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        if name not in self._cache:
            off, shp = self.params.slot(name)
            size = int(np.prod(shp, dtype=int))
            self._cache[name] = self.theta[off: off + size].reshape(shp)
        return self._cache[name]


# ---------------------------------------------------------------------------
# jets


@dataclass
class Jet:
    """Batched second-order jet: value (B,), grad (B,d), hess (B,d,d) or None when not tracked.

    Components may be Var or plain arrays.  `hess` is None both when the
    Hessian was not requested and when it is identically zero upstream; the
    `order` field tells which.
    """

    value: object
    grad: object
    hess: object = None
    order: int = 2


@dataclass
class Scalar2Jet:
    value: float
    grad: np.ndarray
    hess: Optional[np.ndarray]
    hess_defined: bool = True

    def __post_init__(self):
        self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.hess is not None:
            self.hess = np.asarray(self.hess, dtype=np.float64)


@dataclass
class LossGrad:
    loss: float
    grad: np.ndarray
    aux: dict = field(default_factory=dict)


def _data(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


def symmetrize(h):
    """Exactly symmetric copy: (H + H^T)/2 is bitwise symmetric since + commutes."""
    if h is None:
        return None
    ht = h.data.swapaxes(-1, -2) if isinstance(h, Var) else np.swapaxes(h, -1, -2)
    if isinstance(h, Var):
        ht_var = Var(ht, [(h, lambda g: np.swapaxes(g, -1, -2))])
        return (h + ht_var) * 0.5
    return 0.5 * (h + ht)


def eval_jet(net, params: ParamVector, x, hessian: bool = True) -> Scalar2Jet:
    """Value, input gradient and input Hessian of `net` at one input point."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != net.input_dim:
        raise ValueError(f"input has length {x.size}, network expects {net.input_dim}")
    if hessian and not net.is_c2:
        raise UnsupportedCapability(
            f"{net.family} with activation {net.activation!r} is not twice differentiable; "
            "request hessian=False for value and gradient only"
        )
    jets = eval_jets(net, params, x[None, :], hessian=hessian)
    d = net.input_dim
    h = None
    if hessian:
        h = jets.hess[0] if jets.hess is not None else np.zeros((d, d))
    return Scalar2Jet(float(jets.value[0]), jets.grad[0].copy(), h, hess_defined=hessian)


def eval_jets(net, params: ParamVector, X, hessian: bool = False) -> Jet:
    """Batched jets as plain arrays (no tape retained)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != net.input_dim:
        raise ValueError(f"input has {X.shape[1]} columns, network expects {net.input_dim}")
    if hessian and not net.is_c2:
        raise UnsupportedCapability(f"{net.family}/{net.activation} has no Hessian")
    jet = net.jet(Blocks(params), X, order=2 if hessian else 1)
    B, d = X.shape
    value = _data(jet.value)
    grad = np.broadcast_to(_data(jet.grad), (B, d)).copy()
    hess = None
    if hessian:
        hess = np.zeros((B, d, d)) if jet.hess is None else np.broadcast_to(_data(jet.hess), (B, d, d)).copy()
    return Jet(value.copy(), grad, hess, order=2 if hessian else 1)


def loss_param_grad(loss_fn: Callable[[Blocks], object], params: ParamVector) -> LossGrad:
    """Exact gradient of `loss_fn(blocks)` with respect to every parameter.

    `loss_fn` receives tape views of the parameter blocks and returns a scalar
    Var (or a (Var, aux_dict) pair).  A plain number, e.g. for an empty batch,
    yields a zero gradient.
    """
    blocks = Blocks(params)
    out = loss_fn(blocks)
    aux = {}
    if isinstance(out, tuple):
        out, aux = out
    if not isinstance(out, Var):
        val = float(out)
        if not np.isfinite(val):
            raise NonFiniteError("loss")
        return LossGrad(val, np.zeros(len(params)), aux)
    val = float(out.data)
    if not np.isfinite(val):
        raise NonFiniteError("loss")
    out.backward()
    g = blocks.theta.grad
    grad = np.zeros(len(params)) if g is None else g.copy()
    return LossGrad(val, grad, aux)


def check_finite(values, points, what: str):
    """Raise NonFiniteError naming the first sample whose value is not finite."""
    arr = np.asarray(_data(values))
    if arr.ndim == 0:
        if not np.isfinite(arr):
            raise NonFiniteError(what)
        return
    flat = arr.reshape(arr.shape[0], -1)
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise NonFiniteError(what, i, None if points is None else np.asarray(points)[i])
