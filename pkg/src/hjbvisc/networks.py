"""Value-network families: smooth tanh MLP, input-convex net, partially input-convex net.

Each network exposes `jet(blocks, X, order)` which pushes a batch of inputs
through the layers while carrying first (order >= 1) and second (order 2)
input derivatives.  Everything is built from tape ops, so the same pass serves
for evaluation and for parameter gradients of derivative-dependent losses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Blocks, Jet, ParamVector, Var, einsum, eval_jets, matmul, symmetrize, transpose

EPS_POS = 1e-6
CONVEXITY_TOL = 1e-12
SOFTPLUS_BETA = 10.0


# ---------------------------------------------------------------------------
# per-layer jet propagation; unit jets carry value (B,k), grad (B|1,k,d), hess (B|1,k,d,d)


def _input_jet(X: np.ndarray, cols: slice, d: int) -> Jet:
    eye = np.eye(d)[cols]
    return Jet(X[:, cols], eye[None, :, :], None)


def _affine(jet: Jet, W, b, order: int) -> Jet:
    v = matmul(jet.value, transpose(W))
    if b is not None:
        v = v + b
    g = matmul(W, jet.grad) if order >= 1 else None
    h = None
    if order >= 2 and jet.hess is not None:
        B, k, d, _ = jet.hess.shape
        h = matmul(W, jet.hess.reshape(B, k, d * d)).reshape(B, W.shape[0], d, d)
    return Jet(v, g, h)


def _add(a: Jet, b: Jet) -> Jet:
    h = a.hess if b.hess is None else (b.hess if a.hess is None else a.hess + b.hess)
    g = None if a.grad is None else a.grad + b.grad
    return Jet(a.value + b.value, g, h)


def _activate(jet: Jet, kind: str, order: int) -> Jet:
    a = jet.value
    if kind == "relu":
        y = a.relu() if isinstance(a, Var) else np.maximum(a, 0.0)
        if order == 0:
            return Jet(y, None, None)
        mask = (np.asarray(a.data if isinstance(a, Var) else a) > 0).astype(np.float64)
        g = jet.grad * mask[:, :, None]
        h = None
        if order >= 2 and jet.hess is not None:
            h = jet.hess * mask[:, :, None, None]
        return Jet(y, g, h)

    if kind == "tanh":
        y = a.tanh()
        if order == 0:
            return Jet(y, None, None)
        ds = 1.0 - y * y
        d2s = -2.0 * (y * ds) if order >= 2 else None
    elif kind == "softplus":
        z = a * SOFTPLUS_BETA
        y = z.softplus() * (1.0 / SOFTPLUS_BETA)
        if order == 0:
            return Jet(y, None, None)
        ds = z.sigmoid()
        d2s = (ds * (1.0 - ds)) * SOFTPLUS_BETA if order >= 2 else None
    else:
        raise ValueError(f"unknown activation {kind!r}")

    B, k = y.shape
    g = ds.reshape(B, k, 1) * jet.grad
    h = None
    if order >= 2:
        d = g.shape[-1]
        outer = jet.grad.reshape(*jet.grad.shape, 1) * jet.grad.reshape(*jet.grad.shape[:2], 1, d)
        h = d2s.reshape(B, k, 1, 1) * outer
        if jet.hess is not None:
            h = h + ds.reshape(B, k, 1, 1) * jet.hess
    return Jet(y, g, h)


def _scalar_out(jet: Jet, order: int) -> Jet:
    v = jet.value[:, 0]
    g = jet.grad[:, 0, :] if order >= 1 else None
    h = None
    if order >= 2 and jet.hess is not None:
        h = symmetrize(jet.hess[:, 0, :, :])
    return Jet(v, g, h, order=order)


def _uniform(rng, lo, hi, shape):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------


class _Base:
    family = ""
    positive_blocks: tuple = ()
    activation = ""

    def shapes(self) -> list:
        raise NotImplementedError

    @property
    def is_c2(self) -> bool:
        return self.activation in ("tanh", "softplus")

    @property
    def is_convex_family(self) -> bool:
        return bool(self.positive_blocks)

    def empty_params(self) -> ParamVector:
        return ParamVector.from_shapes(self.shapes())

    def spec(self) -> dict:
        raise NotImplementedError

    def jet(self, blocks: Blocks, X: np.ndarray, order: int = 1) -> Jet:
        raise NotImplementedError

    def __call__(self, params: ParamVector, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.asarray(self.jet(Blocks(params), X, order=0).value.data).copy()


class SmoothMLP(_Base):
    """tanh MLP; optionally with a quadratic head z^T P z added to the output."""

    family = "smooth_mlp"

    def __init__(self, input_dim: int, hidden=(32, 32), activation: str = "tanh",
                 quadratic_head: bool = False):
        if len(hidden) < 1:
            raise ValueError("SmoothMLP needs at least one hidden layer")
        if activation not in ("tanh", "softplus"):
            raise ValueError("SmoothMLP activation must be smooth (tanh or softplus)")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.quadratic_head = bool(quadratic_head)

    @property
    def widths(self):
        return (self.input_dim, *self.hidden, 1)

    def shapes(self):
        w = self.widths
        out = []
        for i in range(len(w) - 1):
            out += [(f"W{i}", (w[i + 1], w[i])), (f"b{i}", (w[i + 1],))]
        if self.quadratic_head:
            out.append(("P", (self.input_dim, self.input_dim)))
        return out

    def init_params(self, rng) -> ParamVector:
        p = self.empty_params()
        w = self.widths
        for i in range(len(w) - 1):
            r = 1.0 / np.sqrt(w[i])
            p.block(f"W{i}")[...] = _uniform(rng, -r, r, (w[i + 1], w[i]))
        return p

    def jet(self, blocks, X, order=1):
        d = self.input_dim
        B = X.shape[0]
        j = _input_jet(X, slice(0, d), d)
        L = len(self.widths) - 1
        for i in range(L):
            j = _affine(j, blocks[f"W{i}"], blocks[f"b{i}"], order)
            if i < L - 1:
                j = _activate(j, self.activation, order)
        out = _scalar_out(j, order)
        if self.quadratic_head:
            P = blocks["P"]
            Px = einsum("ij,bj->bi", P, X)
            out.value = out.value + (Px * X).sum(1)
            if order >= 1:
                PtX = einsum("ji,bj->bi", P, X)
                out.grad = out.grad + Px + PtX
            if order >= 2:
                PPt = symmetrize(P.reshape(1, d, d)) * 2.0
                out.hess = PPt if out.hess is None else out.hess + PPt
        if out.value.shape != (B,):
            raise AssertionError("bad output shape")
        return out

    def spec(self):
        return {"family": self.family, "input_dim": self.input_dim, "widths": list(self.widths),
                "activation": self.activation, "quadratic_head": self.quadratic_head}


class ConvexNet(_Base):
    """y = W1 sigma(W0 x + b0) + b1 + f x, with W1 >= EPS_POS elementwise."""

    family = "convex"
    positive_blocks = ("W1",)

    def __init__(self, input_dim: int, hidden: int = 64, activation: str = "relu",
                 init_scale: float = 1.0):
        if activation not in ("relu", "softplus"):
            raise ValueError("ConvexNet activation must be relu or softplus")
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.activation = activation
        self.init_scale = float(init_scale)   # upper end of the W1 init range, in units of 1/sqrt(n)

    @property
    def widths(self):
        return (self.input_dim, self.hidden, 1)

    def shapes(self):
        n, d = self.hidden, self.input_dim
        return [("W0", (n, d)), ("b0", (n,)), ("W1", (1, n)), ("b1", (1,)), ("f", (1, d))]

    def init_params(self, rng) -> ParamVector:
        p = self.empty_params()
        n, d = self.hidden, self.input_dim
        p.block("W0")[...] = _uniform(rng, -1 / np.sqrt(d), 1 / np.sqrt(d), (n, d))
        # kinks must start spread over the box: residual losses see only V_x, which is
        # piecewise constant in b0 for ReLU, so zero biases would pin every kink at the origin
        p.block("b0")[...] = _uniform(rng, -1 / np.sqrt(d), 1 / np.sqrt(d), (n,))
        p.block("W1")[...] = _uniform(rng, EPS_POS, self.init_scale / np.sqrt(n), (1, n))
        return p

    def jet(self, blocks, X, order=1):
        d = self.input_dim
        x = _input_jet(X, slice(0, d), d)
        h = _activate(_affine(x, blocks["W0"], blocks["b0"], order), self.activation, order)
        out = _add(_affine(h, blocks["W1"], blocks["b1"], order), _affine(x, blocks["f"], None, order))
        return _scalar_out(out, order)

    def spec(self):
        return {"family": self.family, "input_dim": self.input_dim, "widths": list(self.widths),
                "activation": self.activation, "init_scale": self.init_scale}


class PartialConvexNet(_Base):
    """Convex in x for each fixed t; input layout (t, x_1..x_n).

    y = W2 sigma(W0 x + W1 F2(F1(t)) + b0) + b1, with W2 >= EPS_POS and
    F1, F2 one-hidden-layer tanh networks.
    """

    family = "partial_convex"
    positive_blocks = ("W2",)

    def __init__(self, state_dim: int, hidden: int = 64, latent: int = 16, ctx: int = 16,
                 sub_hidden: int = 16, activation: str = "relu", t_range=None):
        if activation not in ("relu", "softplus"):
            raise ValueError("PartialConvexNet activation must be relu or softplus")
        # fixed affine map of t onto [-1, 1] ahead of F1, so tanh does not saturate on long horizons
        if t_range is not None:
            lo, hi = (float(v) for v in t_range)
            if not hi > lo:
                raise ValueError("t_range needs lo < hi")
            t_range = (lo, hi)
        self.t_range = t_range
        self.state_dim = int(state_dim)
        self.input_dim = self.state_dim + 1
        self.hidden = int(hidden)
        self.latent = int(latent)      # dim of y_hat = F1(t)
        self.ctx = int(ctx)            # dim of F2(y_hat)
        self.sub_hidden = int(sub_hidden)
        self.activation = activation

    @property
    def widths(self):
        return (self.input_dim, self.hidden, 1)

    def shapes(self):
        n, dx, m, k, h = self.hidden, self.state_dim, self.latent, self.ctx, self.sub_hidden
        return [
            ("F1_W0", (h, 1)), ("F1_b0", (h,)), ("F1_W1", (m, h)), ("F1_b1", (m,)),
            ("F2_W0", (h, m)), ("F2_b0", (h,)), ("F2_W1", (k, h)), ("F2_b1", (k,)),
            ("W0", (n, dx)), ("W1", (n, k)), ("b0", (n,)), ("W2", (1, n)), ("b1", (1,)),
        ]

    def init_params(self, rng) -> ParamVector:
        p = self.empty_params()
        for name, shp in self.shapes():
            if name.startswith(("F1_W", "F2_W")) or name in ("W0", "W1"):
                r = 1.0 / np.sqrt(shp[1])
                p.block(name)[...] = _uniform(rng, -r, r, shp)
        r = 1.0 / np.sqrt(self.state_dim)
        p.block("b0")[...] = _uniform(rng, -r, r, (self.hidden,))
        p.block("W2")[...] = _uniform(rng, EPS_POS, 1 / np.sqrt(self.hidden), (1, self.hidden))
        return p

    def jet(self, blocks, X, order=1):
        d = self.input_dim
        t = _input_jet(X, slice(0, 1), d)
        if self.t_range is not None:
            lo, hi = self.t_range
            s = 2.0 / (hi - lo)
            t = Jet(s * t.value - (lo + hi) / (hi - lo), s * t.grad, None)
        x = _input_jet(X, slice(1, d), d)
        y = _activate(_affine(t, blocks["F1_W0"], blocks["F1_b0"], order), "tanh", order)
        y = _affine(y, blocks["F1_W1"], blocks["F1_b1"], order)
        c = _activate(_affine(y, blocks["F2_W0"], blocks["F2_b0"], order), "tanh", order)
        c = _affine(c, blocks["F2_W1"], blocks["F2_b1"], order)
        pre = _add(_affine(x, blocks["W0"], blocks["b0"], order), _affine(c, blocks["W1"], None, order))
        h = _activate(pre, self.activation, order)
        return _scalar_out(_affine(h, blocks["W2"], blocks["b1"], order), order)

    def spec(self):
        return {"family": self.family, "input_dim": self.input_dim, "widths": list(self.widths),
                "activation": self.activation, "state_dim": self.state_dim, "latent": self.latent,
                "ctx": self.ctx, "sub_hidden": self.sub_hidden,
                "t_range": None if self.t_range is None else list(self.t_range)}


FAMILIES = {"smooth_mlp": SmoothMLP, "convex": ConvexNet, "partial_convex": PartialConvexNet}


def build_network(spec: dict):
    """Construct a network from a checkpoint/config dict."""
    family = spec.get("family")
    act = spec.get("activation")
    if family == "smooth_mlp":
        widths = spec.get("widths")
        if widths is not None:
            input_dim, hidden = widths[0], widths[1:-1]
        else:
            input_dim, hidden = spec["input_dim"], spec.get("hidden", (32, 32))
        return SmoothMLP(input_dim, hidden, act or "tanh", spec.get("quadratic_head", False))
    if family == "convex":
        widths = spec.get("widths")
        input_dim = widths[0] if widths else spec["input_dim"]
        hidden = widths[1] if widths else spec.get("hidden", 64)
        return ConvexNet(input_dim, hidden, act or "relu", spec.get("init_scale", 1.0))
    if family == "partial_convex":
        widths = spec.get("widths")
        input_dim = widths[0] if widths else spec["input_dim"]
        hidden = widths[1] if widths else spec.get("hidden", 64)
        return PartialConvexNet(input_dim - 1, hidden, spec.get("latent", 16), spec.get("ctx", 16),
                                spec.get("sub_hidden", 16), act or "relu", spec.get("t_range"))
    raise ValueError(f"unknown network family {family!r}")


# ---------------------------------------------------------------------------
# operations


def forward(net, params: ParamVector, x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != net.input_dim:
        raise ValueError(f"input has length {x.size}, network expects {net.input_dim}")
    return float(net(params, x[None, :])[0])


def project_positive(net, params: ParamVector) -> ParamVector:
    """Clamp the positive weight blocks to at least EPS_POS; other entries untouched."""
    out = params.copy()
    for name in net.positive_blocks:
        blk = out.block(name)
        np.maximum(blk, EPS_POS, out=blk)
    return out


def positivity_holds(net, params: ParamVector) -> bool:
    return all(bool(np.all(params.block(n) >= EPS_POS)) for n in net.positive_blocks)


@dataclass
class AuditReport:
    pairs: int
    violations: int
    max_violation: float
    worst_pair: tuple | None = None

    def as_dict(self):
        d = {"pairs": self.pairs, "violations": self.violations, "max_violation": self.max_violation}
        if self.worst_pair is not None:
            d["worst_pair"] = [list(map(float, p)) for p in self.worst_pair]
        return d


def convexity_audit(net, params: ParamVector, box, pairs: int, rng, tol: float = CONVEXITY_TOL,
                    chunk: int = 4096) -> AuditReport:
    """Midpoint-convexity check on random pairs drawn from `box` (rows of (lo, hi) per input).

    For a PartialConvexNet the first input is time: each pair shares one random t.
    `max_violation` is the largest V(mid) - (V(a)+V(b))/2 observed, positive when violated.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (net.input_dim, 2):
        raise ValueError(f"box must have shape ({net.input_dim}, 2)")
    lo, hi = box[:, 0], box[:, 1]
    count, worst, worst_pair = 0, -np.inf, None
    done = 0
    while done < pairs:
        m = min(chunk, pairs - done)
        a = lo + (hi - lo) * rng.random((m, net.input_dim))
        b = lo + (hi - lo) * rng.random((m, net.input_dim))
        if net.family == "partial_convex":
            b[:, 0] = a[:, 0]
        mid = 0.5 * (a + b)
        va, vb, vm = net(params, a), net(params, b), net(params, mid)
        gap = vm - 0.5 * (va + vb)
        count += int(np.sum(gap > tol))
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, worst_pair = float(gap[i]), (a[i].copy(), b[i].copy())
        done += m
    return AuditReport(int(pairs), count, float(worst) if pairs else 0.0, worst_pair)


def minor_audit(net, params: ParamVector, box, points: int, rng, tol: float = 1e-6,
                state_cols: slice | None = None) -> dict:
    """Sample leading principal minors of the state Hessian; for smooth networks."""
    from .training import leading_minors

    box = np.asarray(box, dtype=np.float64)
    lo, hi = box[:, 0], box[:, 1]
    X = lo + (hi - lo) * rng.random((points, net.input_dim))
    jets = eval_jets(net, params, X, hessian=True)
    cols = state_cols if state_cols is not None else slice(0, net.input_dim)
    H = jets.hess[:, cols, cols]
    minors = leading_minors(H)
    ok = np.all(minors >= -tol, axis=1)
    i = int(np.argmin(minors.min(axis=1))) if points else 0
    return {"points": int(points), "ok_points": int(ok.sum()), "fraction_ok": float(ok.mean()) if points else 1.0,
            "min_minor": float(minors.min()) if points else 0.0,
            "worst_point": X[i].tolist() if points else None}


# ---------------------------------------------------------------------------
# checkpoints


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_checkpoint(path, net, params: ParamVector, extra: dict | None = None):
    spec = net.spec()
    head = dict(spec)
    head["layout"] = [[n, o, list(s)] for n, o, s in params.layout]
    if extra:
        head["extra"] = extra
    text = json.dumps(head, indent=1)
    values = ",\n ".join(_fmt(v) for v in params.values)
    text = text[:-2] + ',\n "values": [\n ' + values + "\n ]\n}\n"
    Path(path).write_text(text)


def load_checkpoint(path):
    data = json.loads(Path(path).read_text())
    net = build_network(data)
    params = ParamVector(np.array(data["values"], dtype=np.float64), [tuple(e) for e in data["layout"]])
    expected = [(n, tuple(s)) for n, s in net.shapes()]
    got = [(n, s) for n, _, s in params.layout]
    if expected != got:
        raise ValueError("checkpoint layout does not match its network spec")
    return net, params, data.get("extra", {})
