"""HJB problems for control-affine systems with quadratic running cost.

Dynamics are xdot = a(x) x + b(x) u with running cost x^T Q x + u^T R u and
unconstrained u, so the minimised Hamiltonian has the closed form

    H*(x, p) = p . a(x) x + x^T Q x - 1/4 p b(x) R^{-1} b(x)^T p^T.

All state-dependent maps take a batch X of shape (B, n).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Scalar2Jet, Var


@dataclass(frozen=True)
class Infinite:
    kind: str = "infinite"


@dataclass(frozen=True)
class Finite:
    T: float
    terminal: Callable  # psi(X) -> (B,)
    kind: str = "finite"


@dataclass
class Residual:
    value: float
    h_term: float
    v_t_term: float


@dataclass
class HJBProblem:
    name: str
    n: int
    m: int
    a: Callable[[np.ndarray], np.ndarray]   # (B, n) -> (B, n, n)
    b: Callable[[np.ndarray], np.ndarray]   # (B, n) -> (B, n, m)
    Q: np.ndarray
    R: np.ndarray
    horizon: object
    box: np.ndarray                          # (n, 2)
    semidefinite_Q: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        self.box = np.asarray(self.box, dtype=np.float64).reshape(self.n, 2)
        if self.Q.shape != (self.n, self.n) or self.R.shape != (self.m, self.m):
            raise ValueError("Q must be n x n and R must be m x m")
        if not (np.array_equal(self.Q, self.Q.T) and np.array_equal(self.R, self.R.T)):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        qmin = np.linalg.eigvalsh(self.Q).min()
        if qmin < 0 or (qmin == 0 and not self.semidefinite_Q):
            raise ValueError("Q must be positive definite (set semidefinite_Q to allow PSD)")
        if np.any(self.box[:, 0] >= self.box[:, 1]):
            raise ValueError("state box needs lo < hi in every dimension")
        self.Rinv = np.linalg.inv(self.R)

    @property
    def finite(self) -> bool:
        return isinstance(self.horizon, Finite)

    @property
    def input_dim(self) -> int:
        return self.n + 1 if self.finite else self.n

    @property
    def input_box(self) -> np.ndarray:
        """Box over the network input: (t, x) for finite horizon, x otherwise."""
        if self.finite:
            return np.vstack([[0.0, self.horizon.T], self.box])
        return self.box.copy()

    # -- pieces of the Hamiltonian -------------------------------------------
    def drift(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.einsum("bij,bj->bi", self.a(X), X)

    def gain(self, X) -> np.ndarray:
        """K(x) = b R^{-1} b^T, shape (B, n, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        bx = self.b(X)
        return np.einsum("bik,kl,bjl->bij", bx, self.Rinv, bx)

    def state_cost(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.einsum("bi,ij,bj->b", X, self.Q, X)


def _split_input(problem: HJBProblem, Z):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return (Z[:, 1:], Z[:, 0]) if problem.finite else (Z, None)


def hamiltonian_terms(problem: HJBProblem, X: np.ndarray, P):
    """Batched H*(x, p). P may be an ndarray or a tape Var of shape (B, n)."""
    f = problem.drift(X)
    K = problem.gain(X)
    q = problem.state_cost(X)
    B, n = f.shape
    if isinstance(P, Var):
        Kp = (P.reshape(B, 1, n) * K).sum(2)
    else:
        P = np.atleast_2d(np.asarray(P, dtype=np.float64))
        Kp = np.einsum("bij,bj->bi", K, P)
    return (P * f).sum(1) + q - 0.25 * (P * Kp).sum(1)


def hamiltonian_min(problem: HJBProblem, x, p) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if x.size != problem.n or p.size != problem.n:
        raise ValueError(f"x and p must have length {problem.n}")
    return float(hamiltonian_terms(problem, x[None], p[None])[0])


def hamiltonian_at(problem: HJBProblem, x, p, u) -> float:
    """Integrand p.(a(x)x + b(x)u) + x^T Q x + u^T R u for a given control."""
    x = np.asarray(x, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    xdot = problem.drift(x[None])[0] + problem.b(x[None])[0] @ u
    return float(p @ xdot + x @ problem.Q @ x + u @ problem.R @ u)


def optimal_control(problem: HJBProblem, x, p) -> np.ndarray:
    """u* = -1/2 R^{-1} b(x)^T p^T."""
    x = np.asarray(x, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if x.size != problem.n or p.size != problem.n:
        raise ValueError(f"x and p must have length {problem.n}")
    bx = problem.b(x[None])[0]
    return -0.5 * problem.Rinv @ bx.T @ p


def residual_batch(problem: HJBProblem, Z, grad):
    """HJB residual at a batch of inputs given input gradients (ndarray or Var).

    Returns (residual, h_term, v_t_term); v_t_term is None for infinite horizon.
    """
    X, _ = _split_input(problem, Z)
    if problem.finite:
        vt = grad[:, 0]
        h = hamiltonian_terms(problem, X, grad[:, 1:])
        return vt + h, h, vt
    h = hamiltonian_terms(problem, X, grad)
    return h, h, None


def residual(problem: HJBProblem, jet: Scalar2Jet, z) -> Residual:
    """Residual of one jet evaluated at input z ((t, x) or x per the horizon)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != problem.input_dim or jet.grad.size != problem.input_dim:
        raise ValueError(
            f"{'finite' if problem.finite else 'infinite'}-horizon problem expects input of length "
            f"{problem.input_dim}; got point {z.size}, gradient {jet.grad.size}"
        )
    r, h, vt = residual_batch(problem, z[None], jet.grad[None])
    vt_val = 0.0 if vt is None else float(vt[0])
    return Residual(float(r[0]), float(h[0]), vt_val)


def terminal_values(problem: HJBProblem, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if problem.finite:
        return np.asarray(problem.horizon.terminal(X), dtype=np.float64)
    return np.zeros(X.shape[0])


# ---------------------------------------------------------------------------
# dynamics catalog (closed-form maps only)


def _rows(*rows):
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _ex1_a(X):
    x1 = X[:, 0]
    one = np.ones_like(x1)
    return _rows((-one, one), (-0.5 * one, -0.5 * one + 0.5 * x1 * x1))


def _ex1_b(X):
    return np.stack([np.zeros_like(X[:, 0]), X[:, 0]], axis=-1)[:, :, None]


def _ex2_c(x1):
    return np.cos(2.0 * x1) + 2.0


def _ex2_a(X):
    x1 = X[:, 0]
    one = np.ones_like(x1)
    c = _ex2_c(x1)
    return _rows((-one, one), (-0.5 * one, -0.5 * (1.0 - c * c)))


def _ex2_b(X):
    return np.stack([np.zeros_like(X[:, 0]), _ex2_c(X[:, 0])], axis=-1)[:, :, None]


def _ex3_a(X):
    x1 = X[:, 0]
    zero, one = np.zeros_like(x1), np.ones_like(x1)
    # -x1 (pi/2 + atan 5x1) - 5 x1^2 / (2 + 50 x1^2), written as row * x1
    a21 = -(0.5 * np.pi + np.arctan(5.0 * x1)) - 5.0 * x1 / (2.0 + 50.0 * x1 * x1)
    return _rows((zero, one), (a21, 4.0 * one))


def _ex3_b(X):
    return np.stack([np.zeros_like(X[:, 0]), 3.0 * np.ones_like(X[:, 0])], axis=-1)[:, :, None]


def _const_maps(A, Bm):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    Bm = np.asarray(Bm, dtype=np.float64).reshape(A.shape[0], -1)

    def a(X):
        return np.broadcast_to(A, (X.shape[0], *A.shape)).copy()

    def b(X):
        return np.broadcast_to(Bm, (X.shape[0], *Bm.shape)).copy()

    return a, b


DYNAMICS = {
    "ex1": lambda **_: (_ex1_a, _ex1_b),
    "ex2": lambda **_: (_ex2_a, _ex2_b),
    "ex3": lambda **_: (_ex3_a, _ex3_b),
    "linear": lambda A, B, **_: _const_maps(A, B),
}


def quadratic_terminal(P):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))

    def psi(X):
        X = np.atleast_2d(X)
        return np.einsum("bi,ij,bj->b", X, P, X)

    return psi


def builtin_problem(pid: str, **kw) -> HJBProblem:
    """Benchmark problems: motivation (scalar LQR, params a, b), ex1..ex4 (ex4 accepts T)."""
    box2 = [[-1.0, 1.0], [-1.0, 1.0]]
    if pid == "motivation":
        a_, b_ = float(kw.get("a", 1.0)), float(kw.get("b", 1.0))
        a, b = _const_maps([[a_]], [[b_]])
        return HJBProblem("motivation", 1, 1, a, b, [[1.0]], [[1.0]], Infinite(),
                          [[-1.0, 1.0]], meta={"a": a_, "b": b_})
    if pid == "ex1":
        return HJBProblem("ex1", 2, 1, _ex1_a, _ex1_b, np.eye(2), [[1.0]], Infinite(), box2)
    if pid == "ex2":
        return HJBProblem("ex2", 2, 1, _ex2_a, _ex2_b, np.eye(2), [[1.0]], Infinite(), box2)
    if pid == "ex3":
        return HJBProblem("ex3", 2, 1, _ex3_a, _ex3_b, np.diag([0.0, 1.0]), [[1.0]], Infinite(), box2,
                          semidefinite_Q=True)
    if pid == "ex4":
        T = float(kw.get("T", 10.0))
        a, b = _const_maps([[1.0]], [[1.0]])
        return HJBProblem("ex4", 1, 1, a, b, [[0.0]], [[1.0]], Finite(T, quadratic_terminal([[1.0]])),
                          [[-1.0, 1.0]], semidefinite_Q=True, meta={"T": T})
    raise ValueError(f"unknown problem id {pid!r}")


BUILTIN_IDS = ("motivation", "ex1", "ex2", "ex3", "ex4")


def problem_from_dict(d: dict) -> HJBProblem:
    """Problem definition: {"id": ..., ...params} or {"custom": {...}}."""
    if "id" in d:
        params = {k: v for k, v in d.items() if k != "id"}
        return builtin_problem(d["id"], **params)
    if "custom" not in d:
        raise ValueError("problem definition needs 'id' or 'custom'")
    c = d["custom"]
    n, m = int(c["n"]), int(c["m"])
    dyn = c["dynamics"]
    dyn_id = dyn if isinstance(dyn, str) else dyn["id"]
    dyn_params = {} if isinstance(dyn, str) else dict(dyn.get("params", {}))
    if dyn_id not in DYNAMICS:
        raise ValueError(f"unknown dynamics {dyn_id!r}; catalog: {sorted(DYNAMICS)}")
    a, b = DYNAMICS[dyn_id](**dyn_params)
    hz = c.get("horizon", {"type": "infinite"})
    if hz.get("type", "infinite") == "finite":
        P = hz.get("terminal", {}).get("P", np.eye(n).tolist())
        horizon = Finite(float(hz["T"]), quadratic_terminal(P))
    else:
        horizon = Infinite()
    return HJBProblem(c.get("name", "custom"), n, m, a, b, c["Q"], c["R"], horizon, c["box"],
                      semidefinite_Q=bool(c.get("semidefinite_Q", False)), meta={"definition": d})


def load_problem(arg) -> HJBProblem:
    """Builtin id, JSON file path, or already-parsed dict."""
    if isinstance(arg, HJBProblem):
        return arg
    if isinstance(arg, dict):
        return problem_from_dict(arg)
    if arg in BUILTIN_IDS:
        return builtin_problem(arg)
    path = Path(arg)
    if not path.exists():
        raise ValueError(f"{arg!r} is neither a builtin problem id nor a readable file")
    return problem_from_dict(json.loads(path.read_text()))
