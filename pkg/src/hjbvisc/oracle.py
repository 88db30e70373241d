"""Reference solutions: closed forms, scalar Riccati root, residual checks, and a
vanishing-viscosity finite-difference solver for 1D finite-horizon problems."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import eval_jets
from .problems import HJBProblem, hamiltonian_terms, residual_batch

RESIDUAL_TOL = 1e-10


@dataclass
class AnalyticSolution:
    id: str
    value: Callable[[np.ndarray], np.ndarray]   # (B, input_dim) -> (B,)
    grad: Callable[[np.ndarray], np.ndarray]    # (B, input_dim) -> (B, input_dim)

    def __call__(self, Z):
        return self.value(np.atleast_2d(np.asarray(Z, dtype=np.float64)))


def riccati_convex(a: float, b: float) -> float:
    """Coefficient k of V = k x^2 for xdot = a x + b u, cost x^2 + u^2 (the convex root)."""
    if b == 0:
        raise ValueError("b = 0: the input map is degenerate")
    s = math.hypot(a, b)
    # (a + s)(s - a) = b^2, so the quotient form avoids cancellation when a < 0
    return (a + s) / (b * b) if a >= 0 else 1.0 / (s - a)


def riccati_rejected(a: float, b: float) -> float:
    """The concave root (a - sqrt(a^2+b^2))/b^2 that also solves the algebraic equation."""
    if b == 0:
        raise ValueError("b = 0: the input map is degenerate")
    s = math.hypot(a, b)
    return (a - s) / (b * b) if a <= 0 else -1.0 / (s + a)


def _ex3_gain(x1):
    return 0.5 * np.pi + np.arctan(5.0 * x1)


def analytic(sid: str, **kw) -> AnalyticSolution:
    if sid == "motivation":
        k = riccati_convex(float(kw.get("a", 1.0)), float(kw.get("b", 1.0)))
        return AnalyticSolution(sid, lambda Z: k * Z[:, 0] ** 2, lambda Z: 2.0 * k * Z)
    if sid in ("ex1", "ex2"):
        return AnalyticSolution(
            sid,
            lambda Z: 0.5 * Z[:, 0] ** 2 + Z[:, 1] ** 2,
            lambda Z: np.stack([Z[:, 0], 2.0 * Z[:, 1]], axis=1),
        )
    if sid == "ex3":
        def v(Z):
            x1, x2 = Z[:, 0], Z[:, 1]
            return x1 * x1 * _ex3_gain(x1) + x2 * x2

        def g(Z):
            x1, x2 = Z[:, 0], Z[:, 1]
            d1 = 2.0 * x1 * _ex3_gain(x1) + 5.0 * x1 * x1 / (1.0 + 25.0 * x1 * x1)
            return np.stack([d1, 2.0 * x2], axis=1)

        return AnalyticSolution(sid, v, g)
    if sid == "ex4":
        T = float(kw.get("T", 10.0))

        def v(Z):
            t, x = Z[:, 0], Z[:, 1]
            return 2.0 * x * x / (1.0 + np.exp(2.0 * t - 2.0 * T))

        def g(Z):
            t, x = Z[:, 0], Z[:, 1]
            s = np.exp(2.0 * t - 2.0 * T)
            return np.stack([-4.0 * s * x * x / (1.0 + s) ** 2, 4.0 * x / (1.0 + s)], axis=1)

        return AnalyticSolution(sid, v, g)
    raise ValueError(f"no analytic solution for {sid!r}")


def analytic_for(problem: HJBProblem) -> AnalyticSolution | None:
    """Closed form paired with a builtin problem, or None for custom problems."""
    if problem.name == "motivation":
        return analytic("motivation", **problem.meta)
    if problem.name == "ex4":
        return analytic("ex4", **problem.meta)
    if problem.name in ("ex1", "ex2", "ex3"):
        return analytic(problem.name)
    return None


@dataclass
class ResidualReport:
    max_abs: float
    argmax: list
    points: int


def probe_grid(problem: HJBProblem, counts) -> np.ndarray:
    """Tensor grid over the network input box; `counts` has one entry per input coordinate."""
    box = problem.input_box
    counts = list(counts)
    if len(counts) != box.shape[0]:
        raise ValueError(f"grid needs {box.shape[0]} counts")
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def residual_check(problem: HJBProblem, solution, Z) -> ResidualReport:
    """Max |HJB residual| over probe points Z.

    `solution` is an AnalyticSolution (closed-form gradient) or a (net, params) pair.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    box = problem.input_box
    if np.any(Z < box[:, 0] - 1e-12) or np.any(Z > box[:, 1] + 1e-12):
        raise ValueError("probe grid leaves the problem box")
    if isinstance(solution, AnalyticSolution):
        G = solution.grad(Z)
    else:
        net, params = solution
        G = eval_jets(net, params, Z).grad
    r, _, _ = residual_batch(problem, Z, G)
    r = np.abs(np.asarray(r))
    i = int(np.argmax(r))
    return ResidualReport(float(r[i]), Z[i].tolist(), int(Z.shape[0]))


def verify_oracle(problem: HJBProblem, counts=None) -> tuple[str, ResidualReport]:
    """'verified' when the closed form cancels the HJB to RESIDUAL_TOL on a probe grid."""
    sol = analytic_for(problem)
    if sol is None:
        raise ValueError(f"no closed form registered for {problem.name!r}")
    if counts is None:
        counts = [100] * problem.input_dim if problem.input_dim > 1 else [10000]
    rep = residual_check(problem, sol, probe_grid(problem, counts))
    return ("verified" if rep.max_abs < RESIDUAL_TOL else "unverified"), rep


# ---------------------------------------------------------------------------
# vanishing viscosity


class StabilityError(ValueError):
    def __init__(self, msg: str, required_nt: int):
        super().__init__(msg)
        self.required_nt = required_nt


@dataclass
class GridSolution:
    t: np.ndarray
    x: np.ndarray
    V: np.ndarray        # (len(t), len(x))
    eps: float
    boundary: str

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "V_eps"])
            for i, ti in enumerate(self.t):
                for j, xj in enumerate(self.x):
                    w.writerow([format(ti, ".17g"), format(xj, ".17g"), format(self.V[i, j], ".17g")])


def _stable_dt(problem, X, dx, eps, V):
    """Largest admissible explicit step for the current slice."""
    f = problem.drift(X[:, None])[:, 0]
    K = problem.gain(X[:, None])[:, 0, 0]
    p = np.gradient(V, dx)
    hp = float(np.max(np.abs(f - 0.5 * K * p)))
    bounds = [0.4 * dx * dx / eps]
    if hp > 0:
        bounds += [0.4 * dx / hp, 0.8 * eps / (hp * hp)]
    return min(bounds), hp


def vanishing_viscosity_fd(problem: HJBProblem, eps: float, nx: int = 201, nt: int | None = None,
                           t_stop: float = 0.0, save_every: int | None = None) -> GridSolution:
    """Explicit central-difference solve of V_t + H*(x, V_x) + eps V_xx = 0 backward from t = T.

    Boundary columns follow the closed form when one is registered, otherwise
    they are extrapolated linearly (one-sided V_x).  When `nt` is None the
    smallest step count meeting the stability bounds is used; the bounds are
    re-estimated along the solve and a too-small `nt` raises StabilityError.
    """
    if problem.n != 1 or not problem.finite:
        raise ValueError("the finite-difference oracle handles 1D finite-horizon problems only")
    if eps <= 0:
        raise ValueError("eps must be positive")
    T = problem.horizon.T
    if not 0.0 <= t_stop < T:
        raise ValueError("need 0 <= t_stop < T")
    lo, hi = problem.box[0]
    X = np.linspace(lo, hi, nx)
    dx = X[1] - X[0]
    V = problem.horizon.terminal(X[:, None]).astype(np.float64)
    span = T - t_stop

    # slopes grow backward in time; estimate the worst slice with a coarse probe run
    sol = analytic_for(problem)
    if sol is not None:
        ts = np.linspace(t_stop, T, 64)
        dt_req = min(_stable_dt(problem, X, dx, eps, sol(np.column_stack([np.full(nx, ti), X])))[0] for ti in ts)
    else:
        dt_req = _stable_dt(problem, X, dx, eps, V)[0]
    required = int(math.ceil(span / dt_req))
    if nt is None:
        nt = required
    elif nt < required:
        raise StabilityError(f"explicit scheme unstable: need nt >= {required} (got {nt})", required)
    dt = span / nt

    f = problem.drift(X[:, None])[:, 0]
    K = problem.gain(X[:, None])[:, 0, 0]
    q = problem.state_cost(X[:, None])
    every = save_every or max(1, nt // 200)
    times, slices = [T], [V.copy()]
    boundary = "analytic" if sol is not None else "extrapolated"
    for k in range(1, nt + 1):
        p = (V[2:] - V[:-2]) / (2 * dx)
        vxx = (V[2:] - 2 * V[1:-1] + V[:-2]) / (dx * dx)
        H = p * f[1:-1] + q[1:-1] - 0.25 * K[1:-1] * p * p
        Vn = V.copy()
        Vn[1:-1] = V[1:-1] + dt * (H + eps * vxx)
        t_new = T - k * dt
        if k == nt:
            t_new = t_stop
        if sol is not None:
            edge = sol(np.array([[t_new, X[0]], [t_new, X[-1]]]))
            Vn[0], Vn[-1] = edge[0], edge[1]
        else:
            Vn[0] = 2 * Vn[1] - Vn[2]
            Vn[-1] = 2 * Vn[-2] - Vn[-3]
        V = Vn
        if not np.all(np.isfinite(V)):
            raise FloatingPointError(f"finite-difference solve diverged at t={t_new:.6g}")
        if k % every == 0 or k == nt:
            times.append(t_new)
            slices.append(V.copy())
    order = np.argsort(times)
    return GridSolution(np.asarray(times)[order], X, np.asarray(slices)[order], float(eps), boundary)


def grid_error(problem: HJBProblem, grid: GridSolution, interior: bool = True) -> tuple[float, float]:
    """(max abs error, max |V*|) of a grid solution against the closed form."""
    sol = analytic_for(problem)
    if sol is None:
        raise ValueError("no closed form to compare against")
    tt, xx = np.meshgrid(grid.t, grid.x, indexing="ij")
    ref = sol(np.column_stack([tt.ravel(), xx.ravel()])).reshape(tt.shape)
    err = np.abs(grid.V - ref)
    if interior:
        err = err[:, 1:-1]
    return float(err.max()), float(np.abs(ref).max())


def hamiltonian(problem: HJBProblem, X, P) -> np.ndarray:
    return np.asarray(hamiltonian_terms(problem, np.atleast_2d(X), np.atleast_2d(P)))
