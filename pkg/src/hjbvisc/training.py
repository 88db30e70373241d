"""Losses, Adam with positivity projection, plain training and strip training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Blocks, NonFiniteError, ParamVector, Var, as_var, check_finite, loss_param_grad
from .networks import project_positive
from .problems import HJBProblem, residual_batch, terminal_values

log = logging.getLogger(__name__)

STREAMS = {"init": 0, "sampling": 1, "audit": 2}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name]]))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    method: str = "convex"          # "convex" (Method 2) or "penalty" (Method 1)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 20000         # per stage / per lambda phase
    n_inner: int = 1024
    n_boundary: int = 128
    n_hessian: int = 256
    lam: float = 1.0                # boundary weight for plain training
    lam_large: float = 100.0        # boundary / known-region weight in the first strip phase
    l_b: float = 1e-4
    loss_th1: float = 1e-3
    loss_th2: float = 1e-4
    nonneg_weight: float = 0.0      # optional max(0, -V)^2 penalty, infinite horizon
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("convex", "penalty"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lam < 1 or self.lam_large < 1:
            raise ValueError("lambda weights must be >= 1")
        if self.loss_th2 > self.loss_th1:
            raise ValueError("loss_th2 must not exceed loss_th1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StripSchedule:
    t_ini: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("strip width must be positive")

    @classmethod
    def default(cls, T: float) -> "StripSchedule":
        return cls(t_ini=T - T / 20, dt=T / 20)

    def strips(self) -> list[tuple[float, float]]:
        """(t_strip, t_stripold) for every strip after the initial one; last t_strip is exactly 0."""
        out, old = [], float(self.t_ini)
        count = self.count()
        for k in range(count):
            new = old - self.dt
            if k == count - 1 or new <= 0:
                new = 0.0
            out.append((new, old))
            old = new
        return out

    def count(self) -> int:
        if self.t_ini <= 0:
            return 0
        return int(math.ceil(self.t_ini / self.dt - 1e-9))


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class SampleBatch:
    inner: np.ndarray
    boundary: np.ndarray
    boundary_values: np.ndarray
    hessian: np.ndarray
    known: np.ndarray | None = None

    @classmethod
    def empty(cls, dim: int) -> "SampleBatch":
        z = np.zeros((0, dim))
        return cls(z, z, np.zeros(0), z, z)


def _uniform_points(rng, lo, hi, count):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lo + (hi - lo) * rng.random((count, lo.size))


def sample_batch(problem: HJBProblem, config: TrainConfig, rng, t_range=None, known_range=None,
                 with_hessian: bool = False) -> SampleBatch:
    """Uniform collocation points in the current region.

    Finite horizon: inner points in t_range x box, boundary points on t = T
    carrying psi, optional known-region points in known_range x box.
    Infinite horizon: the boundary is the single anchor V(0) = 0.
    """
    box = problem.box
    if problem.finite:
        T = problem.horizon.T
        t0, t1 = (0.0, T) if t_range is None else t_range
        inner = _uniform_points(rng, [t0, *box[:, 0]], [t1, *box[:, 1]], config.n_inner)
        xb = _uniform_points(rng, box[:, 0], box[:, 1], config.n_boundary)
        boundary = np.column_stack([np.full(config.n_boundary, T), xb])
        bvals = terminal_values(problem, xb)
        hess = inner[: config.n_hessian].copy() if with_hessian else np.zeros((0, problem.input_dim))
        if with_hessian and config.n_hessian > config.n_inner:
            hess = _uniform_points(rng, [t0, *box[:, 0]], [t1, *box[:, 1]], config.n_hessian)
        known = np.zeros((0, problem.input_dim))
        if known_range is not None:
            k0, k1 = known_range
            known = _uniform_points(rng, [k0, *box[:, 0]], [k1, *box[:, 1]], config.n_inner)
        return SampleBatch(inner, boundary, bvals, hess, known)
    inner = _uniform_points(rng, box[:, 0], box[:, 1], config.n_inner)
    boundary = np.zeros((1, problem.n))
    hess = np.zeros((0, problem.n))
    if with_hessian:
        hess = _uniform_points(rng, box[:, 0], box[:, 1], config.n_hessian)
    return SampleBatch(inner, boundary, np.zeros(1), hess, None)


def _msq(v):
    return (v * v).mean()


def _lu_det(A: np.ndarray) -> float:
    """Determinant by LU with partial pivoting."""
    U = np.array(A, dtype=np.float64)
    n = U.shape[0]
    det = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(U[k:, k])))
        if U[p, k] == 0.0:
            return 0.0
        if p != k:
            U[[k, p]] = U[[p, k]]
            det = -det
        det *= U[k, k]
        U[k + 1:, k:] -= np.outer(U[k + 1:, k] / U[k, k], U[k, k:])
    return float(det)


def principal_minors(H) -> np.ndarray:
    """Leading principal minors det(H[:k, :k]), k = 1..n."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("H must be a square matrix")
    if H.shape[0] > 8:
        raise ValueError("principal_minors supports n <= 8")
    return np.array([_lu_det(H[:k, :k]) for k in range(1, H.shape[0] + 1)])


def leading_minors(H: np.ndarray) -> np.ndarray:
    """Batched leading minors of (B, n, n) arrays -> (B, n)."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[-1]
    return np.stack([np.linalg.det(H[..., :k, :k]) for k in range(1, n + 1)], axis=-1)


def _tape_minors(H: Var) -> list[Var]:
    """Differentiable leading minors of a batched Hessian (B, n, n) by cofactor expansion."""
    n = H.shape[-1]
    entries = {(i, j): H[:, i, j] for i in range(n) for j in range(n)}
    memo: dict = {}

    def det(k: int, row: int, cols: tuple):
        # determinant of rows row..k-1 restricted to `cols`
        if row == k:
            return None
        key = (row, cols)
        if key in memo:
            return memo[key]
        acc = None
        for pos, c in enumerate(cols):
            rest = det(k, row + 1, cols[:pos] + cols[pos + 1:])
            term = entries[(row, c)] if rest is None else entries[(row, c)] * rest
            if pos % 2:
                term = -term
            acc = term if acc is None else acc + term
        memo[key] = acc
        return acc

    out = []
    for k in range(1, n + 1):
        memo.clear()
        out.append(det(k, 0, tuple(range(k))))
    return out


@dataclass
class LossParts:
    total: object
    residual: object
    boundary: object
    penalty: object

    def floats(self) -> "LossParts":
        f = lambda v: float(v.data) if isinstance(v, Var) else float(v)
        return LossParts(f(self.total), f(self.residual), f(self.boundary), f(self.penalty))


def _residual_msq(net, blocks, problem, Z, what):
    if Z.shape[0] == 0:
        return 0.0
    jet = net.jet(blocks, Z, order=1)
    r, _, _ = residual_batch(problem, Z, jet.grad)
    check_finite(r, Z, f"{what} residual")
    return _msq(r)


def _boundary_msq(net, blocks, batch, what="boundary value"):
    if batch.boundary.shape[0] == 0:
        return 0.0
    v = net.jet(blocks, batch.boundary, order=0).value
    check_finite(v, batch.boundary, what)
    return _msq(v - batch.boundary_values)


def method1_parts(net, blocks, problem: HJBProblem, batch: SampleBatch, lam: float = 1.0,
                  nonneg_weight: float = 0.0) -> LossParts:
    residual = _residual_msq(net, blocks, problem, batch.inner, "inner")
    boundary = _boundary_msq(net, blocks, batch)
    if lam != 1.0:
        boundary = boundary * lam
    penalty = 0.0
    if batch.hessian.shape[0]:
        if not net.is_c2:
            raise ValueError("the Hessian penalty needs a twice-differentiable network")
        jet = net.jet(blocks, batch.hessian, order=2)
        H = jet.hess
        if H is None:
            penalty = 0.0
        else:
            if problem.finite:
                H = H[:, 1:, 1:]
            check_finite(H, batch.hessian, "Hessian")
            terms = [m.clip_max0() for m in _tape_minors(as_var(H))]
            acc = terms[0] * terms[0]
            for t in terms[1:]:
                acc = acc + t * t
            penalty = acc.mean()
    if nonneg_weight and not problem.finite and batch.inner.shape[0]:
        neg = (-net.jet(blocks, batch.inner, order=0).value).clip_min0()
        penalty = penalty + nonneg_weight * _msq(neg)
    return LossParts(residual + boundary + penalty, residual, boundary, penalty)


def method2_parts(net, blocks, problem: HJBProblem, batch: SampleBatch, lam: float = 1.0,
                  nonneg_weight: float = 0.0) -> LossParts:
    """lam * (boundary msq + known-region residual msq) + new-region residual msq."""
    known = batch.known if batch.known is not None else np.zeros((0, batch.inner.shape[1]))
    ni, nk, nb = batch.inner.shape[0], known.shape[0], batch.boundary.shape[0]
    if ni + nk + nb == 0:
        return LossParts(0.0, 0.0, 0.0, 0.0)
    # one pass over all points; slices pick out each term
    Z = np.concatenate([batch.inner, known, batch.boundary], axis=0)
    jet = net.jet(blocks, Z, order=1)
    residual, weighted = 0.0, 0.0
    if ni + nk:
        r, _, _ = residual_batch(problem, Z[: ni + nk], jet.grad[: ni + nk])
        check_finite(r, Z[: ni + nk], "residual")
        if ni:
            residual = _msq(r[:ni])
        if nk:
            weighted = _msq(r[ni:])
    if nb:
        v = jet.value[ni + nk:]
        check_finite(v, batch.boundary, "boundary value")
        weighted = weighted + _msq(v - batch.boundary_values)
    boundary = weighted * lam if isinstance(weighted, Var) else lam * weighted
    penalty = 0.0
    if nonneg_weight and not problem.finite and ni:
        penalty = nonneg_weight * _msq((-jet.value[:ni]).clip_min0())
    return LossParts(residual + boundary + penalty, residual, boundary, penalty)


def loss_method1(net, params: ParamVector, problem, batch, lam: float = 1.0) -> float:
    parts = method1_parts(net, Blocks(params), problem, batch, lam)
    total = parts.floats().total
    if not np.isfinite(total):
        raise NonFiniteError("loss")
    return total


def loss_method2(net, params: ParamVector, problem, batch, lam: float) -> float:
    parts = method2_parts(net, Blocks(params), problem, batch, lam)
    total = parts.floats().total
    if not np.isfinite(total):
        raise NonFiniteError("loss")
    return total


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params: ParamVector, grad, config: TrainConfig, net=None):
    """One bias-corrected Adam update, then projection onto the positivity constraints."""
    grad = np.asarray(grad, dtype=np.float64)
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    new = params.with_values(params.values - config.lr * mhat / (np.sqrt(vhat) + config.eps_adam))
    if net is not None and net.positive_blocks:
        new = project_positive(net, new)
    return AdamState(m, v, step), new


# ---------------------------------------------------------------------------
# training loops


HISTORY_COLUMNS = ("stage", "strip_index", "epoch", "loss_total", "loss_residual", "loss_boundary",
                   "loss_penalty", "lambda")


@dataclass
class HistoryRow:
    stage: str
    strip_index: int
    epoch: int
    loss_total: float
    loss_residual: float
    loss_boundary: float
    loss_penalty: float
    lam: float


@dataclass
class StripInfo:
    index: int
    t_lo: float
    t_known: float      # lower edge of the already-trained region (T for the initial strip)
    epochs_large: int
    epochs_unit: int
    reached_th1: bool
    converged: bool


@dataclass
class TrainResult:
    params: ParamVector
    history: list
    converged: bool
    status: str
    strips: list = field(default_factory=list)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.stage, r.strip_index, r.epoch] + [format(v, ".17g") for v in
                       (r.loss_total, r.loss_residual, r.loss_boundary, r.loss_penalty, r.lam)])


def check_pairing(method: str, net):
    if method == "penalty":
        if not net.is_c2:
            raise ValueError(f"method 'penalty' needs a twice-differentiable network; "
                             f"{net.family} with {net.activation} is not")
    elif method == "convex":
        if not net.is_convex_family:
            raise ValueError(f"method 'convex' needs a convex-family network, got {net.family}")
    else:
        raise ValueError(f"unknown method {method!r}")


def _parts_fn(config: TrainConfig):
    return method1_parts if config.method == "penalty" else method2_parts


class _Runner:
    """Shared epoch loop: sample, evaluate loss and gradient, log, step."""

    def __init__(self, problem, net, config, params):
        self.problem, self.net, self.config = problem, net, config
        self.params = params
        self.state = AdamState.zeros(len(params))
        self.rng = stream(config.seed, "sampling")
        self.history: list[HistoryRow] = []
        self.parts = _parts_fn(config)

    def run(self, stage, strip_index, lam, threshold, sampler, loss=None, extra_exit=None) -> tuple[bool, int]:
        """Train until loss <= threshold (and extra_exit) or the epoch cap; returns (reached, epochs)."""
        # fresh moments per phase: a jump in lambda would otherwise meet a stale second-moment estimate
        self.state = AdamState.zeros(len(self.params))
        for epoch in range(self.config.max_epochs):
            batch = sampler(self.rng)
            if loss is None:
                fn = lambda bl: (lambda p: (p.total, p))(
                    self.parts(self.net, bl, self.problem, batch, lam, self.config.nonneg_weight))
            else:
                fn = lambda bl: loss(bl, batch)
            lg = loss_param_grad(fn, self.params)
            parts = lg.aux.floats() if lg.aux else LossParts(lg.loss, 0.0, lg.loss, 0.0)
            self.history.append(HistoryRow(stage, strip_index, epoch, parts.total, parts.residual,
                                           parts.boundary, parts.penalty, float(lam)))
            if lg.loss <= threshold and (extra_exit is None or extra_exit(self.params)):
                log.info("%s[%d] lam=%g reached %.3g after %d epochs", stage, strip_index, lam, lg.loss, epoch)
                return True, epoch
            if epoch % 500 == 0:
                log.debug("%s[%d] epoch %d loss %.4g", stage, strip_index, epoch, lg.loss)
            self.state, self.params = adam_step(self.state, self.params, lg.grad, self.config, self.net)
        log.info("%s[%d] lam=%g hit the epoch cap of %d", stage, strip_index, lam, self.config.max_epochs)
        return False, self.config.max_epochs


def train(problem: HJBProblem, net, config: TrainConfig, params: ParamVector | None = None) -> TrainResult:
    """Plain (strip-free) training until loss <= loss_th2 or the epoch cap."""
    check_pairing(config.method, net)
    if net.input_dim != problem.input_dim:
        raise ValueError(f"network input dim {net.input_dim} != problem input dim {problem.input_dim}")
    if params is None:
        params = net.init_params(stream(config.seed, "init"))
    if net.positive_blocks:
        params = project_positive(net, params)
    runner = _Runner(problem, net, config, params)
    hess = config.method == "penalty"
    ok, _ = runner.run("train", 0, config.lam, config.loss_th2,
                       lambda rng: sample_batch(problem, config, rng, with_hessian=hess))
    status = "converged" if ok else "not_converged"
    return TrainResult(runner.params, runner.history, ok, status)


def terminal_grid_msq(net, params, problem, count: int = 101) -> float:
    """Mean-square |NN(T, x) - psi(x)| on a regular x-grid (1D) or tensor grid."""
    box = problem.box
    axes = [np.linspace(lo, hi, count) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    Z = np.column_stack([np.full(X.shape[0], problem.horizon.T), X])
    err = net(params, Z) - terminal_values(problem, X)
    return float(np.mean(err * err))


def strip_train(problem: HJBProblem, net, config: TrainConfig, schedule: StripSchedule | None = None,
                params: ParamVector | None = None) -> TrainResult:
    """Curriculum over time: fit the terminal data, train an initial strip, then grow backward to t = 0."""
    if not problem.finite:
        raise ValueError("strip training needs a finite-horizon problem")
    check_pairing(config.method, net)
    if net.input_dim != problem.input_dim:
        raise ValueError(f"network input dim {net.input_dim} != problem input dim {problem.input_dim}")
    T = problem.horizon.T
    schedule = schedule or StripSchedule.default(T)
    if not 0 < schedule.t_ini < T:
        raise ValueError("need 0 < t_ini < T")
    if params is None:
        params = net.init_params(stream(config.seed, "init"))
    if net.positive_blocks:
        params = project_positive(net, params)
    runner = _Runner(problem, net, config, params)
    box = problem.box
    hess = config.method == "penalty"

    # stage 1: V(t, x) = psi(x) over the whole region
    def fit_sampler(rng):
        Z = _uniform_points(rng, [0.0, *box[:, 0]], [T, *box[:, 1]], config.n_inner)
        return Z

    def fit_loss(bl, Z):
        v = net.jet(bl, Z, order=0).value
        check_finite(v, Z, "boundary-fit value")
        err = _msq(v - terminal_values(problem, Z[:, 1:]))
        return err, LossParts(err, 0.0, err, 0.0)

    ok1, _ = runner.run("boundary", 0, 1.0, config.l_b, fit_sampler, loss=fit_loss,
                        extra_exit=lambda p: terminal_grid_msq(net, p, problem) <= config.l_b)
    strips: list[StripInfo] = []
    failed = [] if ok1 else ["boundary fit"]

    def two_phase(index, t_lo, t_known):
        known = None if t_known >= T else (t_known, T)
        inner = (t_lo, t_known if known is not None else T)
        sampler = lambda rng: sample_batch(problem, config, rng, t_range=inner, known_range=known,
                                           with_hessian=hess)
        stage = "initial" if index == 0 else "strip"
        r1, e1 = runner.run(stage, index, config.lam_large, config.loss_th1, sampler)
        r2, e2 = runner.run(stage, index, 1.0, config.loss_th2, sampler)
        info = StripInfo(index, t_lo, t_known, e1 if not r1 else e1 + 1, e2 if not r2 else e2 + 1, r1, r2)
        strips.append(info)
        if not r2:
            failed.append(f"strip {index} [{t_lo:.6g}, {T:.6g}]")

    two_phase(0, schedule.t_ini, T)
    for k, (t_strip, t_old) in enumerate(schedule.strips(), start=1):
        two_phase(k, t_strip, t_old)

    ok = not failed
    status = "converged" if ok else "not_converged: " + "; ".join(failed)
    return TrainResult(runner.params, runner.history, ok, status, strips)


def history_dicts(history) -> list[dict]:
    return [asdict(r) for r in history]
