"""Command-line front end: train, eval, audit and oracle subcommands."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .networks import build_network, convexity_audit, load_checkpoint, minor_audit, save_checkpoint
from .oracle import StabilityError, analytic_for, grid_error, vanishing_viscosity_fd, verify_oracle
from .problems import BUILTIN_IDS, HJBProblem, load_problem, residual_batch
from .training import (StripSchedule, TrainConfig, check_pairing, strip_train, stream, train,
                       write_history_csv)
from .autodiff import eval_jets

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2
AUDIT_PAIRS = 10_000
RUN_KEYS = {"problem", "method", "network", "train", "strip", "output_dir", "seed"}


class ConfigError(ValueError):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run configuration


def _problem_source(ref, base: Path | None):
    """A problem reference as stored in configs: builtin id, dict, or path (relative to the config)."""
    if isinstance(ref, dict) or ref in BUILTIN_IDS:
        return ref
    path = Path(ref)
    if base is not None and not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"problem file {str(path)!r} does not exist")
    return json.loads(path.read_text())


def _problem_arg(arg: str):
    """Problem given on the command line; a run manifest stands in for its recorded problem."""
    if arg in BUILTIN_IDS:
        return load_problem(arg)
    path = Path(arg)
    if not path.exists():
        raise ConfigError(f"{arg!r} is neither a builtin problem id nor a readable file")
    data = json.loads(path.read_text())
    if "config" in data and "problem" in data["config"]:
        data = data["config"]["problem"]
    return load_problem(data)


def network_for(problem: HJBProblem, spec: dict):
    spec = dict(spec)
    spec.setdefault("input_dim", problem.input_dim)
    if spec.get("family") == "partial_convex" and problem.finite:
        spec.setdefault("t_range", [0.0, problem.horizon.T])
    net = build_network(spec)
    if net.input_dim != problem.input_dim:
        raise ConfigError(f"network input dim {net.input_dim} does not match problem input dim {problem.input_dim}")
    return net


def parse_run_config(raw: dict, base: Path | None = None):
    """Validate a run config; returns (problem, net, TrainConfig, StripSchedule | None, outdir, echo)."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    for key in ("problem", "network"):
        if key not in raw:
            raise ConfigError(f"run config is missing {key!r}")
    try:
        source = _problem_source(raw["problem"], base)
        problem = load_problem(source)
        seed = int(raw.get("seed", 0))
        tdict = dict(raw.get("train", {}))
        for k in ("method", "seed"):
            if k in tdict:
                raise ConfigError(f"set {k!r} at the top level of the run config")
        config = TrainConfig.from_dict({**tdict, "method": raw.get("method", "convex"), "seed": seed})
        net = network_for(problem, raw["network"])
        check_pairing(config.method, net)
        strip = raw.get("strip")
        schedule = None
        if problem.finite:
            schedule = StripSchedule.default(problem.horizon.T) if strip in (None, True) else StripSchedule(**strip)
        elif strip not in (None, False):
            raise ConfigError("strip schedules apply to finite-horizon problems only")
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(raw.get("output_dir", "run"))
    if base is not None and not out.is_absolute():
        out = Path(os.path.normpath(base / out))
    echo = {"problem": source, "method": config.method, "network": net.spec(),
            "train": {k: v for k, v in asdict(config).items() if k not in ("method", "seed")},
            "strip": None if schedule is None else asdict(schedule), "seed": seed}
    return problem, net, config, schedule, out, echo


def cmd_train(args) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc}") from exc
    problem, net, config, schedule, out, echo = parse_run_config(raw, path.parent)
    out.mkdir(parents=True, exist_ok=True)
    if schedule is not None:
        result = strip_train(problem, net, config, schedule)
    else:
        result = train(problem, net, config)
    save_checkpoint(out / "checkpoint.json", net, result.params,
                    {"problem": echo["problem"], "method": config.method, "seed": config.seed})
    write_history_csv(out / "history.csv", result.history)
    _dump(out / "manifest.json", {
        "config": echo, "seed": config.seed, "status": result.status, "converged": result.converged,
        "epochs": len(result.history), "strips": [asdict(s) for s in result.strips],
        "checkpoint": "checkpoint.json", "history": "history.csv"})
    print(f"{result.status} after {len(result.history)} epochs; artifacts in {out}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# evaluation


def _parse_grid(text: str | None, dim: int) -> list[int]:
    if text is None:
        return [51] * dim
    try:
        counts = [int(c) for c in text.lower().split("x")]
    except ValueError:
        raise ConfigError(f"bad grid spec {text!r}; expected e.g. 51x51") from None
    if len(counts) != dim or min(counts) < 2:
        raise ConfigError(f"grid spec {text!r} needs {dim} counts, each >= 2")
    return counts


def _parse_bounds(text: str | None, box: np.ndarray) -> np.ndarray:
    if text is None:
        return box.copy()
    try:
        rows = [[float(v) for v in part.split(":")] for part in text.split(",")]
        bounds = np.array(rows, dtype=np.float64)
    except ValueError:
        raise ConfigError(f"bad bounds {text!r}; expected lo:hi per input, comma separated") from None
    if bounds.shape != box.shape or np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ConfigError(f"bounds need {box.shape[0]} increasing lo:hi pairs")
    if np.any(bounds[:, 0] < box[:, 0]) or np.any(bounds[:, 1] > box[:, 1]):
        raise ConfigError(f"grid bounds leave the problem box {box.tolist()}")
    return bounds


def _load_pair(ckpt: str, problem_arg: str):
    try:
        net, params, extra = load_checkpoint(ckpt)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {ckpt!r}: {exc}") from exc
    problem = _problem_arg(problem_arg)
    if net.input_dim != problem.input_dim:
        raise ConfigError(f"checkpoint input dim {net.input_dim} does not match problem "
                          f"{problem.name!r} (input dim {problem.input_dim})")
    return net, params, problem


def _input_names(problem: HJBProblem) -> list[str]:
    xs = [f"x{i + 1}" for i in range(problem.n)] if problem.n > 1 else ["x"]
    return (["t"] if problem.finite else []) + xs


def evaluate(net, params, problem: HJBProblem, counts, bounds, seed: int = 0):
    """Surface rows and metrics over a tensor grid."""
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Z = np.stack([m.ravel() for m in mesh], axis=1)
    jets = eval_jets(net, params, Z)
    r, _, _ = residual_batch(problem, Z, jets.grad)
    r = np.asarray(r)
    sol = analytic_for(problem)
    truth = sol(Z) if sol is not None else None
    metrics = {"points": int(Z.shape[0]), "max_abs_residual": float(np.max(np.abs(r)))}
    if truth is not None:
        err = np.abs(jets.value - truth)
        metrics["max_abs_err"] = float(err.max())
        metrics["rel_Linf_err"] = float(err.max() / np.abs(truth).max())
    else:
        metrics["max_abs_err"] = metrics["rel_Linf_err"] = None
    rep = convexity_audit(net, params, problem.input_box, AUDIT_PAIRS, stream(seed, "audit"))
    metrics["convexity_violations"] = rep.violations
    metrics["max_convexity_gap"] = rep.max_violation
    return Z, jets.value, truth, r, metrics


def write_surface_csv(path, problem, Z, V, truth, r):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_input_names(problem) + ["V_nn"] + (["V_true"] if truth is not None else []) + ["residual"])
        for i in range(Z.shape[0]):
            row = [_fmt(v) for v in Z[i]] + [_fmt(V[i])]
            if truth is not None:
                row.append(_fmt(truth[i]))
            row.append(_fmt(r[i]))
            w.writerow(row)


def cmd_eval(args) -> int:
    net, params, problem = _load_pair(args.checkpoint, args.problem)
    counts = _parse_grid(args.grid, problem.input_dim)
    bounds = _parse_bounds(args.bounds, problem.input_box)
    Z, V, truth, r, metrics = evaluate(net, params, problem, counts, bounds, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_surface_csv(out / "surface.csv", problem, Z, V, truth, r)
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_audit(args) -> int:
    net, params, problem = _load_pair(args.checkpoint, args.problem)
    rng = stream(args.seed, "audit")
    if net.is_convex_family:
        report = {"kind": "midpoint_convexity",
                  **convexity_audit(net, params, problem.input_box, args.pairs, rng).as_dict()}
    else:
        cols = slice(1, None) if problem.finite else None
        report = {"kind": "hessian_minors", **minor_audit(net, params, problem.input_box, args.pairs, rng,
                                                           state_cols=cols)}
        report["violations"] = report["points"] - report["ok_points"]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "audit.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    problem = _problem_arg(args.problem)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.fd_eps is None:
        try:
            status, rep = verify_oracle(problem)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        report = {"problem": problem.name, "status": status, "max_abs_residual": rep.max_abs,
                  "argmax": rep.argmax, "points": rep.points}
    else:
        try:
            grid = vanishing_viscosity_fd(problem, args.fd_eps, nx=args.nx, t_stop=args.t_stop)
        except StabilityError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        report = {"problem": problem.name, "eps": args.fd_eps, "nx": args.nx, "t_stop": args.t_stop,
                  "boundary": grid.boundary}
        if analytic_for(problem) is not None:
            err, scale = grid_error(problem, grid)
            report.update(max_abs_err=err, max_abs_V=scale, rel_err=err / scale)
        if out:
            grid.to_csv(out / "fd_solution.csv")
    if out:
        _dump(out / "oracle.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with config errors; 2 means "trained but not converged"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hjbvisc", description="Neural viscosity solutions of HJB equations.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a value network from a JSON run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a grid")
    p.add_argument("checkpoint")
    p.add_argument("problem", help="builtin id, problem JSON, or run manifest")
    p.add_argument("--grid", help="points per input, e.g. 51x51 (default 51 each)")
    p.add_argument("--bounds", help="sub-box as lo:hi per input, comma separated (write --bounds=-1:0,... for negative lows)")
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=0, help="seed of the audit stream")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="convexity audit of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("problem")
    p.add_argument("--pairs", type=int, default=AUDIT_PAIRS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("oracle", help="check a closed form or run the finite-difference oracle")
    p.add_argument("problem")
    p.add_argument("--fd-eps", type=float, dest="fd_eps")
    p.add_argument("--nx", type=int, default=201)
    p.add_argument("--t-stop", type=float, default=0.0, dest="t_stop")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
