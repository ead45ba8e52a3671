"""Command-line front end: ``covsddp run`` and ``covsddp validate``.

``run`` writes ``nominal.csv``, ``gains.csv``, ``samples.csv``,
``moments.csv``, ``trace.csv`` and ``result.json`` into ``--out-dir``.
Exit status: 0 converged, 2 residuals above tolerance, 1 hard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigValidationError, RunConfig, load_config, validate_dict
from .covcon import CovControlResult, _batch_seed, solve_covariance_control
from .errors import ConfigError, CovSDDPError
from .rollout import propagate_moments_gaussian, sample_closed_loop
from .systems import PRESETS, ProblemPreset

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("covsddp")


class _Parser(argparse.ArgumentParser):
    # usage errors are hard errors; exit 2 is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="covsddp", description="Covariance control of nonlinear SDEs with SDDP.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def source(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--preset", choices=sorted(PRESETS), help="built-in problem")
        g.add_argument("--config", type=Path, help="YAML problem/options file")

    run = sub.add_parser("run", help="solve and write result files")
    source(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir", type=Path, default=Path("covsddp-out"))
    run.add_argument("--samples", type=int, help="fixed sample count (0: Gaussian closure)")
    run.add_argument("--kappa", type=int, help="0 (iLQG) or 1 (full second order)")
    run.add_argument("--estimator", choices=("mc", "gaussian"))
    run.add_argument("--max-outer", type=int)
    run.add_argument("--tol", type=float, help="constraint tolerance")
    run.add_argument("-v", "--verbose", action="store_true")

    val = sub.add_parser("validate", help="check a config and print it with defaults resolved")
    val.add_argument("path", nargs="?", type=Path, help="YAML config (same as --config)")
    source(val)
    return p


def _load(args) -> RunConfig:
    path = getattr(args, "path", None) or args.config
    if path is not None:
        return load_config(path)
    return RunConfig.from_preset(args.preset or "cosine1d")


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.kappa is not None:
        cfg.kappa = args.kappa
    if args.samples is not None:
        cfg.solver["samples_coarse"] = cfg.solver["samples_fine"] = args.samples
    if args.estimator is not None:
        cfg.solver["estimator"] = args.estimator
    if args.max_outer is not None:
        cfg.solver["max_outer"] = args.max_outer
    if args.tol is not None:
        cfg.solver["tol"] = args.tol
    errors = validate_dict(cfg.to_dict(), {})
    if errors:
        raise ConfigValidationError(errors)
    return cfg


# -- output files -----------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([r if isinstance(r, str) else _fmt(r) if isinstance(r, float) else r for r in row])


def _names(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(n)]


def _mat_names(prefix: str, r: int, c: int) -> list[str]:
    return [f"{prefix}{i}_{j}" for i in range(r) for j in range(c)]


def _f(a) -> list[float]:
    return [float(v) for v in np.ravel(a)]


def write_outputs(out_dir: Path, cfg: RunConfig, problem: ProblemPreset, result: CovControlResult, opts) -> dict:
    """Write the requested CSV files; returns their column metadata."""
    n, m = problem.model.state_dim, problem.model.control_dim
    traj, policy = result.trajectory, result.policy
    N, dt = traj.horizon, traj.dt
    t = [i * dt for i in range(N + 1)]
    files: dict = {}

    if "nominal" in cfg.outputs:
        cols = ["i", "t"] + _names("x", n) + _names("u", m)
        rows = []
        for i in range(N + 1):
            u = _f(traj.controls[i]) if i < N else [""] * m
            rows.append([i, t[i]] + _f(traj.states[i]) + u)
        _write_csv(out_dir / "nominal.csv", cols, rows)
        files["nominal.csv"] = {"columns": cols, "description": "noise-free nominal; u empty at the final step"}

    if "gains" in cfg.outputs:
        cols = ["i", "t"] + _names("k", m) + _mat_names("K", m, n)
        rows = [[i, t[i]] + _f(policy.k[i]) + _f(policy.K[i]) for i in range(N)]
        _write_csv(out_dir / "gains.csv", cols, rows)
        files["gains.csv"] = {"columns": cols, "description": "feedforward k and row-major feedback K per step"}

    mc = opts.estimator == "mc"
    batch = None
    if mc and ({"samples", "moments"} & set(cfg.outputs)):
        n_final = result.sample_counts_used[-1]
        batch = sample_closed_loop(
            problem.model, policy, problem.init, n_final, _batch_seed(opts.seed, n_final), keep_paths=True
        )

    if "samples" in cfg.outputs:
        cols = ["sample", "i", "t"] + _names("x", n) + _names("u", m)
        rows = []
        if batch is not None:
            for s in range(min(cfg.sample_paths, batch.full_paths.shape[0])):
                for i in range(N + 1):
                    u = _f(batch.full_controls[s, i]) if i < N else [""] * m
                    rows.append([s, i, t[i]] + _f(batch.full_paths[s, i]) + u)
        _write_csv(out_dir / "samples.csv", cols, rows)
        files["samples.csv"] = {
            "columns": cols,
            "description": "closed-loop sample paths (first sample_paths of the final batch; empty without sampling)",
        }

    if "moments" in cfg.outputs:
        cols = ["i", "t"] + _names("mean", n) + _mat_names("cov", n, n)
        if batch is not None:
            P = batch.full_paths
            means = P.mean(axis=0)
            D = P - means
            covs = np.einsum("sia,sib->iab", D, D) / P.shape[0]
        else:
            mt = propagate_moments_gaussian(problem.model, policy, problem.init)
            means, covs = mt.means, mt.covariances
        rows = [[i, t[i]] + _f(means[i]) + _f(covs[i]) for i in range(N + 1)]
        _write_csv(out_dir / "moments.csv", cols, rows)
        files["moments.csv"] = {
            "columns": cols,
            "description": f"per-step mean and covariance ({'Monte-Carlo, population convention' if batch is not None else 'Gaussian closure'})",
        }

    if "trace" in cfg.outputs:
        cols = (["iteration", "accepted", "n_samples", "dual", "mean_residual", "cov_residual", "eta1", "eta2"]
                + _names("lambda", n) + _mat_names("gamma", n, n))
        rows = [
            [s.iteration, int(s.accepted), s.n_samples, s.dual_value, s.mean_residual, s.cov_residual, s.eta1, s.eta2]
            + _f(s.lam) + _f(s.gamma)
            for s in result.history
        ]
        _write_csv(out_dir / "trace.csv", cols, rows)
        files["trace.csv"] = {"columns": cols, "description": "multipliers and residuals at every outer evaluation"}
    return files


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False, allow_nan=True)
        fh.write("\n")


def summary(cfg: RunConfig, problem: ProblemPreset, result: CovControlResult, opts, files: dict) -> dict:
    res = result.constraint_residuals
    mom = result.moments
    diag = result.sddp_diagnostics
    return {
        "converged": bool(result.converged),
        "exit_code": EXIT_OK if result.converged else EXIT_NOT_CONVERGED,
        "residuals": {"mean": res[0], "covariance": res[1]},
        "tolerance": opts.tol_constraint,
        "multipliers": {"lambda": _f(result.multipliers.lam), "gamma": result.multipliers.gamma.tolist()},
        "terminal": {
            "mean": _f(result.terminal_mean_est),
            "covariance": np.asarray(result.terminal_cov_est).tolist(),
            "std_error_mean": _f(mom.std_error_mean) if mom is not None else None,
            "n_samples": int(mom.n_samples) if mom is not None else 0,
        },
        "target": {"mean": _f(problem.constraint.mu_T), "covariance": problem.constraint.Sigma_T.tolist()},
        "nominal_terminal_state": _f(result.trajectory.states[-1]),
        "outer_iterations": result.outer_iterations,
        "accepted_steps": sum(1 for s in result.history if s.accepted),
        "sample_evaluations": {str(k): result.sample_counts_used.count(k) for k in sorted(set(result.sample_counts_used))},
        "sddp": {
            "iterations": diag.iterations,
            "converged": diag.converged,
            "reason": diag.reason,
            "backend": diag.backend,
        },
        "estimator": opts.estimator,
        "seed": cfg.seed,
        "problem": {"name": problem.name, "T": problem.T, "dt": problem.dt, "N": problem.N, "kappa": problem.kappa},
        "config": cfg.to_dict(),
        "files": files,
    }


# -- commands ---------------------------------------------------------------------


def cmd_run(args) -> int:
    out_dir: Path = args.out_dir
    try:
        cfg = _apply_overrides(_load(args), args)
        problem = cfg.build_problem()
        opts = cfg.options(problem)
        out_dir.mkdir(parents=True, exist_ok=True)
        result = solve_covariance_control(problem.model, problem.running_cost, problem.init, problem.constraint, opts)
        files = write_outputs(out_dir, cfg, problem, result, opts)
        payload = summary(cfg, problem, result, opts, files)
        _write_json(out_dir / "result.json", payload)
    except ConfigValidationError as exc:
        return _fail(exc.report(), exc, out_dir)
    except (CovSDDPError, ValueError, OSError) as exc:
        return _fail(str(exc), exc, out_dir)
    r = payload["residuals"]
    status = "converged" if result.converged else "not converged"
    print(
        f"{status}: mean residual {r['mean']:.4g}, covariance residual {r['covariance']:.4g} "
        f"after {result.outer_iterations} outer iterations -> {out_dir}"
    )
    return payload["exit_code"]


def _fail(message: str, exc: Exception, out_dir: Path | None) -> int:
    print(f"error: {message}", file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            payload = {"converged": False, "exit_code": EXIT_ERROR, "error": message, "error_type": type(exc).__name__}
            if isinstance(exc, ConfigError):
                payload["field"], payload["line"] = exc.field, exc.line
            _write_json(out_dir / "result.json", payload)
        except OSError:
            pass
    return EXIT_ERROR


def cmd_validate(args) -> int:
    try:
        cfg = _load(args)
        resolved = cfg.resolved()
    except ConfigValidationError as exc:
        print(exc.report(), file=sys.stderr)
        return EXIT_ERROR
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.write(yaml.safe_dump(resolved, sort_keys=False, default_flow_style=None))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run":
        return cmd_run(args)
    return cmd_validate(args)


if __name__ == "__main__":
    sys.exit(main())
