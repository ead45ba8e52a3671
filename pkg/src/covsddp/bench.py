"""Timing of the backward recursion on the compiled and pure-Python backends.

Run ``python -m covsddp.bench`` for a table; both backends see identical
inputs and their outputs are compared before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from .covcon import Multipliers, terminal_cost_expansion
from .sddp.kernels import BACKENDS
from .sddp.solver import SDDPProblem, backward_pass, linearize_trajectory, rollout_nominal
from .systems import preset_cosine1d, preset_linear_gaussian, preset_pendulum


def _problem(name: str, kappa: int) -> tuple[SDDPProblem, np.ndarray]:
    if name == "pendulum":
        p = preset_pendulum(kappa=kappa)
    elif name == "cosine1d":
        p = preset_cosine1d(kappa=kappa)
    else:
        p = preset_linear_gaussian(n=6, m=3, T=10.0, kappa=kappa)
    n = p.model.state_dim
    mult = Multipliers(np.zeros(n), 0.5 * np.eye(n))
    prob = SDDPProblem(
        p.model, p.running_cost, lambda x: terminal_cost_expansion(mult, p.constraint, x),
        p.init.mu_0, p.N, p.dt, kappa,
    )
    u = 0.1 * np.sin(np.linspace(0, 3, p.N))[:, None] * np.ones((1, p.model.control_dim))
    return prob, u


def time_backend(problem: SDDPProblem, traj, backend: str, repeats: int) -> float:
    """Best-of-``repeats`` wall time of one backward pass (linearization excluded)."""
    local = linearize_trajectory(problem, traj)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        backward_pass(problem, traj, backend=backend, local=local)
        best = min(best, time.perf_counter() - t0)
    return best


def run(problems=("cosine1d", "pendulum", "lq"), kappas=(0, 1), repeats: int = 20) -> list[dict]:
    rows = []
    for name in problems:
        for kappa in kappas:
            prob, u = _problem(name, kappa)
            traj = rollout_nominal(prob, u)
            ref = backward_pass(prob, traj, backend="python")
            row = {"problem": name, "kappa": kappa, "N": prob.N, "n": prob.model.state_dim}
            for backend in sorted(BACKENDS):
                out = backward_pass(prob, traj, backend=backend)
                row[f"{backend}_max_gain_diff"] = float(np.max(np.abs(out.policy.K - ref.policy.K)))
                row[f"{backend}_s"] = time_backend(prob, traj, backend, repeats)
            if "cython" in BACKENDS:
                row["speedup"] = row["python_s"] / row["cython_s"]
            rows.append(row)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m covsddp.bench")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    rows = run(repeats=args.repeats)
    if "cython" not in BACKENDS:
        print("compiled backend not available; timing the pure-Python loop only")
    print(f"{'problem':<10}{'kappa':>6}{'N':>6}{'n':>4}{'python ms':>12}{'cython ms':>12}{'speedup':>9}{'|dK|':>10}")
    for r in rows:
        cy = r.get("cython_s", np.nan) * 1e3
        print(
            f"{r['problem']:<10}{r['kappa']:>6}{r['N']:>6}{r['n']:>4}{r['python_s'] * 1e3:>12.3f}"
            f"{cy:>12.3f}{r.get('speedup', np.nan):>9.1f}{r.get('cython_max_gain_diff', 0.0):>10.1e}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
